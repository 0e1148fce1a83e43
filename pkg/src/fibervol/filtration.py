"""Inductive volume filtration on the slicing tree, in exact arithmetic.

Each round picks two new cuts and rebalances both volume forms so that their
released integrals agree on every freshly created superlevel component,
while older balanced tiers are never touched again.  All equalities are
exact over the rationals; runs are deterministic and fully replayable from
the recorded trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .bundle import Cell, DiscreteBundle, FiberVolume, as_cut
from .errors import HorizonExceeded, HypothesisError, InvariantError, PreconditionError
from .extreal import INF, ExtReal
from .release import (
    BaseFunction,
    CoverGraph,
    CoveringMap,
    approximate_split,
    induced_covering,
    pullback,
    pushforward,
    sheets,
    sheets_by_component,
)
from .slicing import (
    NodeKey,
    SlicingTree,
    Subbundle,
    build_tree,
    full_subbundle,
    released_integral,
    saturated_slice,
    saturating_threshold,
    slice_to_child_cut,
    slice_to_grandchild_cut,
    superlevel_components,
)

HALF = Fraction(1, 2)


def _as_signed(bf: BaseFunction) -> BaseFunction:
    return BaseFunction({k: v.finite for k, v in bf.values.items()}, "signed")


# ---------------------------------------------------------------------------
# commensurability


@dataclass
class CommensurabilityEntry:
    cut: Fraction
    node: Cell  # minimum cell of the component, as a stable key
    classification: str  # "both-finite" | "both-infinite" | "mismatch"
    difference: Optional[BaseFunction]  # released difference when both finite
    detail: str = ""


@dataclass
class CommensurabilityReport:
    entries: List[CommensurabilityEntry] = field(default_factory=list)
    smoothness_vacuous: bool = True  # finite base: continuity holds trivially

    @property
    def mismatches(self) -> List[CommensurabilityEntry]:
        return [e for e in self.entries if e.classification == "mismatch"]

    @property
    def commensurable(self) -> bool:
        return not self.mismatches

    def to_dict(self) -> dict:
        return {
            "commensurable": self.commensurable,
            "smoothness_vacuous": self.smoothness_vacuous,
            "entries": [
                {
                    "cut": str(e.cut),
                    "node": list(e.node),
                    "class": e.classification,
                    "detail": e.detail,
                }
                for e in self.entries
            ],
        }


def _volume_class(bf: BaseFunction) -> str:
    flags = [v.is_infinite for v in bf.values.values()]
    if all(flags):
        return "infinite"
    if not any(flags):
        return "finite"
    return "mixed"


def check_commensurable(
    bundle: DiscreteBundle, omega: FiberVolume, tau: FiberVolume
) -> CommensurabilityReport:
    """Classify every superlevel component at every half-integer cut.

    The horizon-exhaustive family of cuts suffices for the truncated model;
    smoothness of finite differences is vacuous over a finite base and only
    the finiteness classes can disagree.
    """
    report = CommensurabilityReport()
    L = bundle.fiber.horizon
    lo = bundle.fiber.min_level()
    alpha = Fraction(2 * lo - 1, 2)
    while alpha <= Fraction(2 * L - 1, 2):
        for comp in superlevel_components(bundle, alpha):
            io = released_integral(comp, omega)
            it = released_integral(comp, tau)
            co, ct = _volume_class(io), _volume_class(it)
            if co == "finite" and ct == "finite":
                report.entries.append(
                    CommensurabilityEntry(
                        alpha, comp.min_cell(), "both-finite", _as_signed(io).sub(_as_signed(it))
                    )
                )
            elif co == "infinite" and ct == "infinite":
                report.entries.append(
                    CommensurabilityEntry(alpha, comp.min_cell(), "both-infinite", None)
                )
            else:
                report.entries.append(
                    CommensurabilityEntry(
                        alpha,
                        comp.min_cell(),
                        "mismatch",
                        None,
                        detail=f"classes {co} vs {ct}",
                    )
                )
        alpha += 1
    return report


# ---------------------------------------------------------------------------
# interiors and the volume transfer


def interior_cells_by_vertex(K: Subbundle) -> Dict[object, List[Cell]]:
    """Cells at levels strictly inside each release component's level span."""
    bundle = K.bundle
    out: Dict[object, List[Cell]] = {}
    for b, comp in K.release_base.vertices:
        cells = [(b, v) for v in comp]
        levels = sorted({bundle.cell_level(c) for c in cells})
        lo, hi = levels[0], levels[-1]
        out[(b, comp)] = sorted(
            c for c in cells if lo < bundle.cell_level(c) < hi
        )
    return out


def free_and_fixed(
    K: Subbundle, form: FiberVolume
) -> Tuple[BaseFunction, BaseFunction]:
    """Interior (adjustable) and boundary (immovable) mass per release vertex."""
    interiors = interior_cells_by_vertex(K)
    total = released_integral(K, form)
    free_vals = {}
    for rv, cells in interiors.items():
        acc = Fraction(0)
        for c in cells:
            acc += form.cell_mass[c]
        free_vals[rv] = ExtReal(acc)
    free = BaseFunction(free_vals, "extended")
    fixed = BaseFunction(
        {rv: total.values[rv] - free.values[rv] for rv in free_vals}, "extended"
    )
    return free, fixed


def transfer_volume(
    bundle: DiscreteBundle, omega: FiberVolume, K: Subbundle, w: BaseFunction
) -> FiberVolume:
    """Redistribute mass inside the interior of ``K`` to hit released targets.

    The output agrees with ``omega`` outside the interior cells of ``K`` and
    has released integral exactly ``w`` over each release vertex of ``K``.
    ``w`` must exceed the immovable boundary mass of each release component
    strictly (the target's interior share must stay positive).
    """
    if K.contains_tail_cells():
        raise PreconditionError("transfer region must lie below the horizon")
    rb = K.release_base
    if set(w.values) != set(rb.vertices):
        raise PreconditionError("target is not a function on the region's release")
    interiors = interior_cells_by_vertex(K)
    for rv, cells in interiors.items():
        if not cells:
            raise PreconditionError(f"release component {rv!r} has no interior cell")
    for rv in rb.vertices:
        val = w.values[rv]
        if val.is_infinite or val.finite <= 0:
            raise PreconditionError(f"target must be finite and positive at {rv!r}")

    free, fixed = free_and_fixed(K, omega)
    for rv in rb.vertices:
        if not fixed.values[rv] < w.values[rv]:
            raise PreconditionError(
                f"target {w.values[rv].to_token()} at {rv!r} does not exceed the "
                f"boundary mass {fixed.values[rv].to_token()}"
            )

    # scale interior mass down far enough that every component undershoots,
    # then pour the exact residual onto one interior cell per component
    t = Fraction(1, 2)
    for rv in rb.vertices:
        gap = (w.values[rv] - fixed.values[rv]).finite
        t = min(t, gap / (2 * free.values[rv].finite))
    updates: Dict[Cell, Fraction] = {}
    for rv in rb.vertices:
        cells = interiors[rv]
        for c in cells:
            updates[c] = omega.cell_mass[c] * t
        xi_total = fixed.values[rv].finite + free.values[rv].finite * t
        bump = w.values[rv].finite - xi_total
        anchor = cells[0]
        updates[anchor] += bump
        if updates[anchor] <= 0:
            raise InvariantError(f"transfer drove {anchor} nonpositive")
    return omega.copy_with(updates)


# ---------------------------------------------------------------------------
# round bookkeeping


@dataclass
class NodeRound:
    """Per-node numbers chosen in one round, plus their audit context."""

    key: NodeKey
    role: str  # "child" or "grandchild"
    volume_class: str = ""
    delta: Optional[BaseFunction] = None
    u: Optional[BaseFunction] = None
    u_lower: Optional[BaseFunction] = None
    u_upper: Optional[BaseFunction] = None
    v: Optional[BaseFunction] = None
    beta: Optional[Fraction] = None
    theta: Optional[Fraction] = None
    targets: Dict[str, BaseFunction] = field(default_factory=dict)


@dataclass
class RoundTrace:
    n: int
    alpha_odd: Fraction
    alpha_even: Fraction
    children: Dict[NodeKey, NodeRound]
    grandchildren: Dict[NodeKey, NodeRound]
    change_support: FrozenSet[Cell]


@dataclass
class FiltrationState:
    bundle: DiscreteBundle
    tree: SlicingTree
    omegas: List[FiberVolume]
    taus: List[FiberVolume]
    rounds: List[RoundTrace]

    @property
    def n(self) -> int:
        return len(self.rounds)

    @property
    def omega(self) -> FiberVolume:
        return self.omegas[-1]

    @property
    def tau(self) -> FiberVolume:
        return self.taus[-1]


def initial_state(
    bundle: DiscreteBundle, omega: FiberVolume, tau: FiberVolume
) -> FiltrationState:
    return FiltrationState(bundle, build_tree(bundle, []), [omega], [tau], [])


# ---------------------------------------------------------------------------
# one round


def _node_class(sub: Subbundle, omega: FiberVolume, tau: FiberVolume) -> str:
    co = _volume_class(released_integral(sub, omega))
    ct = _volume_class(released_integral(sub, tau))
    if co != ct or co == "mixed":
        raise InvariantError(
            f"forms are not commensurable on {sub.label or sub.min_cell()}: {co} vs {ct}"
        )
    return co


def _bijection_to_node(K: Subbundle, node: Subbundle) -> CoveringMap:
    kappa = induced_covering(K.release_base, node.release_base)
    kappa.validate()
    if any(n != 1 for n in sheets_by_component(kappa).values()):
        raise InvariantError("slice is not saturating over its node")
    return kappa


def _to_slice_release(K: Subbundle, node: Subbundle, fn: BaseFunction) -> BaseFunction:
    """Rewrite a function on the node's release through the slice bijection."""
    kappa = _bijection_to_node(K, node)
    return pullback(kappa, fn)


def run_round(state: FiltrationState) -> FiltrationState:
    """Execute one filtration round, appending one trace entry and two cuts."""
    bundle = state.bundle
    n = state.n + 1
    omega, tau = state.omega, state.tau
    tree = state.tree
    child_level = 2 * n - 2
    if tree.height < child_level:
        raise PreconditionError(f"tree is missing level {child_level}")

    child_keys = tree.levels[child_level]
    thetas: Dict[NodeKey, Fraction] = {}
    for key in child_keys:
        thetas[key] = saturating_threshold(tree.node(key).sub, assert_monotone=False)

    # odd cut: beyond every child threshold, with interiors available
    alpha_odd = max(thetas.values()) + 1
    L = bundle.fiber.horizon
    horizon_cut = Fraction(2 * L - 1, 2)
    while True:
        if alpha_odd > horizon_cut:
            raise HorizonExceeded(
                f"no admissible odd cut for round {n}", partial=state
            )
        if all(
            _slice_ok(tree.node(k).sub, alpha_odd) for k in child_keys
        ):
            break
        alpha_odd += 1

    tree = build_tree(bundle, list(tree.alphas) + [alpha_odd])

    # the A-level: grandparents carrying the imbalance bookkeeping
    if n == 1:
        a_keys = [(0, 0)]
    else:
        a_keys = tree.levels[2 * n - 3]

    grand: Dict[NodeKey, NodeRound] = {}
    for a_key in a_keys:
        _compute_deltas(state, tree, n, a_key, alpha_odd, omega, tau, grand)

    children: Dict[NodeKey, NodeRound] = {}
    for c_key in child_keys:
        children[c_key] = _choose_u(tree, n, c_key, thetas[c_key], omega, tau, grand)

    for c_key in child_keys:
        _split_v(tree, c_key, children[c_key], grand, omega)

    # even cut: per-grandchild beta searches, joined at their maximum
    for e_key in tree.levels[2 * n - 1]:
        _choose_beta(tree, e_key, grand[e_key], alpha_odd, omega, tau, state)
    alpha_even = max(nr.beta for nr in grand.values())
    while True:
        if alpha_even > horizon_cut:
            raise HorizonExceeded(f"no admissible even cut for round {n}", partial=state)
        if all(
            _tse_feasible(tree.node(k).sub, alpha_even, grand[k], omega, tau)[0]
            for k in tree.levels[2 * n - 1]
        ):
            break
        alpha_even += 1

    tree = build_tree(bundle, list(tree.alphas) + [alpha_even])

    # realize the four released-integral targets
    new_omega, new_tau = omega, tau
    for c_key in tree.levels[child_level]:
        nr = children[c_key]
        node = tree.node(c_key).sub
        K = slice_to_child_cut(tree, c_key)
        kappa = _bijection_to_node(K, node)
        base_o = released_integral(node, omega, K.cells)
        base_t = released_integral(node, tau, K.cells)
        kdelta = _sum_child_deltas(tree, c_key, grand)
        w_omega = BaseFunction(
            {rv: base_o.values[rv] + nr.u.values[rv] for rv in base_o.values},
            "extended",
        )
        w_tau = BaseFunction(
            {
                rv: base_t.values[rv] + nr.u.values[rv] - kdelta.values[rv]
                for rv in base_t.values
            },
            "extended",
        )
        nr.targets = {"omega": w_omega, "tau": w_tau}
        new_omega = transfer_volume(bundle, new_omega, K, pullback(kappa, w_omega))
        new_tau = transfer_volume(bundle, new_tau, K, pullback(kappa, w_tau))

    for e_key in tree.levels[2 * n - 1]:
        nr = grand[e_key]
        node = tree.node(e_key).sub
        K = slice_to_child_cut(tree, e_key)
        ok, data = _tse_feasible(node, alpha_even, nr, omega, tau)
        if not ok:
            raise InvariantError(f"even cut lost feasibility at {e_key}")
        w_omega_K, w_tau_K, targets = data
        nr.targets = targets
        new_omega = transfer_volume(bundle, new_omega, K, w_omega_K)
        new_tau = transfer_volume(bundle, new_tau, K, w_tau_K)

    support = frozenset(new_omega.support_of_difference(omega)) | frozenset(
        new_tau.support_of_difference(tau)
    )
    trace = RoundTrace(n, alpha_odd, alpha_even, children, grand, support)
    new_state = FiltrationState(
        bundle, tree, state.omegas + [new_omega], state.taus + [new_tau], state.rounds + [trace]
    )
    _assert_round_invariants(new_state)
    return new_state


def _slice_ok(node: Subbundle, alpha: Fraction) -> bool:
    sl = saturated_slice(node, alpha)
    if not sl.cells:
        return False
    try:
        kappa = induced_covering(sl.release_base, node.release_base)
    except InvariantError:
        return False
    if not kappa.is_covering():
        return False
    return all(cells for cells in interior_cells_by_vertex(sl).values())


def _compute_deltas(state, tree, n, a_key, alpha_odd, omega, tau, grand) -> None:
    """Fill per-grandchild imbalances under one bookkeeping node."""
    bundle = state.bundle
    a_node = tree.node(a_key).sub
    if n == 1:
        e_keys = tree.children(a_key)
        region = slice_to_child_cut(tree, a_key)
    else:
        e_keys = tree.grandchildren(a_key)
        region = slice_to_grandchild_cut(tree, a_key)
    ref_o = released_integral(a_node, omega, region.cells)
    ref_t = released_integral(a_node, tau, region.cells)

    finite_keys, infinite_keys = [], []
    covers: Dict[NodeKey, CoveringMap] = {}
    for e_key in e_keys:
        e_node = tree.node(e_key).sub
        covers[e_key] = induced_covering(e_node.release_base, a_node.release_base)
        nr = NodeRound(e_key, "grandchild")
        nr.volume_class = _node_class(e_node, omega, tau)
        grand[e_key] = nr
        (finite_keys if nr.volume_class == "finite" else infinite_keys).append(e_key)

    for e_key in finite_keys:
        e_node = tree.node(e_key).sub
        io = _as_signed(released_integral(e_node, omega))
        it = _as_signed(released_integral(e_node, tau))
        grand[e_key].delta = io.sub(it)

    if infinite_keys:
        acc = {rv: ref_t.values[rv] - ref_o.values[rv] for rv in ref_t.values}
        for g_key in finite_keys:
            pushed = pushforward(covers[g_key], grand[g_key].delta)
            acc = {rv: acc[rv] - pushed.values[rv] for rv in acc}
        total_sheets = sum(sheets(covers[g]) for g in infinite_keys)
        residual = BaseFunction({rv: v.finite for rv, v in acc.items()}, "signed")
        for e_key in infinite_keys:
            pulled = pullback(covers[e_key], residual)
            grand[e_key].delta = pulled.scale(Fraction(1, total_sheets))

    # the pushed imbalances must account exactly for the regional difference
    total = {rv: ExtReal(0) for rv in ref_o.values}
    for e_key in e_keys:
        pushed = pushforward(covers[e_key], grand[e_key].delta)
        total = {rv: total[rv] + pushed.values[rv] for rv in total}
    for rv in total:
        if total[rv] != ref_t.values[rv] - ref_o.values[rv]:
            raise InvariantError(
                f"imbalance bookkeeping off at {a_key} / {rv!r} in round {n}"
            )


def _sum_child_deltas(tree, c_key, grand) -> BaseFunction:
    c_node = tree.node(c_key).sub
    acc = {rv: ExtReal(0) for rv in released_integral(c_node, FakeZero := None) } if False else None
    # sum of pushed grandchild imbalances, as a function on the child's release
    out = {rv: ExtReal(0) for rv in c_node.release_base.vertices}
    for e_key in tree.children(c_key):
        kappa = induced_covering(
            tree.node(e_key).sub.release_base, c_node.release_base
        )
        pushed = pushforward(kappa, grand[e_key].delta)
        out = {rv: out[rv] + pushed.values[rv] for rv in out}
    return BaseFunction({rv: v.finite for rv, v in out.items()}, "signed")


def _choose_u(tree, n, c_key, theta, omega, tau, grand) -> NodeRound:
    """Midpoint (finite headroom) or lower+1 (infinite headroom) shift."""
    node = tree.node(c_key).sub
    K = slice_to_child_cut(tree, c_key)
    kappa = _bijection_to_node(K, node)
    back = {s: t for t, s in kappa.vertex_map.items()}  # node rv -> slice rv

    free_o, _ = free_and_fixed(K, omega)
    free_t, _ = free_and_fixed(K, tau)
    slice_o = released_integral(node, omega, K.cells)
    total_o = released_integral(node, omega)
    kdelta = _sum_child_deltas(tree, c_key, grand)

    nr = NodeRound(c_key, "child")
    nr.theta = theta
    nr.volume_class = _node_class(node, omega, tau)
    lower, upper, u = {}, {}, {}
    for rv in node.release_base.vertices:
        srv = kappa.vertex_map  # slice rv -> node rv; we need the inverse image
    inverse = {t: s for s, t in kappa.vertex_map.items()}
    for rv in node.release_base.vertices:
        srv = inverse[rv]
        lo = max(
            -free_o.values[srv].finite,
            -free_t.values[srv].finite + kdelta.values[rv].finite,
        )
        up = total_o.values[rv] - slice_o.values[rv]
        if not ExtReal(lo) < up:
            raise InvariantError(f"empty shift interval at {c_key} / {rv!r}")
        lower[rv] = ExtReal(lo)
        upper[rv] = up
        u[rv] = (lo + up.finite) / 2 if not up.is_infinite else lo + 1
    nr.u_lower = BaseFunction(lower, "signed")
    nr.u_upper = BaseFunction(upper, "extended")
    nr.u = BaseFunction({rv: ExtReal(x) for rv, x in u.items()}, "signed")
    return nr


def _split_v(tree, c_key, child_nr, grand, omega) -> None:
    """Distribute the child's shift across its children by the splitting lemma."""
    c_node = tree.node(c_key).sub
    e_keys = tree.children(c_key)
    graphs, vmaps, emaps = [], {}, {}
    majorant = {}
    for e_key in e_keys:
        e_node = tree.node(e_key).sub
        kappa = induced_covering(e_node.release_base, c_node.release_base)
        graphs.append(e_node.release_base)
        vmaps.update(kappa.vertex_map)
        emaps.update(kappa.edge_map)
        tot = released_integral(e_node, omega)
        majorant.update(tot.values)
    union = CoverGraph.union(graphs)
    kappa_union = CoveringMap(union, c_node.release_base, vmaps, emaps)
    a_prime = BaseFunction(majorant, "extended")
    v_all = approximate_split(kappa_union, a_prime, child_nr.u)
    for e_key in e_keys:
        e_node = tree.node(e_key).sub
        grand[e_key].v = BaseFunction(
            {rv: v_all.values[rv] for rv in e_node.release_base.vertices}, "signed"
        )


def _tse_feasible(node: Subbundle, beta: Fraction, nr: NodeRound, omega, tau):
    """Check the slice at ``beta`` supports both withdrawal targets.

    Returns ``(ok, (w_omega_on_slice, w_tau_on_slice, targets_on_node))``.
    """
    sl = saturated_slice(node, beta)
    if not sl.cells:
        return False, None
    try:
        kappa = induced_covering(sl.release_base, node.release_base)
    except InvariantError:
        return False, None
    if not kappa.is_covering():
        return False, None
    interiors = interior_cells_by_vertex(sl)
    if not all(interiors.values()):
        return False, None

    slice_o = released_integral(node, omega, sl.cells)
    slice_t = released_integral(node, tau, sl.cells)
    t_omega, t_tau = {}, {}
    for rv in node.release_base.vertices:
        t_omega[rv] = slice_o.values[rv] - nr.v.values[rv]
        t_tau[rv] = slice_t.values[rv] - (nr.v.values[rv] - nr.delta.values[rv])
        if t_omega[rv].finite <= 0 or t_tau[rv].finite <= 0:
            return False, None
    counts = sheets_by_component(kappa)

    def per_sheet(target: Dict) -> BaseFunction:
        vals = {}
        for srv in sl.release_base.vertices:
            trv = kappa.vertex_map[srv]
            k = next(k for comp, k in counts.items() if trv in comp)
            vals[srv] = ExtReal(target[trv].finite / k)
        return BaseFunction(vals, "extended")

    w_omega = per_sheet(t_omega)
    w_tau = per_sheet(t_tau)
    _, fixed_o = free_and_fixed(sl, omega)
    _, fixed_t = free_and_fixed(sl, tau)
    for srv in sl.release_base.vertices:
        if not fixed_o.values[srv] < w_omega.values[srv]:
            return False, None
        if not fixed_t.values[srv] < w_tau.values[srv]:
            return False, None
    targets = {
        "omega": BaseFunction(t_omega, "extended"),
        "tau": BaseFunction(t_tau, "extended"),
    }
    return True, (w_omega, w_tau, targets)


def paper_slice_criterion(
    node: Subbundle, beta: Fraction, nr: NodeRound, omega, tau
) -> Optional[BaseFunction]:
    """min(slice omega, slice tau + imbalance) - v, on the node's release.

    ``None`` when the slice at ``beta`` is empty.
    """
    sl = saturated_slice(node, beta)
    if not sl.cells:
        return None
    slice_o = released_integral(node, omega, sl.cells)
    slice_t = released_integral(node, tau, sl.cells)
    vals = {}
    for rv in node.release_base.vertices:
        a = slice_o.values[rv].finite
        b = slice_t.values[rv].finite + nr.delta.values[rv].finite
        vals[rv] = ExtReal(min(a, b) - nr.v.values[rv].finite)
    return BaseFunction(vals, "signed")


def _choose_beta(tree, e_key, nr: NodeRound, alpha_odd, omega, tau, state) -> None:
    node = tree.node(e_key).sub
    bundle = node.bundle
    horizon_cut = Fraction(2 * bundle.fiber.horizon - 1, 2)
    if nr.volume_class == "infinite":
        nr.theta = saturating_threshold(node, assert_monotone=False)
        base = max(nr.theta, alpha_odd)
    else:
        base = alpha_odd
    beta = base + 1
    while True:
        if beta > horizon_cut:
            raise HorizonExceeded(
                f"no admissible withdrawal cut for node {e_key}", partial=state
            )
        crit = paper_slice_criterion(node, beta, nr, omega, tau)
        positive = crit is not None and all(
            v.finite > 0 for v in crit.values.values()
        )
        if positive and _tse_feasible(node, beta, nr, omega, tau)[0]:
            nr.beta = beta
            return
        beta += 1


# ---------------------------------------------------------------------------
# audits


@dataclass
class AuditEntry:
    round: int
    relation: str
    node: str
    passed: bool
    detail: str = ""


@dataclass
class FiltrationAudit:
    entries: List[AuditEntry] = field(default_factory=list)

    def add(self, round_n, relation, node, passed, detail=""):
        self.entries.append(AuditEntry(round_n, relation, str(node), passed, detail))

    @property
    def failures(self) -> List[AuditEntry]:
        return [e for e in self.entries if not e.passed]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": len(self.entries),
            "failures": [
                {
                    "round": e.round,
                    "relation": e.relation,
                    "node": e.node,
                    "detail": e.detail,
                }
                for e in self.failures
            ],
        }


def _bf_equal(a: BaseFunction, b: BaseFunction) -> bool:
    return set(a.values) == set(b.values) and all(
        a.values[k] == b.values[k] for k in a.values
    )


def _assert_round_invariants(state: FiltrationState) -> None:
    audit = verify_invariants(state, rounds=[state.n])
    if not audit.passed:
        first = audit.failures[0]
        raise InvariantError(
            f"round {first.round} broke {first.relation} at {first.node}: {first.detail}"
        )


def verify_invariants(
    state: FiltrationState, rounds: Optional[Sequence[int]] = None
) -> FiltrationAudit:
    """Re-derive every displayed relation of the filtration from the trace."""
    audit = FiltrationAudit()
    tree = state.tree
    for trace in state.rounds:
        n = trace.n
        if rounds is not None and n not in rounds:
            continue
        omega_prev, omega_new = state.omegas[n - 1], state.omegas[n]
        tau_prev, tau_new = state.taus[n - 1], state.taus[n]

        # support containment in the interiors of the deep slices
        allowed = set()
        for c_key in tree.levels[2 * n - 2]:
            deep = slice_to_grandchild_cut(tree, c_key)
            for cells in interior_cells_by_vertex(deep).values():
                allowed.update(cells)
        stray = [c for c in trace.change_support if c not in allowed]
        audit.add(n, "support-containment", "*", not stray, f"stray cells {stray[:3]}")

        # balanced tier: the bookkeeping nodes' regions agree between the forms
        a_keys = [(0, 0)] if n == 1 else tree.levels[2 * n - 3]
        for a_key in a_keys:
            a_node = tree.node(a_key).sub
            region = (
                slice_to_child_cut(tree, a_key)
                if n == 1
                else slice_to_grandchild_cut(tree, a_key)
            )
            io = released_integral(a_node, omega_new, region.cells)
            it = released_integral(a_node, tau_new, region.cells)
            audit.add(n, "tier-balance", a_key, _bf_equal(io, it))

        # conservation: the child regions keep both forms' regional mass
        for c_key in tree.levels[2 * n - 2]:
            c_node = tree.node(c_key).sub
            region = slice_to_grandchild_cut(tree, c_key)
            for form_prev, form_new, tag in (
                (omega_prev, omega_new, "omega"),
                (tau_prev, tau_new, "tau"),
            ):
                before = released_integral(c_node, form_prev, region.cells)
                after = released_integral(c_node, form_new, region.cells)
                audit.add(n, f"deep-slice-conservation-{tag}", c_key, _bf_equal(before, after))

        # fresh equality on every new top node
        for e_key in tree.levels[2 * n - 1]:
            e_node = tree.node(e_key).sub
            io = released_integral(e_node, omega_new)
            it = released_integral(e_node, tau_new)
            audit.add(n, "top-node-balance", e_key, _bf_equal(io, it))

        # chosen shifts sit strictly inside the printed bounds
        for c_key, nr in trace.children.items():
            node = tree.node(c_key).sub
            K = slice_to_child_cut(tree, c_key)
            slice_o = released_integral(node, omega_prev, K.cells)
            slice_t = released_integral(node, tau_prev, K.cells)
            total_o = released_integral(node, omega_prev)
            kdelta = _sum_child_deltas(tree, c_key, trace.grandchildren)
            ok = True
            detail = ""
            for rv in node.release_base.vertices:
                u = nr.u.values[rv].finite
                lo1 = -slice_o.values[rv].finite
                lo2 = -slice_t.values[rv].finite + kdelta.values[rv].finite
                up = total_o.values[rv] - slice_o.values[rv]
                if not (max(lo1, lo2) < u and ExtReal(u) < up):
                    ok = False
                    detail = f"u={u} outside bounds at {rv!r}"
                    break
            audit.add(n, "shift-bounds", c_key, ok, detail)

        # withdrawal cut minimality: the previous cut fails some admissibility leg
        for e_key, nr in trace.grandchildren.items():
            node = tree.node(e_key).sub
            crit = paper_slice_criterion(node, nr.beta, nr, omega_prev, tau_prev)
            ok_now = crit is not None and all(v.finite > 0 for v in crit.values.values())
            floor = nr.theta if nr.volume_class == "infinite" and nr.theta else trace.alpha_odd
            lower_bound = max(floor, trace.alpha_odd)
            if nr.beta - 1 > lower_bound:
                prev_ok, _ = _tse_feasible(node, nr.beta - 1, nr, omega_prev, tau_prev)
                crit_prev = paper_slice_criterion(node, nr.beta - 1, nr, omega_prev, tau_prev)
                prev_pos = crit_prev is not None and all(
                    v.finite > 0 for v in crit_prev.values.values()
                )
                minimal = not (prev_ok and prev_pos)
            else:
                minimal = True
            audit.add(n, "withdrawal-cut", e_key, ok_now and minimal)
    return audit


# ---------------------------------------------------------------------------
# the full run


@dataclass
class Piece:
    label: str
    node_key: NodeKey
    region: Subbundle


@dataclass
class FiltrationResult:
    state: FiltrationState
    pieces: List[Piece]
    audit: FiltrationAudit

    @property
    def omega_final(self) -> FiberVolume:
        return self.state.omega

    @property
    def tau_final(self) -> FiberVolume:
        return self.state.tau


def check_hypotheses(
    bundle: DiscreteBundle, omega: FiberVolume, tau: FiberVolume
) -> dict:
    """Gate the pipeline: connectivity, equal released integrals, commensurability.

    Raises :class:`HypothesisError` before any state is created.
    """
    from .bundle import fiber_integral
    from .slicing import full_total

    total = full_total(bundle)
    if not total.is_connected():
        raise HypothesisError("the total space is disconnected")
    root = full_subbundle(bundle)
    io = released_integral(root, omega)
    it = released_integral(root, tau)
    for rv in io.values:
        if io.values[rv] != it.values[rv]:
            raise HypothesisError(
                f"released integrals differ over base vertex {rv[0]} "
                f"(component {','.join(rv[1][:3])}...): "
                f"{io.values[rv].to_token()} vs {it.values[rv].to_token()}"
            )
    comm = check_commensurable(bundle, omega, tau)
    if not comm.commensurable:
        bad = comm.mismatches[0]
        raise HypothesisError(
            f"forms are not commensurable at cut {bad.cut}, node {bad.node}: {bad.detail}"
        )
    return {
        "total_connected": True,
        "equal_fiber_integral": {
            b: v.to_token() for b, v in fiber_integral(bundle, omega).items()
        },
        "equal_released_integral": True,
        "commensurability": comm.to_dict(),
    }


def run_filtration(
    bundle: DiscreteBundle,
    omega: FiberVolume,
    tau: FiberVolume,
    rounds: int,
) -> FiltrationResult:
    """Run ``rounds`` rounds and return the trace, final forms and pieces."""
    check_hypotheses(bundle, omega, tau)
    state = initial_state(bundle, omega, tau)
    for _ in range(rounds):
        state = run_round(state)
    pieces = collect_pieces(state)
    audit = verify_invariants(state)
    return FiltrationResult(state, pieces, audit)


def collect_pieces(state: FiltrationState) -> List[Piece]:
    """The balanced tiling: the core slice plus every odd-depth deep slice."""
    if state.n == 0:
        return []
    tree = state.tree
    pieces = [Piece("core", (0, 0), slice_to_child_cut(tree, (0, 0)))]
    for level in range(1, 2 * state.n - 2, 2):
        for key in tree.levels[level]:
            pieces.append(
                Piece(f"tier{level}.{key[1]}", key, slice_to_grandchild_cut(tree, key))
            )
    for piece in pieces:
        node = tree.node(piece.node_key).sub
        io = released_integral(node, state.omega, piece.region.cells)
        it = released_integral(node, state.tau, piece.region.cells)
        if not _bf_equal(io, it):
            raise InvariantError(f"piece {piece.label} is not balanced")
    return pieces
