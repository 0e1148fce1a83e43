"""Saturated slicing, thresholds, the slicing tree, and ends.

A saturated sublevel region is the basepoint component of a sublevel set of
the total graph, together with every bounded component of its complement
(bounded meaning: reaching no horizon tail).  Superlevel components of the
complement of such regions, indexed by an increasing sequence of cuts, form
a rooted locally finite leafless tree; its branch germs at the horizon are
the ends of the total space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .bundle import Cell, DiscreteBundle, FiberVolume, TotalGraph, as_cut, build_total
from .errors import HorizonExceeded, InvariantError, PreconditionError
from .extreal import ExtReal
from .release import (
    BaseFunction,
    CoveringMap,
    ReleaseBase,
    induced_covering,
    release,
    sheets,
)

HALF = Fraction(1, 2)


def full_total(bundle: DiscreteBundle) -> TotalGraph:
    """Total graph over the whole level range, cached on the bundle."""
    cached = getattr(bundle, "_total_graph", None)
    if cached is None:
        cached = build_total(bundle)
        bundle._total_graph = cached
    return cached


class Subbundle:
    """A gluing-closed cell region of the total space, with its release."""

    def __init__(self, bundle: DiscreteBundle, cells: Iterable[Cell], label: str = ""):
        self.bundle = bundle
        self.cells: FrozenSet[Cell] = frozenset(cells)
        self.label = label
        self._release: Optional[ReleaseBase] = None
        self._cover: Optional[CoveringMap] = None

    def __len__(self) -> int:
        return len(self.cells)

    def sorted_cells(self) -> List[Cell]:
        return sorted(self.cells)

    def min_cell(self) -> Cell:
        return min(self.cells)

    def level_span(self) -> Tuple[int, int]:
        levels = [self.bundle.cell_level(c) for c in self.cells]
        return min(levels), max(levels)

    @property
    def release_base(self) -> ReleaseBase:
        if self._release is None:
            self._release, self._cover = release(self.bundle, self.cells)
        return self._release

    @property
    def cover_to_base(self) -> CoveringMap:
        if self._cover is None:
            self.release_base
        return self._cover

    def is_connected(self) -> bool:
        total = full_total(self.bundle)
        return len(total.components(self.cells)) <= 1

    def contains_tail_cells(self) -> bool:
        L = self.bundle.fiber.horizon
        return any(self.bundle.cell_level(c) >= L for c in self.cells)


def full_subbundle(bundle: DiscreteBundle) -> Subbundle:
    return Subbundle(bundle, full_total(bundle).cells, label="M")


# ---------------------------------------------------------------------------
# saturated slicing


def saturated_sublevel_cells(bundle: DiscreteBundle, alpha) -> FrozenSet[Cell]:
    """Basepoint sublevel component plus the bounded complement components."""
    alpha = as_cut(alpha)
    total = full_total(bundle)
    L = bundle.fiber.horizon
    if alpha > Fraction(2 * L - 1, 2):
        raise HorizonExceeded(f"cut {alpha} lies beyond the horizon cut {L} - 1/2")
    x0 = bundle.basepoint
    if Fraction(bundle.cell_level(x0)) > alpha:
        return frozenset()
    sub = [c for c in total.cells if Fraction(total.level(c)) < alpha]
    comp0 = None
    for comp in total.components(sub):
        if x0 in comp:
            comp0 = set(comp)
            break
    if comp0 is None:
        return frozenset()
    rest = set(total.cells) - comp0
    keep = set(comp0)
    for comp in total.components(rest):
        if not any(total.level(c) >= L for c in comp):
            keep.update(comp)
    return frozenset(keep)


def saturated_slice(sub: Subbundle, alpha) -> Subbundle:
    """Slice of a region below a cut, saturated with respect to the basepoint."""
    region = saturated_sublevel_cells(sub.bundle, alpha)
    return Subbundle(sub.bundle, sub.cells & region, label=f"{sub.label}<={alpha}")


def superlevel_components(bundle: DiscreteBundle, alpha) -> List[Subbundle]:
    """Unbounded connected components above a cut (all components are)."""
    total = full_total(bundle)
    region = saturated_sublevel_cells(bundle, alpha)
    rest = set(total.cells) - region
    L = bundle.fiber.horizon
    out = []
    for comp in total.components(rest):
        if not any(total.level(c) >= L for c in comp):
            raise InvariantError("bounded component survived saturation")
        out.append(Subbundle(bundle, comp))
    return out


def saturating_threshold(sub: Subbundle, assert_monotone: bool = True) -> Fraction:
    """Least cut whose saturated slice releases one-sheetedly onto the region's release.

    Raises :class:`HorizonExceeded` if no admissible cut exists at or below
    the horizon cut.
    """
    bundle = sub.bundle
    L = bundle.fiber.horizon
    lo, _ = sub.level_span()
    rb = sub.release_base
    theta: Optional[Fraction] = None
    alpha = Fraction(2 * lo - 1, 2)
    while alpha <= Fraction(2 * L - 1, 2):
        if _slice_is_saturating(sub, rb, alpha):
            theta = alpha
            break
        alpha += 1
    if theta is None:
        raise HorizonExceeded(
            f"saturating threshold of {sub.label or sub.min_cell()} exceeds the horizon"
        )
    if assert_monotone:
        beta = theta + 1
        while beta <= Fraction(2 * L - 1, 2):
            if not _slice_is_saturating(sub, rb, beta):
                raise InvariantError(
                    f"sheet count not 1 at {beta} above the threshold {theta}"
                )
            beta += 1
    return theta


def _slice_is_saturating(sub: Subbundle, rb: ReleaseBase, alpha) -> bool:
    sliced = saturated_slice(sub, alpha)
    if not sliced.cells:
        return False
    try:
        kappa = induced_covering(sliced.release_base, rb)
    except InvariantError:
        return False
    if not kappa.is_covering():
        return False
    return all(n == 1 for n in _sheet_counts(kappa).values())


def _sheet_counts(kappa: CoveringMap) -> Dict[object, int]:
    counts: Dict[object, int] = {t: 0 for t in kappa.target.vertices}
    for s, t in kappa.vertex_map.items():
        counts[t] += 1
    return counts


# ---------------------------------------------------------------------------
# the slicing tree

NodeKey = Tuple[int, int]  # (level, index)


@dataclass
class TreeNode:
    key: NodeKey
    sub: Subbundle
    parent: Optional[NodeKey] = None
    children: List[NodeKey] = field(default_factory=list)


class SlicingTree:
    """Tree of superlevel components over an increasing sequence of cuts.

    Level 0 holds the full bundle; level ``l >= 1`` holds the unbounded
    connected components above ``alphas[l]``, ordered by inclusion.
    """

    def __init__(self, bundle: DiscreteBundle, alphas: Sequence[Fraction]):
        self.bundle = bundle
        self.alphas: List[Fraction] = [as_cut(a) for a in alphas]
        L = bundle.fiber.horizon
        for a, b in zip(self.alphas, self.alphas[1:]):
            if not a < b:
                raise PreconditionError("cut sequence must be strictly increasing")
        for a in self.alphas:
            if a > Fraction(2 * L - 1, 2):
                raise HorizonExceeded(f"cut {a} exceeds the horizon cut")

        self.nodes: Dict[NodeKey, TreeNode] = {}
        self.levels: Dict[int, List[NodeKey]] = {}
        root = TreeNode((0, 0), full_subbundle(bundle))
        self.nodes[root.key] = root
        self.levels[0] = [root.key]
        for l, alpha in enumerate(self.alphas, start=1):
            comps = superlevel_components(bundle, alpha)
            comps.sort(key=lambda s: s.min_cell())
            keys = []
            for i, comp in enumerate(comps):
                node = TreeNode((l, i), comp)
                node.sub.label = f"node{l}.{i}"
                parent = self._containing_node(l - 1, comp)
                node.parent = parent
                self.nodes[parent].children.append(node.key)
                self.nodes[node.key] = node
                keys.append(node.key)
            self.levels[l] = keys
            if not keys:
                raise InvariantError(f"no superlevel components above {alpha}")
        for l in range(len(self.alphas)):
            for key in self.levels[l]:
                if not self.nodes[key].children:
                    raise InvariantError(f"node {key} is a leaf below the horizon")

    @property
    def height(self) -> int:
        return len(self.alphas)

    def alpha(self, l: int) -> Fraction:
        """Cut defining tree level ``l`` (1-based into the sequence)."""
        if l < 1 or l > len(self.alphas):
            raise PreconditionError(f"no cut recorded for level {l}")
        return self.alphas[l - 1]

    def _containing_node(self, level: int, comp: Subbundle) -> NodeKey:
        probe = comp.min_cell()
        for key in self.levels[level]:
            if probe in self.nodes[key].sub.cells:
                return key
        raise InvariantError(f"component {probe} has no parent at level {level}")

    def node(self, key: NodeKey) -> TreeNode:
        return self.nodes[key]

    def children(self, key: NodeKey) -> List[NodeKey]:
        return list(self.nodes[key].children)

    def grandchildren(self, key: NodeKey) -> List[NodeKey]:
        return [g for c in self.nodes[key].children for g in self.nodes[c].children]

    def branches(self) -> List[Tuple[NodeKey, ...]]:
        """Maximal root-to-top chains of the truncated tree."""
        top = self.levels[self.height]
        out = []
        for key in top:
            chain = [key]
            while self.nodes[chain[-1]].parent is not None:
                chain.append(self.nodes[chain[-1]].parent)
            out.append(tuple(reversed(chain)))
        return sorted(out)

    def to_dict(self) -> dict:
        return {
            "alphas": [str(a) for a in self.alphas],
            "nodes": {
                f"{k[0]}.{k[1]}": {
                    "cells": [list(c) for c in sorted(n.sub.cells)],
                    "parent": None if n.parent is None else f"{n.parent[0]}.{n.parent[1]}",
                    "children": [f"{c[0]}.{c[1]}" for c in n.children],
                }
                for k, n in sorted(self.nodes.items())
            },
        }


def build_tree(bundle: DiscreteBundle, alphas: Sequence) -> SlicingTree:
    return SlicingTree(bundle, [as_cut(a) for a in alphas])


def slice_to_child_cut(tree: SlicingTree, key: NodeKey) -> Subbundle:
    """One-level-deep slice of a node: the node minus its children's cells."""
    level = key[0]
    node = tree.node(key)
    alpha = tree.alpha(level + 1)
    sliced = saturated_slice(node.sub, alpha)
    direct = node.sub.cells - frozenset(
        c for ck in tree.children(key) for c in tree.node(ck).sub.cells
    )
    if sliced.cells != direct:
        raise InvariantError(f"one-level slice of {key} disagrees with child removal")
    sliced.label = f"tier{level}.{key[1]}"
    return sliced


def slice_to_grandchild_cut(tree: SlicingTree, key: NodeKey) -> Subbundle:
    """Two-level-deep slice of a node: the node minus its grandchildren's cells."""
    level = key[0]
    node = tree.node(key)
    alpha = tree.alpha(level + 2)
    sliced = saturated_slice(node.sub, alpha)
    direct = node.sub.cells - frozenset(
        c for gk in tree.grandchildren(key) for c in tree.node(gk).sub.cells
    )
    if sliced.cells != direct:
        raise InvariantError(f"two-level slice of {key} disagrees with grandchild removal")
    sliced.label = f"deep{level}.{key[1]}"
    return sliced


# ---------------------------------------------------------------------------
# ends


@dataclass(frozen=True)
class End:
    """An unbounded direction, truncated at the horizon.

    Fiber ends are single tails; total-space ends are connected sets of
    (base vertex, tail) pairs linked by monodromy.
    """

    kind: str  # "fiber" or "total"
    name: str
    members: Tuple[Tuple[str, str], ...]  # (base vertex, tail name) pairs


def ends_of_fiber(bundle: DiscreteBundle) -> List[End]:
    return [
        End("fiber", t.name, tuple((b, t.name) for b in bundle.base.vertices))
        for t in bundle.fiber.tails
    ]


def _tail_image(bundle: DiscreteBundle, edge_name: str, tail_name: str, reverse: bool) -> str:
    edge = bundle.base.edge(edge_name)
    perm = bundle.gluing_from(edge, edge.v if reverse else edge.u)
    tail = bundle.fiber.tail(tail_name)
    image = frozenset(perm[v] for v in tail.vertices)
    for t in bundle.fiber.tails:
        if frozenset(t.vertices) == image:
            return t.name
    raise InvariantError(f"monodromy on {edge_name} does not permute tails")


def ends_of_total(bundle: DiscreteBundle) -> List[End]:
    """Unbounded components of the total graph above the horizon cut."""
    verts = [(b, t.name) for b in bundle.base.vertices for t in bundle.fiber.tails]
    adj: Dict[Tuple[str, str], List[Tuple[str, str]]] = {v: [] for v in verts}
    for e in bundle.base.edges:
        for t in bundle.fiber.tails:
            img = _tail_image(bundle, e.name, t.name, reverse=False)
            adj[(e.u, t.name)].append((e.v, img))
            adj[(e.v, img)].append((e.u, t.name))
    pool = set(verts)
    ends = []
    while pool:
        start = min(pool)
        comp = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w in pool and w not in comp:
                    comp.add(w)
                    stack.append(w)
        pool -= comp
        ends.append(tuple(sorted(comp)))
    ends.sort()
    return [End("total", f"end{i}", members) for i, members in enumerate(ends)]


def end_surjection(bundle: DiscreteBundle) -> Dict[str, str]:
    """Map each fiber tail to the total end over the base basepoint."""
    totals = ends_of_total(bundle)
    b0 = bundle.base.basepoint
    out: Dict[str, str] = {}
    for t in bundle.fiber.tails:
        hits = [e.name for e in totals if (b0, t.name) in e.members]
        if len(hits) != 1:
            raise InvariantError(f"tail {t.name} sits in {len(hits)} total ends")
        out[t.name] = hits[0]
    if set(out.values()) != {e.name for e in totals}:
        raise InvariantError("tail map misses a total end")
    return out


def end_volume_class(
    bundle: DiscreteBundle, omega: FiberVolume, end: End
) -> Tuple[str, Optional[Fraction]]:
    """``("infinite", None)`` or ``("finite", exact mass above the horizon cut)``."""
    if end.kind != "total":
        raise PreconditionError("volume classes are defined for total-space ends")
    total = Fraction(0)
    for b, tail in end.members:
        m = omega.tail_mass[(b, tail)]
        if m.is_infinite:
            return ("infinite", None)
        total += m.finite
    return ("finite", total)


# ---------------------------------------------------------------------------
# released integrals over regions


def released_integral(
    sub: Subbundle,
    form: FiberVolume,
    region: Optional[FrozenSet[Cell]] = None,
) -> BaseFunction:
    """Mass of (a sub-region of) each release component, as an extended function.

    With ``region=None`` the whole region of ``sub`` is integrated, tails
    included.  A sub-region must contain each tail's horizon cells entirely
    or not at all.
    """
    bundle = sub.bundle
    L = bundle.fiber.horizon
    cells = sub.cells if region is None else region
    if not cells <= sub.cells:
        raise PreconditionError("integration region is not inside the subbundle")
    values: Dict[object, ExtReal] = {}
    for b, comp in sub.release_base.vertices:
        acc = ExtReal(0)
        for v in comp:
            if (b, v) not in cells:
                continue
            if bundle.fiber.levels[v] < L:
                acc = acc + form.cell_mass[(b, v)]
        for t in bundle.fiber.tails:
            if not set(t.vertices) <= set(comp):
                continue
            inside = [v for v in t.vertices if (b, v) in cells]
            if not inside:
                continue
            if len(inside) != len(t.vertices):
                raise InvariantError(f"region cuts tail {t.name} over {b}")
            acc = acc + form.tail_mass[(b, t.name)]
        values[(b, comp)] = acc
    return BaseFunction(values, "extended")
