"""Discrete model of an exhausted fiber bundle with noncompact fiber.

The fiber is a level-graded graph, truncated at a horizon: every vertex
carries a nonnegative integer level, edges change level by at most one, and
each connected component of the top level is declared to continue upward as
a single non-splitting tube (a *tail*).  The base is a finite graph with a
distinguished spanning tree; each non-tree edge carries a level-preserving
fiber automorphism (the monodromy).  The induced total space is the graph of
cells ``(base vertex, fiber vertex)`` glued along monodromy.

Volume data is a strictly positive exact rational mass per cell below the
horizon plus an extended-rational mass per (base vertex, tail).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import BundleStructureError, PreconditionError
from .extreal import INF, ExtReal

Cell = Tuple[str, str]  # (base vertex, fiber vertex)

HALF = Fraction(1, 2)


def as_cut(value) -> Fraction:
    """Normalize a cut position to an exact half-integer Fraction."""
    cut = Fraction(value).limit_denominator(2) if isinstance(value, float) else Fraction(value)
    if cut.denominator != 2:
        raise PreconditionError(f"cut {value!r} is not a half-integer")
    return cut


# ---------------------------------------------------------------------------
# fiber graph


@dataclass(frozen=True)
class Tail:
    """One unbounded direction: a connected component of the horizon level."""

    name: str
    vertices: FrozenSet[str]


class FiberGraph:
    """Level-graded fiber graph, truncated at ``horizon``.

    Vertices live at levels ``0..horizon``; the induced subgraph at level
    ``horizon`` must decompose exactly into the declared tails.  Cells below
    the horizon carry masses; each tail carries one mass per base vertex.
    """

    def __init__(
        self,
        levels: Mapping[str, int],
        edges: Iterable[Tuple[str, str]],
        horizon: int,
        tails: Sequence[Tail],
        basepoint: str,
    ):
        self.levels: Dict[str, int] = {str(v): int(l) for v, l in levels.items()}
        self.horizon = int(horizon)
        self.tails: Tuple[Tail, ...] = tuple(
            sorted(tails, key=lambda t: t.name)
        )
        self.basepoint = str(basepoint)

        if self.horizon < 1:
            raise BundleStructureError("horizon must be a positive integer")
        for v, l in self.levels.items():
            if l < 0 or l > self.horizon:
                raise BundleStructureError(f"vertex {v} level {l} outside [0, horizon]")
        if self.basepoint not in self.levels:
            raise BundleStructureError(f"basepoint {self.basepoint} is not a vertex")

        self.edges: Tuple[Tuple[str, str], ...] = tuple(
            sorted({tuple(sorted((str(u), str(w)))) for u, w in edges})
        )
        adj: Dict[str, List[str]] = {v: [] for v in self.levels}
        for u, w in self.edges:
            if u not in self.levels or w not in self.levels:
                raise BundleStructureError(f"fiber edge ({u}, {w}) has a dangling endpoint")
            if u == w:
                raise BundleStructureError(f"fiber self-loop at {u}")
            adj[u].append(w)
            adj[w].append(u)
        self.adjacency: Dict[str, Tuple[str, ...]] = {
            v: tuple(sorted(ns)) for v, ns in adj.items()
        }

        seen = set()
        for tail in self.tails:
            if not tail.vertices:
                raise BundleStructureError(f"tail {tail.name} is empty")
            for v in tail.vertices:
                if v not in self.levels:
                    raise BundleStructureError(f"tail {tail.name} names unknown vertex {v}")
                if v in seen:
                    raise BundleStructureError(f"vertex {v} belongs to two tails")
                seen.add(v)
        self._tail_of: Dict[str, str] = {
            v: t.name for t in self.tails for v in t.vertices
        }

    def vertices(self) -> Tuple[str, ...]:
        return tuple(sorted(self.levels))

    def level(self, v: str) -> int:
        return self.levels[v]

    def tail_of(self, v: str) -> Optional[str]:
        return self._tail_of.get(v)

    def tail(self, name: str) -> Tail:
        for t in self.tails:
            if t.name == name:
                return t
        raise KeyError(name)

    def min_level(self) -> int:
        return min(self.levels.values())

    def components(self, vertices: Optional[Iterable[str]] = None) -> List[Tuple[str, ...]]:
        """Connected components of the induced subgraph, sorted canonically."""
        pool = set(self.levels) if vertices is None else set(vertices)
        comps = []
        while pool:
            start = min(pool)
            comp = {start}
            stack = [start]
            while stack:
                v = stack.pop()
                for w in self.adjacency[v]:
                    if w in pool and w not in comp:
                        comp.add(w)
                        stack.append(w)
            pool -= comp
            comps.append(tuple(sorted(comp)))
        return sorted(comps)

    def horizon_components(self) -> List[Tuple[str, ...]]:
        top = [v for v, l in self.levels.items() if l >= self.horizon]
        return self.components(top)

    def is_connected(self) -> bool:
        return len(self.components()) <= 1


# ---------------------------------------------------------------------------
# base graph and monodromy


@dataclass(frozen=True)
class BaseEdge:
    name: str
    u: str
    v: str

    def other(self, vertex: str) -> str:
        return self.v if vertex == self.u else self.u


class BaseGraph:
    """Finite connected base with a distinguished spanning tree and basepoint.

    Parallel edges are allowed (they are distinguished by name); self-loops
    are not, so a circle base is modeled by a cycle of length >= 2.
    """

    def __init__(
        self,
        vertices: Iterable[str],
        edges: Iterable[Tuple[str, str, str]],
        tree_edges: Iterable[str],
        basepoint: str,
    ):
        self.vertices: Tuple[str, ...] = tuple(sorted({str(v) for v in vertices}))
        self.basepoint = str(basepoint)
        if self.basepoint not in self.vertices:
            raise BundleStructureError(f"base vertex {self.basepoint} unknown")
        named = {}
        for name, u, v in edges:
            name, u, v = str(name), str(u), str(v)
            if u not in self.vertices or v not in self.vertices:
                raise BundleStructureError(f"base edge {name} has a dangling endpoint")
            if u == v:
                raise BundleStructureError(f"base self-loop {name} not supported")
            if name in named:
                raise BundleStructureError(f"duplicate base edge name {name}")
            a, b = sorted((u, v))
            named[name] = BaseEdge(name, a, b)
        self.edges: Tuple[BaseEdge, ...] = tuple(sorted(named.values(), key=lambda e: e.name))
        self.tree_edges: FrozenSet[str] = frozenset(str(n) for n in tree_edges)
        for n in self.tree_edges:
            if n not in named:
                raise BundleStructureError(f"spanning-tree edge {n} unknown")
        self._adjacency: Dict[str, List[BaseEdge]] = {v: [] for v in self.vertices}
        for e in self.edges:
            self._adjacency[e.u].append(e)
            self._adjacency[e.v].append(e)

    def edge(self, name: str) -> BaseEdge:
        for e in self.edges:
            if e.name == name:
                return e
        raise KeyError(name)

    def edges_at(self, vertex: str) -> List[BaseEdge]:
        return list(self._adjacency[vertex])

    def is_connected(self) -> bool:
        if not self.vertices:
            return False
        seen = {self.vertices[0]}
        stack = [self.vertices[0]]
        while stack:
            v = stack.pop()
            for e in self._adjacency[v]:
                w = e.other(v)
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == len(self.vertices)

    def tree_spans(self) -> bool:
        if len(self.tree_edges) != len(self.vertices) - 1:
            return False
        seen = {self.vertices[0]}
        stack = [self.vertices[0]]
        while stack:
            v = stack.pop()
            for e in self._adjacency[v]:
                if e.name in self.tree_edges:
                    w = e.other(v)
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
        return len(seen) == len(self.vertices)


class Monodromy:
    """Per-edge fiber automorphisms; unspecified vertices map identically.

    The orientation of each automorphism is fixed once per edge: ``perm(e)``
    is applied when crossing from the lexicographically smaller endpoint to
    the larger one.
    """

    def __init__(self, maps: Optional[Mapping[str, Mapping[str, str]]] = None):
        self._maps: Dict[str, Dict[str, str]] = {
            str(e): {str(a): str(b) for a, b in m.items()} for e, m in (maps or {}).items()
        }

    def raw(self) -> Dict[str, Dict[str, str]]:
        return {e: dict(m) for e, m in self._maps.items()}

    def perm(self, edge_name: str, fiber: FiberGraph) -> Dict[str, str]:
        partial = self._maps.get(edge_name, {})
        out = {v: partial.get(v, v) for v in fiber.levels}
        return out

    def is_trivial(self) -> bool:
        return all(all(a == b for a, b in m.items()) for m in self._maps.values())


# ---------------------------------------------------------------------------
# the bundle and its total space


class DiscreteBundle:
    """Base graph + fiber graph + monodromy, with basepoint ``(b0, v0)``."""

    def __init__(self, base: BaseGraph, fiber: FiberGraph, monodromy: Monodromy):
        self.base = base
        self.fiber = fiber
        self.monodromy = monodromy
        self._gluing: Dict[str, Dict[str, str]] = {}
        for e in base.edges:
            perm = monodromy.perm(e.name, fiber)
            for v, w in perm.items():
                if v not in fiber.levels or w not in fiber.levels:
                    raise BundleStructureError(
                        f"monodromy on {e.name} references unknown vertex {v}->{w}"
                    )
            values = sorted(perm.values())
            if values != sorted(fiber.levels):
                raise BundleStructureError(f"monodromy on {e.name} is not a bijection")
            self._gluing[e.name] = perm
        self.fiber_connected = fiber.is_connected()

    @property
    def basepoint(self) -> Cell:
        return (self.base.basepoint, self.fiber.basepoint)

    def gluing(self, edge_name: str) -> Dict[str, str]:
        """Vertex bijection applied crossing the edge from its small endpoint."""
        return self._gluing[edge_name]

    def gluing_from(self, edge: BaseEdge, source_vertex: str) -> Dict[str, str]:
        perm = self._gluing[edge.name]
        if source_vertex == edge.u:
            return perm
        return {w: v for v, w in perm.items()}

    def all_cells(self) -> List[Cell]:
        return [(b, v) for b in self.base.vertices for v in self.fiber.vertices()]

    def cell_level(self, cell: Cell) -> int:
        return self.fiber.levels[cell[1]]


@dataclass(frozen=True)
class TotalEdge:
    a: Cell
    b: Cell
    kind: str  # "fiber" or "gluing"
    label: str  # fiber edge "u|w" or base edge name


class TotalGraph:
    """Cells and edges of the total space over a level window."""

    def __init__(self, bundle: DiscreteBundle, cells: Iterable[Cell]):
        self.bundle = bundle
        self.cells: Tuple[Cell, ...] = tuple(sorted(cells))
        cellset = set(self.cells)
        edges: List[TotalEdge] = []
        for b in bundle.base.vertices:
            for u, w in bundle.fiber.edges:
                a, c = (b, u), (b, w)
                if a in cellset and c in cellset:
                    edges.append(TotalEdge(a, c, "fiber", f"{u}|{w}"))
        for e in bundle.base.edges:
            perm = bundle.gluing(e.name)
            for v, w in perm.items():
                a, c = (e.u, v), (e.v, w)
                if a in cellset and c in cellset:
                    edges.append(TotalEdge(a, c, "gluing", e.name))
        self.edges: Tuple[TotalEdge, ...] = tuple(edges)
        adj: Dict[Cell, List[Cell]] = {c: [] for c in self.cells}
        for ed in self.edges:
            adj[ed.a].append(ed.b)
            adj[ed.b].append(ed.a)
        self.adjacency: Dict[Cell, Tuple[Cell, ...]] = {
            c: tuple(sorted(set(ns))) for c, ns in adj.items()
        }

    def level(self, cell: Cell) -> int:
        return self.bundle.cell_level(cell)

    def components(self, cells: Optional[Iterable[Cell]] = None) -> List[Tuple[Cell, ...]]:
        pool = set(self.cells) if cells is None else set(cells)
        comps = []
        while pool:
            start = min(pool)
            comp = {start}
            stack = [start]
            while stack:
                c = stack.pop()
                for d in self.adjacency.get(c, ()):
                    if d in pool and d not in comp:
                        comp.add(d)
                        stack.append(d)
            pool -= comp
            comps.append(tuple(sorted(comp)))
        return sorted(comps)

    def is_connected(self) -> bool:
        return len(self.components()) <= 1


def build_total(bundle: DiscreteBundle, lo=None, hi=None) -> TotalGraph:
    """Total graph over the half-integer level window ``(lo, hi)``.

    ``None`` endpoints default to the full range including horizon cells.
    An empty window yields an empty graph.
    """
    L = bundle.fiber.horizon
    lo = Fraction(-1, 2) if lo is None else as_cut(lo)
    hi = Fraction(2 * L + 1, 2) if hi is None else as_cut(hi)
    lo_bound, hi_bound = Fraction(-1, 2), Fraction(2 * L + 1, 2)
    if not (lo_bound <= lo <= hi_bound and lo_bound <= hi <= hi_bound):
        raise PreconditionError(f"level window ({lo}, {hi}) out of range")
    cells = [
        (b, v)
        for b in bundle.base.vertices
        for v, l in bundle.fiber.levels.items()
        if lo < l < hi
    ]
    return TotalGraph(bundle, cells)


# ---------------------------------------------------------------------------
# volume data


class FiberVolume:
    """Positive mass per cell below the horizon + one mass per (b, tail)."""

    def __init__(
        self,
        bundle: DiscreteBundle,
        cell_mass: Mapping[Cell, Fraction],
        tail_mass: Mapping[Tuple[str, str], ExtReal],
    ):
        self.bundle = bundle
        self.cell_mass: Dict[Cell, Fraction] = {
            (str(b), str(v)): Fraction(m) for (b, v), m in cell_mass.items()
        }
        self.tail_mass: Dict[Tuple[str, str], ExtReal] = {
            (str(b), str(t)): ExtReal(m) for (b, t), m in tail_mass.items()
        }
        L = bundle.fiber.horizon
        expected = {
            (b, v)
            for b in bundle.base.vertices
            for v, l in bundle.fiber.levels.items()
            if l < L
        }
        if set(self.cell_mass) != expected:
            missing = sorted(expected - set(self.cell_mass))[:3]
            extra = sorted(set(self.cell_mass) - expected)[:3]
            raise BundleStructureError(
                f"cell masses do not cover the sub-horizon cells "
                f"(missing {missing}, extra {extra})"
            )
        for cell, m in self.cell_mass.items():
            if m <= 0:
                raise BundleStructureError(f"nonpositive mass at {cell}")
        expected_tails = {
            (b, t.name) for b in bundle.base.vertices for t in bundle.fiber.tails
        }
        if set(self.tail_mass) != expected_tails:
            raise BundleStructureError("tail masses do not cover (base vertex, tail) pairs")
        for key, m in self.tail_mass.items():
            if not m.is_infinite and m.finite <= 0:
                raise BundleStructureError(f"nonpositive tail mass at {key}")

    def mass(self, cell: Cell) -> Fraction:
        return self.cell_mass[cell]

    def copy_with(self, updates: Mapping[Cell, Fraction]) -> "FiberVolume":
        new = dict(self.cell_mass)
        new.update(updates)
        return FiberVolume(self.bundle, new, self.tail_mass)

    def support_of_difference(self, other: "FiberVolume") -> List[Cell]:
        return sorted(
            c for c in self.cell_mass if self.cell_mass[c] != other.cell_mass[c]
        )


# ---------------------------------------------------------------------------
# operations


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: List[Check] = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, passed, detail))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[Check]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail}
                for c in self.checks
            ],
        }


def validate_bundle(bundle: DiscreteBundle) -> ValidationReport:
    """Check every structural invariant of the bundle; never raises."""
    report = ValidationReport()
    base, fiber = bundle.base, bundle.fiber

    report.add("base_connected", base.is_connected())
    report.add(
        "spanning_tree", base.tree_spans(), f"tree edges: {sorted(base.tree_edges)}"
    )

    min_level = fiber.min_level()
    report.add(
        "basepoint_minimal",
        fiber.levels[fiber.basepoint] == min_level,
        f"v0 level {fiber.levels[fiber.basepoint]}, min level {min_level}",
    )

    horizon_comps = fiber.horizon_components()
    declared = sorted(tuple(sorted(t.vertices)) for t in fiber.tails)
    report.add(
        "tails_are_horizon_components",
        declared == horizon_comps,
        f"declared {declared}, found {horizon_comps}",
    )
    report.add("noncompact", len(fiber.tails) > 0)

    for u, w in fiber.edges:
        if abs(fiber.levels[u] - fiber.levels[w]) > 1:
            report.add("edge_level_step", False, f"fiber edge ({u},{w}) jumps levels")
            break
    else:
        report.add("edge_level_step", True)

    ok_tree = all(
        all(v == w for v, w in bundle.gluing(name).items())
        for name in base.tree_edges
    )
    report.add("tree_edges_identity", ok_tree)

    fiber_edge_set = set(fiber.edges)
    for e in base.edges:
        perm = bundle.gluing(e.name)
        bad_level = [v for v, w in perm.items() if fiber.levels[v] != fiber.levels[w]]
        if bad_level:
            report.add(
                "monodromy_levels",
                False,
                f"edge {e.name} moves {bad_level[0]} across levels",
            )
            continue
        bad_adj = [
            (u, w)
            for u, w in fiber.edges
            if tuple(sorted((perm[u], perm[w]))) not in fiber_edge_set
        ]
        img_edges = {tuple(sorted((perm[u], perm[w]))) for u, w in fiber.edges}
        if bad_adj or img_edges != fiber_edge_set:
            report.add(
                "monodromy_adjacency", False, f"edge {e.name} is not a graph automorphism"
            )
            continue
        tail_sets = {frozenset(t.vertices) for t in fiber.tails}
        bad_tail = [
            t.name
            for t in fiber.tails
            if frozenset(perm[v] for v in t.vertices) not in tail_sets
        ]
        if bad_tail:
            report.add(
                "monodromy_tails", False, f"edge {e.name} breaks tail {bad_tail[0]}"
            )
            continue
        report.add(f"monodromy_{e.name}", True)

    report.add("fiber_connected", True, f"connected={bundle.fiber_connected}")
    return report


def fiber_integral(bundle: DiscreteBundle, omega: FiberVolume) -> Dict[str, ExtReal]:
    """Total mass of each fiber: cell masses plus tail masses, per base vertex."""
    totals: Dict[str, ExtReal] = {}
    for b in bundle.base.vertices:
        total = ExtReal(0)
        for v, l in bundle.fiber.levels.items():
            if l < bundle.fiber.horizon:
                total = total + omega.cell_mass[(b, v)]
        for t in bundle.fiber.tails:
            total = total + omega.tail_mass[(b, t.name)]
        totals[b] = total
    return totals


def equal_fiber_integral(
    bundle: DiscreteBundle, omega: FiberVolume, tau: FiberVolume
) -> bool:
    return fiber_integral(bundle, omega) == fiber_integral(bundle, tau)
