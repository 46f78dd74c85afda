"""Layered partition structures for 1-D chains and 2-D pixel grids.

A structure is a stack of layouts. Layout 0 holds one partition per
variable (the leaf layer); every later layout is obtained by pairing
adjacent partitions of the previous one. Intra-layer dependency edges
describe which earlier partitions feed a partition's weight network, and
together they induce a total order on the variables.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidStructureError

LAYER_KINDS = ("plain", "quotient", "neural")

# Raster-earlier neighbours of the 3x3 half kernel: top-left, left, top.
GRID_OFFSETS: tuple[tuple[int, int], ...] = ((-1, -1), (0, -1), (-1, 0))


def chain_offsets(nu: int) -> tuple[tuple[int, int], ...]:
    """Half-kernel offsets p-nu .. p-1 for a 1-D layer laid out as a (1, P) grid."""
    return tuple((0, -k) for k in range(nu, 0, -1))


@dataclass(frozen=True)
class PartitionLayout:
    layer_index: int
    scopes: tuple[tuple[int, ...], ...]
    grid_shape: tuple[int, int]
    # Partitions of the previous layout merged into each partition; a
    # single entry marks a pass-through. Empty for the leaf layout.
    children: tuple[tuple[int, ...], ...] = ()
    # Kernel tap offsets (row, col) used by this layer's sum units.
    offsets: tuple[tuple[int, int], ...] = ()
    dependency_edges: tuple[tuple[int, ...], ...] = ()

    @property
    def num_partitions(self) -> int:
        return len(self.scopes)

    def child_index(self) -> np.ndarray:
        """Children as an int array [P, 2], -1 marking a missing right child."""
        out = np.full((self.num_partitions, 2), -1, dtype=np.intp)
        for p, ch in enumerate(self.children):
            out[p, : len(ch)] = ch
        return out


@dataclass(frozen=True)
class VariableOrder:
    rank: np.ndarray  # variable id -> rank
    variables: np.ndarray  # rank -> variable id

    def __eq__(self, other):
        return isinstance(other, VariableOrder) and np.array_equal(self.rank, other.rank)

    __hash__ = None

    def suffix(self, k: int) -> set[int]:
        """The ``k`` highest-ranked variables."""
        if k <= 0:
            return set()
        return {int(v) for v in self.variables[-k:]}


@dataclass(frozen=True)
class QueryCheck:
    ok: bool
    evidence_var: int | None = None
    marginalized_var: int | None = None

    def __bool__(self):
        return self.ok

    @property
    def message(self) -> str:
        if self.ok:
            return "ok"
        return (
            f"marginalized variable {self.marginalized_var} precedes evidence "
            f"variable {self.evidence_var} in the induced order"
        )


@dataclass(frozen=True)
class CircuitStructure:
    num_variables: int
    layouts: tuple[PartitionLayout, ...]
    num_components: int
    num_leaf_components: int
    layer_kind: str
    nu: tuple[int, ...]  # per internal layer
    grid_shape: tuple[int, int]  # (1, N) for chains
    merge_axes: tuple[str, ...] = ()
    variable_order: VariableOrder = field(default=None, compare=False)

    @property
    def is_grid(self) -> bool:
        return bool(self.merge_axes)

    @property
    def num_layers(self) -> int:
        return len(self.layouts)

    @property
    def internal_layers(self) -> range:
        """Indices of layouts that carry a (plain/quotient/neural) sum layer."""
        return range(1, len(self.layouts) - 1)

    def fingerprint(self) -> str:
        payload = {
            "n": self.num_variables,
            "C": self.num_components,
            "D": self.num_leaf_components,
            "kind": self.layer_kind,
            "nu": list(self.nu),
            "grid": list(self.grid_shape),
            "axes": list(self.merge_axes),
            "layouts": [
                [lay.grid_shape, lay.scopes, lay.children, lay.offsets, lay.dependency_edges]
                for lay in self.layouts
            ],
        }
        blob = json.dumps(payload, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _check_sizes(num_components: int, num_leaf_components: int, layer_kind: str):
    if num_components < 1:
        raise InvalidStructureError(f"num_components must be >= 1, got {num_components}")
    if num_leaf_components < 1:
        raise InvalidStructureError(
            f"num_leaf_components must be >= 1, got {num_leaf_components}"
        )
    if layer_kind not in LAYER_KINDS:
        raise InvalidStructureError(f"unknown layer kind {layer_kind!r}")


def _edges(grid_shape, offsets) -> tuple[tuple[int, ...], ...]:
    rows, cols = grid_shape
    edges = []
    for r in range(rows):
        for c in range(cols):
            src = []
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    src.append(rr * cols + cc)
            edges.append(tuple(src))
    return tuple(edges)


def _finish(layouts, num_variables, num_components, num_leaf_components, layer_kind, nu,
            grid_shape, merge_axes) -> CircuitStructure:
    s = CircuitStructure(
        num_variables=num_variables,
        layouts=tuple(layouts),
        num_components=num_components,
        num_leaf_components=num_leaf_components,
        layer_kind=layer_kind,
        nu=tuple(nu),
        grid_shape=grid_shape,
        merge_axes=tuple(merge_axes),
    )
    check_layouts(s)
    object.__setattr__(s, "variable_order", induced_order(s))
    return s


def build_1d_structure(num_vars: int, num_components: int, num_leaf_components: int,
                       nu: int | Sequence[int] = 1, layer_kind: str = "neural") -> CircuitStructure:
    """Balanced partition tree over a chain of ``num_vars`` variables.

    ``nu`` is either a global window or one value per internal layer. Pairs
    are formed left to right and an odd trailing partition passes through.
    """
    if num_vars < 1:
        raise InvalidStructureError(f"need at least one variable, got {num_vars}")
    _check_sizes(num_components, num_leaf_components, layer_kind)

    scopes = [(v,) for v in range(num_vars)]
    layouts = [PartitionLayout(0, tuple(scopes), (1, num_vars))]
    while len(scopes) > 1:
        children, merged = [], []
        for i in range(0, len(scopes), 2):
            pair = tuple(range(i, min(i + 2, len(scopes))))
            children.append(pair)
            merged.append(tuple(v for j in pair for v in scopes[j]))
        scopes = merged
        layouts.append(PartitionLayout(len(layouts), tuple(scopes), (1, len(scopes)),
                                       children=tuple(children)))

    n_internal = max(len(layouts) - 2, 0)
    if isinstance(nu, (int, np.integer)):
        nus = [int(nu)] * n_internal
    else:
        nus = [int(v) for v in nu]
        if len(nus) != n_internal:
            raise InvalidStructureError(
                f"expected {n_internal} per-layer nu values, got {len(nus)}")
    if any(v < 0 for v in nus):
        raise InvalidStructureError(f"nu must be >= 0, got {nus}")

    for i, v in zip(range(1, len(layouts) - 1), nus):
        lay = layouts[i]
        offsets = chain_offsets(v)
        edges = _edges(lay.grid_shape, offsets) if layer_kind != "plain" else \
            tuple(() for _ in lay.scopes)
        layouts[i] = PartitionLayout(i, lay.scopes, lay.grid_shape, lay.children,
                                     offsets, edges)
    return _finish(layouts, num_vars, num_components, num_leaf_components, layer_kind, nus,
                   (1, num_vars), ())


def _merge(grid: list[list[tuple[int, ...]]], axis: str):
    rows, cols = len(grid), len(grid[0])
    if axis == "col":
        new_cols = (cols + 1) // 2
        out, children = [], []
        for r in range(rows):
            row = []
            for j in range(new_cols):
                src = [2 * j] + ([2 * j + 1] if 2 * j + 1 < cols else [])
                row.append(tuple(v for c in src for v in grid[r][c]))
                children.append(tuple(r * cols + c for c in src))
            out.append(row)
        return out, children
    new_rows = (rows + 1) // 2
    out, children = [], []
    for i in range(new_rows):
        src = [2 * i] + ([2 * i + 1] if 2 * i + 1 < rows else [])
        row = []
        for c in range(cols):
            row.append(tuple(v for r in src for v in grid[r][c]))
            children.append(tuple(r * cols + c for r in src))
        out.append(row)
    return out, children


def build_2d_structure(height: int, width: int, num_components: int, num_leaf_components: int,
                       layer_kind: str = "neural", nu: int = 1) -> CircuitStructure:
    """Grid structure merging columns and rows alternately, columns first.

    Variables are pixel ids in row-major order. When the scheduled axis has a
    single row/column left, the other axis is merged instead. ``nu`` is 0 (no
    dependencies) or 1 (the 3x3 half kernel).
    """
    if height < 1 or width < 1:
        raise InvalidStructureError(f"grid must be at least 1x1, got {height}x{width}")
    if nu not in (0, 1):
        raise InvalidStructureError(f"grid structures support nu in {{0, 1}}, got {nu}")
    _check_sizes(num_components, num_leaf_components, layer_kind)

    grid = [[(r * width + c,) for c in range(width)] for r in range(height)]
    layouts = [PartitionLayout(0, tuple(s for row in grid for s in row), (height, width))]
    axes = []
    axis = "col"
    while len(grid) * len(grid[0]) > 1:
        rows, cols = len(grid), len(grid[0])
        if (axis == "col" and cols == 1) or (axis == "row" and rows == 1):
            axis = "row" if axis == "col" else "col"
        grid, children = _merge(grid, axis)
        axes.append(axis)
        layouts.append(PartitionLayout(len(layouts), tuple(s for row in grid for s in row),
                                       (len(grid), len(grid[0])), tuple(children)))
        axis = "row" if axis == "col" else "col"

    offsets = GRID_OFFSETS if (nu and layer_kind != "plain") else ()
    for i in range(1, len(layouts) - 1):
        lay = layouts[i]
        edges = _edges(lay.grid_shape, offsets)
        layouts[i] = PartitionLayout(i, lay.scopes, lay.grid_shape, lay.children,
                                     GRID_OFFSETS if nu else (), edges)
    n_internal = max(len(layouts) - 2, 0)
    return _finish(layouts, height * width, num_components, num_leaf_components, layer_kind,
                   [nu] * n_internal, (height, width), axes)


def check_layouts(structure: CircuitStructure) -> None:
    """Scopes disjoint and covering per layer, edges pointing raster-backwards."""
    n = structure.num_variables
    if not structure.layouts:
        raise InvalidStructureError("structure has no layers")
    for lay in structure.layouts:
        seen = sorted(v for s in lay.scopes for v in s)
        if seen != list(range(n)):
            raise InvalidStructureError(
                f"layer {lay.layer_index}: scopes are not a partition of the variables")
        rows, cols = lay.grid_shape
        if rows * cols != lay.num_partitions:
            raise InvalidStructureError(f"layer {lay.layer_index}: grid shape mismatch")
        for p, src in enumerate(lay.dependency_edges):
            if any(q >= p for q in src):
                raise InvalidStructureError(
                    f"layer {lay.layer_index}: partition {p} depends on a later partition")
    if structure.layouts[-1].num_partitions != 1:
        raise InvalidStructureError("final layer must have a single partition")


def induced_order(structure: CircuitStructure) -> VariableOrder:
    """Total variable order refining every dependency edge.

    Kahn's algorithm over variables plus one barrier node per edge; ties go
    to the lowest variable id, so an edge-free structure gets raster order.
    """
    n = structure.num_variables
    succ: list[list[int]] = [[] for _ in range(n)]
    indeg: list[int] = [0] * n

    def new_node():
        succ.append([])
        indeg.append(0)
        return len(succ) - 1

    for lay in structure.layouts:
        for p, src in enumerate(lay.dependency_edges):
            for q in src:
                barrier = new_node()
                for u in lay.scopes[q]:
                    succ[u].append(barrier)
                    indeg[barrier] += 1
                for v in lay.scopes[p]:
                    succ[barrier].append(v)
                    indeg[v] += 1

    # Barrier nodes (ids >= n) drain before any variable.
    heap = [(0 if u >= n else 1, u) for u in range(len(succ)) if indeg[u] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, u = heapq.heappop(heap)
        if u < n:
            order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (0 if v >= n else 1, v))
    if len(order) != n:
        raise InvalidStructureError("dependency edges contain a cycle")
    variables = np.asarray(order, dtype=np.intp)
    rank = np.empty(n, dtype=np.intp)
    rank[variables] = np.arange(n)
    return VariableOrder(rank=rank, variables=variables)


def validate_query(structure: CircuitStructure, marginalized: Iterable[int]) -> QueryCheck:
    """Check that ``marginalized`` is a suffix of the induced order."""
    marg = set(int(v) for v in marginalized)
    n = structure.num_variables
    bad = [v for v in marg if not 0 <= v < n]
    if bad:
        raise ValueError(f"variable ids out of range: {sorted(bad)}")
    if not marg or len(marg) == n:
        return QueryCheck(True)
    rank = structure.variable_order.rank
    evidence = [v for v in range(n) if v not in marg]
    e_max = max(evidence, key=lambda v: rank[v])
    m_min = min(marg, key=lambda v: rank[v])
    if rank[m_min] > rank[e_max]:
        return QueryCheck(True)
    return QueryCheck(False, evidence_var=int(e_max), marginalized_var=int(m_min))
