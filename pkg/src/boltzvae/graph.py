"""Latent-space connectivities: Bernoulli, Chimera, Pegasus, and complete graphs.

Each graph carries a proper node coloring whose classes are the blocks used
by block-Gibbs sampling, plus an activity mask so that individual nodes can
be disabled without renumbering (mirroring processors with dead qubits).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

BERNOULLI = "bernoulli"
CHIMERA = "chimera"
PEGASUS = "pegasus"
COMPLETE = "complete"

BIPARTITE = "bipartite"
CHAINS = "chains"

_SERIAL_VERSION = 1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Connectivity:
    """A latent-space graph: nodes, couplers, coloring, and activity mask.

    Edges are stored as an (E, 2) int array with edge[0] < edge[1], sorted
    lexicographically; construction is deterministic so serialized graphs
    are byte-identical across runs.
    """

    kind: str
    num_nodes: int
    edges: np.ndarray
    coloring: np.ndarray
    active_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "coloring", np.asarray(self.coloring, dtype=np.int64))
        object.__setattr__(self, "active_mask", np.asarray(self.active_mask, dtype=bool))
        self._validate()

    def _validate(self):
        n, edges = self.num_nodes, self.edges
        if n < 1:
            raise GraphError(f"graph needs at least one node, got {n}")
        if self.coloring.shape != (n,) or self.active_mask.shape != (n,):
            raise GraphError("coloring/active_mask length must equal num_nodes")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise GraphError("edge references an out-of-range node")
            if not (edges[:, 0] < edges[:, 1]).all():
                raise GraphError("edges must be stored with l < m")
            if len(np.unique(edges[:, 0] * n + edges[:, 1])) != len(edges):
                raise GraphError("duplicate edges")
            same = self.coloring[edges[:, 0]] == self.coloring[edges[:, 1]]
            if same.any():
                raise GraphError("coloring is not proper")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_colors(self) -> int:
        return int(self.coloring.max()) + 1

    @property
    def active_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.active_mask)

    def color_classes(self) -> list[np.ndarray]:
        """Active node indices of each color, in ascending color order."""
        return [
            np.flatnonzero((self.coloring == c) & self.active_mask)
            for c in range(self.num_colors)
        ]

    def neighbor_lists(self) -> list[list[tuple[int, int]]]:
        """Per node: list of (neighbor, edge_index) over stored edges."""
        nbrs: list[list[tuple[int, int]]] = [[] for _ in range(self.num_nodes)]
        for e, (l, m) in enumerate(self.edges):
            nbrs[l].append((int(m), e))
            nbrs[m].append((int(l), e))
        return nbrs

    def to_json(self) -> str:
        doc = {
            "version": _SERIAL_VERSION,
            "kind": self.kind,
            "num_nodes": self.num_nodes,
            "edges": self.edges.tolist(),
            "coloring": self.coloring.tolist(),
            "active_mask": self.active_mask.astype(int).tolist(),
            "meta": self.meta,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "Connectivity":
        doc = json.loads(text)
        if doc.get("version") != _SERIAL_VERSION:
            raise GraphError(f"unsupported graph serialization version {doc.get('version')}")
        return Connectivity(
            kind=doc["kind"],
            num_nodes=doc["num_nodes"],
            edges=np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2),
            coloring=np.asarray(doc["coloring"], dtype=np.int64),
            active_mask=np.asarray(doc["active_mask"], dtype=bool),
            meta=doc.get("meta", {}),
        )


@dataclass(frozen=True)
class HierarchyMapping:
    """Two-group split of the latent units for the conditional encoder."""

    scheme: str
    group1: np.ndarray
    group2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "group1", np.asarray(self.group1, dtype=np.int64))
        object.__setattr__(self, "group2", np.asarray(self.group2, dtype=np.int64))
        if np.intersect1d(self.group1, self.group2).size:
            raise GraphError("hierarchy groups must be disjoint")


def _finish_edges(edges: list[tuple[int, int]]) -> np.ndarray:
    arr = np.asarray(sorted((min(e), max(e)) for e in edges), dtype=np.int64)
    return arr.reshape(-1, 2)


def build_bernoulli(n: int) -> Connectivity:
    """Edge-free graph of n independent units (single color class)."""
    if n < 1:
        raise GraphError("need n >= 1")
    return Connectivity(
        kind=BERNOULLI,
        num_nodes=n,
        edges=np.empty((0, 2), dtype=np.int64),
        coloring=np.zeros(n, dtype=np.int64),
        active_mask=np.ones(n, dtype=bool),
    )


def build_complete(n: int) -> Connectivity:
    """Complete graph K_n; every node is its own color (sequential Gibbs)."""
    if n < 1:
        raise GraphError("need n >= 1")
    edges = [(l, m) for l in range(n) for m in range(l + 1, n)]
    return Connectivity(
        kind=COMPLETE,
        num_nodes=n,
        edges=_finish_edges(edges) if edges else np.empty((0, 2), dtype=np.int64),
        coloring=np.arange(n, dtype=np.int64),
        active_mask=np.ones(n, dtype=bool),
    )


def _chimera_index(r: int, c: int, u: int, k: int, cols: int, shore: int) -> int:
    # row-major over cells, vertical shore (u=0) before horizontal (u=1)
    return ((r * cols + c) * 2 + u) * shore + k


def build_chimera(rows: int, cols: int, shore: int = 4) -> Connectivity:
    """Grid of K_{shore,shore} cells with same-position inter-cell couplers.

    Within a cell, every vertical unit (u=0) couples to every horizontal
    unit (u=1).  Vertical units couple to the same position in the cell
    below; horizontal units to the cell on the right.  The proper
    2-coloring is (u + cell parity) mod 2, which restricted to a single
    cell is the shore coloring.
    """
    if rows < 1 or cols < 1 or shore < 1:
        raise GraphError("chimera dimensions must be >= 1")
    n = 2 * shore * rows * cols
    edges = []
    coloring = np.zeros(n, dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            for u in (0, 1):
                for k in range(shore):
                    coloring[_chimera_index(r, c, u, k, cols, shore)] = (u + r + c) % 2
            for i in range(shore):
                a = _chimera_index(r, c, 0, i, cols, shore)
                for j in range(shore):
                    edges.append((a, _chimera_index(r, c, 1, j, cols, shore)))
            if r + 1 < rows:
                for k in range(shore):
                    edges.append((
                        _chimera_index(r, c, 0, k, cols, shore),
                        _chimera_index(r + 1, c, 0, k, cols, shore),
                    ))
            if c + 1 < cols:
                for k in range(shore):
                    edges.append((
                        _chimera_index(r, c, 1, k, cols, shore),
                        _chimera_index(r, c + 1, 1, k, cols, shore),
                    ))
    return Connectivity(
        kind=CHIMERA,
        num_nodes=n,
        edges=_finish_edges(edges),
        coloring=coloring,
        active_mask=np.ones(n, dtype=bool),
        meta={"rows": rows, "cols": cols, "shore": shore},
    )


def build_pegasus(patch_size: int, shore: int = 4) -> Connectivity:
    """Quadripartite patch of 8-unit cells, denser than the Chimera grid.

    Cells keep the Chimera backbone (K_{4,4} intra-cell plus same-shore
    couplers to the cells below/right) and add the two denser families of
    its quadripartite cousin: odd couplers pairing adjacent units within
    a shore, and cross-shore couplers into the neighboring cell, restricted
    to opposite within-shore parity so the 4-coloring
    2*((u + r + c) mod 2) + (k mod 2) stays proper.  patch_size=6 gives the
    288-node patch used throughout.
    """
    if patch_size < 1:
        raise GraphError("patch_size must be >= 1")
    if shore % 2:
        raise GraphError("shore must be even for the odd couplers")
    rows = cols = patch_size
    n = 2 * shore * rows * cols
    edges = []
    coloring = np.zeros(n, dtype=np.int64)

    def idx(r, c, u, k):
        return _chimera_index(r, c, u, k, cols, shore)

    for r in range(rows):
        for c in range(cols):
            for u in (0, 1):
                for k in range(shore):
                    coloring[idx(r, c, u, k)] = 2 * ((u + r + c) % 2) + (k % 2)
            # intra-cell K_{shore,shore}
            for i in range(shore):
                for j in range(shore):
                    edges.append((idx(r, c, 0, i), idx(r, c, 1, j)))
            # odd couplers: (0,1), (2,3) within each shore
            for u in (0, 1):
                for k in range(0, shore, 2):
                    edges.append((idx(r, c, u, k), idx(r, c, u, k + 1)))
            if r + 1 < rows:
                for k in range(shore):
                    # external same-shore coupler downward
                    edges.append((idx(r, c, 0, k), idx(r + 1, c, 0, k)))
                    # cross-shore couplers into the cell below (opposite parity)
                    for j in range(shore):
                        if (j - k) % 2:
                            edges.append((idx(r, c, 0, k), idx(r + 1, c, 1, j)))
            if c + 1 < cols:
                for k in range(shore):
                    edges.append((idx(r, c, 1, k), idx(r, c + 1, 1, k)))
                    for j in range(shore):
                        if (j - k) % 2:
                            edges.append((idx(r, c, 1, k), idx(r, c + 1, 0, j)))
    return Connectivity(
        kind=PEGASUS,
        num_nodes=n,
        edges=_finish_edges(edges),
        coloring=coloring,
        active_mask=np.ones(n, dtype=bool),
        meta={"patch_size": patch_size, "shore": shore},
    )


def mask_nodes(conn: Connectivity, dead) -> Connectivity:
    """Deactivate the given nodes and drop their incident edges.

    Node indexing is preserved; parameters attached to masked nodes are
    expected to be held at zero by the caller.
    """
    dead = np.asarray(sorted(set(int(d) for d in dead)), dtype=np.int64)
    if dead.size and (dead.min() < 0 or dead.max() >= conn.num_nodes):
        raise GraphError("dead node index out of range")
    mask = conn.active_mask.copy()
    mask[dead] = False
    keep = mask[conn.edges[:, 0]] & mask[conn.edges[:, 1]] if conn.num_edges else np.zeros(0, bool)
    return Connectivity(
        kind=conn.kind,
        num_nodes=conn.num_nodes,
        edges=conn.edges[keep] if conn.num_edges else conn.edges,
        coloring=conn.coloring,
        active_mask=mask,
        meta=dict(conn.meta),
    )


def hierarchy_mapping(conn: Connectivity, scheme: str) -> HierarchyMapping:
    """Split active nodes in two groups for the two-level encoder.

    Bipartite uses the color classes (edge-free inside each group on
    2-colorable kinds; on Bernoulli/Complete/Pegasus it degrades to a
    balanced split by color then index).  Chains is Chimera-only: vertical
    units vs horizontal units, each group threaded by inter-cell couplers.
    """
    active = conn.active_nodes
    if scheme == BIPARTITE:
        if conn.kind == CHIMERA:
            g1 = np.flatnonzero((conn.coloring == 0) & conn.active_mask)
            g2 = np.flatnonzero((conn.coloring == 1) & conn.active_mask)
        elif conn.kind == PEGASUS:
            g1 = np.flatnonzero((conn.coloring < 2) & conn.active_mask)
            g2 = np.flatnonzero((conn.coloring >= 2) & conn.active_mask)
        else:
            half = len(active) // 2
            g1, g2 = active[:half], active[half:]
        return HierarchyMapping(BIPARTITE, g1, g2)
    if scheme == CHAINS:
        if conn.kind != CHIMERA:
            raise GraphError("chains mapping is defined on chimera graphs only")
        shore = conn.meta["shore"]
        # vertical units occupy the first `shore` slots of each cell
        within = np.arange(conn.num_nodes) % (2 * shore)
        vertical = within < shore
        g1 = np.flatnonzero(vertical & conn.active_mask)
        g2 = np.flatnonzero(~vertical & conn.active_mask)
        return HierarchyMapping(CHAINS, g1, g2)
    raise GraphError(f"unknown hierarchy scheme {scheme!r}")


def intra_group_edge_count(conn: Connectivity, group: np.ndarray) -> int:
    """Number of stored edges with both endpoints inside `group`."""
    inside = np.zeros(conn.num_nodes, dtype=bool)
    inside[group] = True
    if not conn.num_edges:
        return 0
    return int((inside[conn.edges[:, 0]] & inside[conn.edges[:, 1]]).sum())


def graph_stats(conn: Connectivity) -> dict:
    counts = np.bincount(conn.coloring[conn.active_mask], minlength=conn.num_colors)
    return {
        "kind": conn.kind,
        "num_nodes": conn.num_nodes,
        "active_nodes": int(conn.active_mask.sum()),
        "num_edges": conn.num_edges,
        "num_colors": conn.num_colors,
        "color_sizes": counts.tolist(),
    }
