"""Node reordering so consecutive-id batches share input neighbors.

The main producer is reverse Cuthill-McKee on the symmetrized adjacency;
random shuffle and ascending in-degree sort are the comparison baselines.
Orders are materialized by physically relabeling the graph and permuting
feature rows; inference output is de-permuted afterwards so external results
are always in original id order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .storage import CscGraph, EmbeddingStore

PERM_MAGIC = b"DGIP"


@dataclass(frozen=True)
class NodeOrder:
    """perm: new position -> old id; inv: old id -> new position."""

    perm: np.ndarray

    def __post_init__(self):
        perm = np.ascontiguousarray(self.perm, dtype=np.int64)
        object.__setattr__(self, "perm", perm)
        n = len(perm)
        if n and not np.array_equal(np.sort(perm), np.arange(n)):
            raise ValueError("perm is not a permutation")
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n, dtype=np.int64)
        object.__setattr__(self, "_inv", inv)

    @property
    def inv(self) -> np.ndarray:
        return self._inv

    @property
    def num_nodes(self) -> int:
        return len(self.perm)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.num_nodes)))


def identity_order(g: CscGraph) -> NodeOrder:
    return NodeOrder(np.arange(g.num_nodes, dtype=np.int64))


def _symmetrized_adjacency(g: CscGraph):
    """Undirected neighbor lists (self-loops dropped, duplicates merged)."""
    src = g.indices
    dst = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.indptr))
    keep = src != dst
    a = np.concatenate([src[keep], dst[keep]])
    b = np.concatenate([dst[keep], src[keep]])
    if len(a) == 0:
        return np.zeros(g.num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    enc = np.unique(a * g.num_nodes + b)
    ua, ub = enc // g.num_nodes, enc % g.num_nodes
    indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.add.at(indptr[1:], ua, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, ub


def rcmk(g: CscGraph) -> NodeOrder:
    """Reverse Cuthill-McKee over the union of in- and out-edges.

    Per connected component the BFS starts at the minimum-degree node
    (ties to the smallest id) and visits each frontier node's unvisited
    neighbors in ascending (degree, id) order; component sequences are
    concatenated in ascending order of their start node and the whole
    sequence is reversed.
    """
    n = g.num_nodes
    indptr, nbrs = _symmetrized_adjacency(g)
    deg = np.diff(indptr)
    comp = np.full(n, -1, dtype=np.int64)
    n_comp = 0
    for seed in range(n):
        if comp[seed] >= 0:
            continue
        stack = [seed]
        comp[seed] = n_comp
        while stack:
            u = stack.pop()
            for v in nbrs[indptr[u]:indptr[u + 1]]:
                if comp[v] < 0:
                    comp[v] = n_comp
                    stack.append(v)
        n_comp += 1

    starts = []
    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        best = members[np.lexsort((members, deg[members]))[0]]
        starts.append(int(best))
    starts.sort()

    visited = np.zeros(n, dtype=bool)
    seq = np.empty(n, dtype=np.int64)
    pos = 0
    for start in starts:
        seq[pos] = start
        visited[start] = True
        head, pos = pos, pos + 1
        while head < pos:
            u = seq[head]
            head += 1
            cand = nbrs[indptr[u]:indptr[u + 1]]
            cand = cand[~visited[cand]]
            if len(cand):
                cand = cand[np.lexsort((cand, deg[cand]))]
                seq[pos:pos + len(cand)] = cand
                visited[cand] = True
                pos += len(cand)
    return NodeOrder(seq[::-1].copy())


def degree_sort(g: CscGraph) -> NodeOrder:
    """Stable ascending sort by in-degree, ties by old id."""
    return NodeOrder(np.argsort(g.in_degrees, kind="stable").astype(np.int64))


def random_order(g: CscGraph, seed) -> NodeOrder:
    """Seeded Fisher-Yates shuffle; same seed, same permutation."""
    rng = np.random.default_rng(seed)
    return NodeOrder(rng.permutation(g.num_nodes).astype(np.int64))


def make_order(g: CscGraph, kind, seed=0) -> NodeOrder:
    if kind == "none":
        return identity_order(g)
    if kind == "rcmk":
        return rcmk(g)
    if kind == "degree":
        return degree_sort(g)
    if kind == "random":
        return random_order(g, seed)
    raise ValueError(f"unknown order kind {kind!r}")


def apply_order(g: CscGraph, x, order: NodeOrder):
    """Relabel the graph and permute feature rows under `order`.

    Each destination's neighbor slice is mapped elementwise, preserving its
    stored order: relabeling must not change any aggregation's summation
    order, so that inference under any order reproduces the identity-order
    bytes after de-permutation.
    """
    if order.num_nodes != g.num_nodes:
        raise ValueError(f"order over {order.num_nodes} nodes, graph has {g.num_nodes}")
    if order.is_identity():
        return g, x
    perm, inv = order.perm, order.inv
    degrees = g.in_degrees
    new_indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.cumsum(degrees[perm], out=new_indptr[1:])
    new_indices = np.empty(g.num_edges, dtype=np.int64)
    for j in range(g.num_nodes):
        old = perm[j]
        new_indices[new_indptr[j]:new_indptr[j + 1]] = inv[g.indices[g.indptr[old]:g.indptr[old + 1]]]
    g2 = CscGraph(g.num_nodes, g.num_edges, new_indptr, new_indices)

    if isinstance(x, EmbeddingStore):
        if x.num_rows != g.num_nodes:
            raise ValueError(f"feature rows {x.num_rows} != num_nodes {g.num_nodes}")
        x2 = EmbeddingStore(x.num_rows, x.dim, backing="memory")
        x2._data = x.gather(perm)
    else:
        arr = np.asarray(x, dtype=np.float32)
        if arr.shape[0] != g.num_nodes:
            raise ValueError(f"feature rows {arr.shape[0]} != num_nodes {g.num_nodes}")
        x2 = arr[perm].copy()
    return g2, x2


def bandwidth(g: CscGraph) -> int:
    """Max |src - dst| over symmetrized edges; 0 for edgeless graphs."""
    if g.num_edges == 0:
        return 0
    dst = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.indptr))
    return int(np.max(np.abs(g.indices - dst)))


def save_order(order: NodeOrder, path):
    with open(path, "wb") as f:
        f.write(PERM_MAGIC)
        f.write(struct.pack("<Q", order.num_nodes))
        f.write(order.perm.astype("<u8").tobytes())


def load_order(path) -> NodeOrder:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PERM_MAGIC:
            raise FormatError(f"bad permutation magic {magic!r} at offset 0")
        (n,) = struct.unpack("<Q", f.read(8))
        perm = np.frombuffer(f.read(8 * n), dtype="<u8")
        if len(perm) != n:
            raise FormatError("truncated permutation file")
    return NodeOrder(perm.astype(np.int64))
