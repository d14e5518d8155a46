"""Graph topology (CSC), embedding matrices, and their binary file formats.

On-disk layouts (all integers little-endian):

* graph file:    magic ``DGIG``, version u32=1, num_nodes u64, num_edges u64,
                 indptr (num_nodes+1)*u64, indices num_edges*u64
* feature file:  magic ``DGIF``, version u32=1, num_rows u64, dim u32,
                 num_rows*dim float32 row-major

Node ids and offsets are 64-bit unsigned in files; embeddings are float32.
Graphs are immutable after load. Stores come in two observationally identical
backings: an in-memory matrix and a file with positional whole-row I/O.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, StoreCapacityError

GRAPH_MAGIC = b"DGIG"
FEATURE_MAGIC = b"DGIF"
FORMAT_VERSION = 1

_GRAPH_HEADER = struct.Struct("<4sIQQ")
_FEATURE_HEADER = struct.Struct("<4sIQI")


@dataclass(frozen=True)
class CscGraph:
    """Immutable in-neighbor adjacency in compressed sparse column form.

    ``indices[indptr[v]:indptr[v+1]]`` holds the in-neighbors of destination
    ``v``. Slice order is the stored order; every consumer iterates neighbors
    in exactly this order, which is what makes independently batched
    aggregations bit-comparable.
    """

    num_nodes: int
    num_edges: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indptr", np.ascontiguousarray(self.indptr, dtype=np.int64))
        object.__setattr__(self, "indices", np.ascontiguousarray(self.indices, dtype=np.int64))
        validate_csc(self.num_nodes, self.num_edges, self.indptr, self.indices)

    def in_neighbors(self, v) -> np.ndarray:
        """View of v's in-neighbor slice (no copy)."""
        if v < 0 or v >= self.num_nodes:
            raise IndexError(f"node id {v} out of range [0, {self.num_nodes})")
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def in_degree(self, v) -> int:
        if v < 0 or v >= self.num_nodes:
            raise IndexError(f"node id {v} out of range [0, {self.num_nodes})")
        return int(self.indptr[v + 1] - self.indptr[v])

    @property
    def in_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)


def validate_csc(num_nodes, num_edges, indptr, indices):
    if num_nodes < 0 or num_edges < 0:
        raise FormatError(f"negative graph dimensions: nodes={num_nodes} edges={num_edges}")
    if len(indptr) != num_nodes + 1:
        raise FormatError(f"indptr length {len(indptr)} != num_nodes+1 = {num_nodes + 1}")
    if len(indices) != num_edges:
        raise FormatError(f"indices length {len(indices)} != num_edges = {num_edges}")
    if num_nodes == 0:
        if num_edges != 0:
            raise FormatError("zero-node graph with nonzero edge count")
        if indptr[0] != 0:
            raise FormatError("indptr[0] != 0 at offset 0")
        return
    if indptr[0] != 0:
        raise FormatError("indptr[0] != 0 at offset 0")
    diffs = np.diff(indptr)
    bad = np.flatnonzero(diffs < 0)
    if len(bad):
        raise FormatError(f"indptr not monotone at offset {int(bad[0])} "
                          f"({int(indptr[bad[0]])} > {int(indptr[bad[0] + 1])})")
    if indptr[-1] != num_edges:
        raise FormatError(f"indptr[{num_nodes}] = {int(indptr[-1])} != num_edges = {num_edges}")
    if num_edges:
        oob = np.flatnonzero((indices < 0) | (indices >= num_nodes))
        if len(oob):
            raise FormatError(f"index out of range at offset {int(oob[0])}: "
                              f"{int(indices[oob[0]])} >= {num_nodes}")


def make_graph(num_nodes, dst_to_srcs) -> CscGraph:
    """Build a CscGraph from a mapping destination -> iterable of sources."""
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    chunks = []
    for v in range(num_nodes):
        srcs = np.asarray(dst_to_srcs.get(v, ()), dtype=np.int64)
        indptr[v + 1] = indptr[v] + len(srcs)
        chunks.append(srcs)
    indices = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return CscGraph(num_nodes, int(indptr[-1]), indptr, indices)


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}: wanted {n} bytes, got {len(data)}")
    return data


def load_graph(path) -> CscGraph:
    """Load and validate a graph file. Raises FormatError naming the offending offset."""
    with open(path, "rb") as f:
        raw = _read_exact(f, _GRAPH_HEADER.size, "graph header")
        magic, version, num_nodes, num_edges = _GRAPH_HEADER.unpack(raw)
        if magic != GRAPH_MAGIC:
            raise FormatError(f"bad graph magic {magic!r} at offset 0 (expected {GRAPH_MAGIC!r})")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported graph version {version} at offset 4")
        indptr = np.frombuffer(_read_exact(f, 8 * (num_nodes + 1), "indptr"), dtype="<u8")
        indices = np.frombuffer(_read_exact(f, 8 * num_edges, "indices"), dtype="<u8")
        if f.read(1):
            raise FormatError("trailing bytes after indices")
    if num_edges and indices.max() > np.iinfo(np.int64).max:
        raise FormatError("index exceeds signed 64-bit range")
    return CscGraph(int(num_nodes), int(num_edges),
                    indptr.astype(np.int64), indices.astype(np.int64))


def save_graph(g: CscGraph, path):
    with open(path, "wb") as f:
        f.write(_GRAPH_HEADER.pack(GRAPH_MAGIC, FORMAT_VERSION, g.num_nodes, g.num_edges))
        f.write(g.indptr.astype("<u8").tobytes())
        f.write(g.indices.astype("<u8").tobytes())


def degree_prefix(g: CscGraph, order) -> np.ndarray:
    """Cumulative in-degrees under a node ordering.

    prefix[j] - prefix[i] is the total in-degree of the nodes at ordered
    positions [i, j); prefix has num_nodes+1 entries.
    """
    order = np.asarray(order, dtype=np.int64)
    if len(order) != g.num_nodes or (g.num_nodes and
                                     not np.array_equal(np.sort(order), np.arange(g.num_nodes))):
        raise ValueError("order is not a permutation of 0..num_nodes")
    prefix = np.zeros(g.num_nodes + 1, dtype=np.int64)
    if g.num_nodes:
        np.cumsum(g.in_degrees[order], out=prefix[1:])
    return prefix


def prefix_for_targets(g: CscGraph, targets) -> np.ndarray:
    """Cumulative in-degrees of an arbitrary target list (batching cursor)."""
    targets = np.asarray(targets, dtype=np.int64)
    prefix = np.zeros(len(targets) + 1, dtype=np.int64)
    if len(targets):
        np.cumsum(g.in_degrees[targets], out=prefix[1:])
    return prefix


class EmbeddingStore:
    """An N x d float32 matrix of node embeddings, memory- or file-backed.

    Rows are read and written positionally as whole rows. The two backings
    are observationally identical; file backing exists so intermediate
    embeddings can live on external storage.
    """

    def __init__(self, num_rows, dim, backing="memory", path=None, capacity=None,
                 _open_existing=False):
        if num_rows < 0 or dim <= 0:
            raise ValueError(f"invalid store shape {num_rows}x{dim}")
        if backing not in ("memory", "file"):
            raise ValueError(f"unknown backing {backing!r}")
        self.num_rows = int(num_rows)
        self.dim = int(dim)
        self.backing = backing
        self.path = path
        self._row_bytes = self.dim * 4
        if backing == "memory":
            self._data = np.zeros((self.num_rows, self.dim), dtype=np.float32)
            self._f = None
        else:
            if path is None:
                raise ValueError("file backing requires a path")
            nbytes = self.num_rows * self._row_bytes
            if capacity is not None and nbytes > capacity:
                raise StoreCapacityError(
                    f"store of {nbytes} bytes exceeds external capacity {capacity}")
            self._data = None
            if _open_existing:
                self._f = open(path, "r+b")
            else:
                self._f = open(path, "w+b")
                self._f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION,
                                                   self.num_rows, self.dim))
                zeros = np.zeros(self.dim, dtype="<f4").tobytes()
                for _ in range(self.num_rows):
                    self._f.write(zeros)
                self._f.flush()

    # -- row I/O ------------------------------------------------------------

    def _check_ids(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) and (ids.min() < 0 or ids.max() >= self.num_rows):
            bad = ids[(ids < 0) | (ids >= self.num_rows)][0]
            raise IndexError(f"row id {int(bad)} out of range [0, {self.num_rows})")
        return ids

    def read_row(self, v) -> np.ndarray:
        return self.gather([v])[0]

    def write_row(self, v, values):
        self.scatter([v], np.asarray(values, dtype=np.float32).reshape(1, self.dim))

    def gather(self, ids) -> np.ndarray:
        """Rows at the given ids, duplicates permitted and duplicated."""
        ids = self._check_ids(ids)
        if self.backing == "memory":
            return self._data[ids].copy()
        out = np.empty((len(ids), self.dim), dtype=np.float32)
        for k, v in enumerate(ids):
            self._f.seek(_FEATURE_HEADER.size + int(v) * self._row_bytes)
            out[k] = np.frombuffer(self._f.read(self._row_bytes), dtype="<f4")
        return out

    def scatter(self, ids, values):
        ids = self._check_ids(ids)
        values = np.ascontiguousarray(values, dtype=np.float32)
        if values.shape != (len(ids), self.dim):
            raise ValueError(f"scatter shape {values.shape} != ({len(ids)}, {self.dim})")
        if self.backing == "memory":
            self._data[ids] = values
            return
        for k, v in enumerate(ids):
            self._f.seek(_FEATURE_HEADER.size + int(v) * self._row_bytes)
            self._f.write(values[k].astype("<f4").tobytes())
        self._f.flush()

    def to_array(self) -> np.ndarray:
        if self.backing == "memory":
            return self._data.copy()
        return self.gather(np.arange(self.num_rows))

    def close(self):
        if self._f is not None:
            self._f.close()
            self._f = None

    def release(self):
        """Free the backing storage (intermediate stores at their drop point)."""
        if self.backing == "memory":
            self._data = None
        else:
            self.close()
            if self.path is not None and os.path.exists(self.path):
                os.remove(self.path)


def open_store(rows, dim, backing="memory", path=None, capacity=None) -> EmbeddingStore:
    """Create a zero-initialized store of the requested shape."""
    return EmbeddingStore(rows, dim, backing=backing, path=path, capacity=capacity)


def load_features(path, backing="memory") -> EmbeddingStore:
    """Open an existing feature/embedding file, validating its header."""
    with open(path, "rb") as f:
        raw = _read_exact(f, _FEATURE_HEADER.size, "feature header")
        magic, version, num_rows, dim = _FEATURE_HEADER.unpack(raw)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad feature magic {magic!r} at offset 0 (expected {FEATURE_MAGIC!r})")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported feature version {version} at offset 4")
        if backing == "memory":
            data = np.frombuffer(_read_exact(f, num_rows * dim * 4, "feature rows"), dtype="<f4")
            if f.read(1):
                raise FormatError("trailing bytes after feature rows")
            store = EmbeddingStore(num_rows, dim, backing="memory")
            store._data = data.reshape(num_rows, dim).astype(np.float32)
            return store
    expected = _FEATURE_HEADER.size + num_rows * dim * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(f"feature file size {actual} != expected {expected}")
    return EmbeddingStore(num_rows, dim, backing="file", path=path, _open_existing=True)


def save_features(store: EmbeddingStore, path):
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, store.num_rows, store.dim))
        f.write(store.to_array().astype("<f4").tobytes())


def save_matrix(matrix, path):
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION,
                                     matrix.shape[0], matrix.shape[1]))
        f.write(matrix.astype("<f4").tobytes())
