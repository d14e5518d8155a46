"""Deterministic numeric primitives: dense ops and sparse neighbor aggregation.

Every kernel is batch-invariant: a row of the result depends only on that
row's own inputs (and, for aggregations, the target's own neighbor slice in
stored order), never on which other rows share the batch. Computing any
subset of rows in isolation therefore yields bytes identical to the
full-batch computation restricted to those rows. This property is load
bearing: it is what makes the two inference engines bit-comparable.

Concretely that means no BLAS matmuls (BLAS kernels change accumulation
order with matrix shape); dense transforms go through np.einsum's fixed
per-element reduction, and neighbor sums use np.add.at, which accumulates
strictly in edge order (stored neighbor order, then self).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAKY_SLOPE = np.float32(0.2)
NORM_EPS = np.float32(1e-12)

ELEMENTWISE_KINDS = ("ReLU", "LeakyReLU", "Add", "Norm", "DropoutIdentity")


@dataclass(frozen=True)
class BatchCsc:
    """Local adjacency of one batch: targets plus their deduplicated input set.

    ``input_ids`` is ascending and always contains every target
    (self-inclusion). ``local_srcs[indptr[k]:indptr[k+1]]`` are positions in
    ``input_ids`` of target k's in-neighbors, in stored graph order.
    """

    targets: np.ndarray
    input_ids: np.ndarray
    indptr: np.ndarray
    local_srcs: np.ndarray
    target_pos: np.ndarray

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    @property
    def num_inputs(self) -> int:
        return len(self.input_ids)

    @property
    def num_edges(self) -> int:
        return len(self.local_srcs)


def gather_slices(graph, targets):
    """Concatenated in-neighbor slices for targets, plus local offsets."""
    targets = np.asarray(targets, dtype=np.int64)
    starts = graph.indptr[targets]
    lens = graph.indptr[targets + 1] - starts
    indptr = np.zeros(len(targets) + 1, dtype=np.int64)
    np.cumsum(lens, out=indptr[1:])
    total = int(indptr[-1])
    if total == 0:
        return np.zeros(0, dtype=np.int64), indptr
    seg_starts = indptr[:-1]
    pos = np.arange(total, dtype=np.int64) - np.repeat(seg_starts, lens) + np.repeat(starts, lens)
    return graph.indices[pos], indptr


def build_batch_csc(graph, targets) -> BatchCsc:
    targets = np.asarray(targets, dtype=np.int64)
    srcs, indptr = gather_slices(graph, targets)
    input_ids = np.unique(np.concatenate([targets, srcs])) if len(targets) else targets
    local_srcs = np.searchsorted(input_ids, srcs)
    target_pos = np.searchsorted(input_ids, targets)
    return BatchCsc(targets, input_ids, indptr, local_srcs, target_pos)


def trivial_batch_csc(targets) -> BatchCsc:
    """Batch structure for a conv-less block: inputs are exactly the targets."""
    targets = np.asarray(targets, dtype=np.int64)
    order = np.argsort(targets, kind="stable")
    input_ids = targets[order]
    return BatchCsc(targets, input_ids,
                    np.zeros(len(targets) + 1, dtype=np.int64),
                    np.zeros(0, dtype=np.int64),
                    np.searchsorted(input_ids, targets))


def _as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def linear(x, weight, bias=None) -> np.ndarray:
    """out[i] = weight @ x[i] (+ bias), as independent per-row reductions."""
    x = _as_f32(x)
    weight = _as_f32(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape} vs weight {weight.shape}")
    out = np.einsum("ij,kj->ik", x, weight)
    if bias is not None:
        bias = _as_f32(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def _segment_sum(values, seg_ids, num_segments) -> np.ndarray:
    """Per-segment sums accumulated strictly in element order."""
    out = np.zeros((num_segments,) + values.shape[1:], dtype=np.float32)
    if len(seg_ids):
        np.add.at(out, seg_ids, values)
    return out


def _edge_targets(bc: BatchCsc) -> np.ndarray:
    return np.repeat(np.arange(bc.num_targets, dtype=np.int64), np.diff(bc.indptr))


def agg_mean(bc: BatchCsc, h_in) -> np.ndarray:
    """Mean over each target's in-neighbors plus itself.

    Neighbor rows are summed in stored order, self last, then divided by
    deg+1. Isolated nodes reduce to their own row.
    """
    h_in = _as_f32(h_in)
    if h_in.shape[0] != bc.num_inputs:
        raise ValueError(f"h_in has {h_in.shape[0]} rows, expected {bc.num_inputs}")
    seg = _edge_targets(bc)
    sums = _segment_sum(h_in[bc.local_srcs], seg, bc.num_targets)
    sums += h_in[bc.target_pos]
    degp1 = (np.diff(bc.indptr) + 1).astype(np.float32)
    return sums / degp1[:, None]


def leaky_relu(x, slope=LEAKY_SLOPE) -> np.ndarray:
    x = _as_f32(x)
    return np.where(x >= 0, x, np.float32(slope) * x)


@dataclass(frozen=True)
class AttnParams:
    """Multi-head additive attention parameters.

    weight: (heads, head_dim, in_dim); attn: (heads, 2*head_dim), first half
    scoring the source, second half the destination.
    """

    weight: np.ndarray
    attn: np.ndarray

    @property
    def num_heads(self) -> int:
        return self.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.weight.shape[1]

    def validate(self):
        if self.weight.ndim != 3:
            raise ValueError(f"attention weight must be rank 3, got {self.weight.shape}")
        if self.attn.shape != (self.num_heads, 2 * self.head_dim):
            raise ValueError(f"attention vector shape {self.attn.shape} != "
                             f"({self.num_heads}, {2 * self.head_dim})")


def agg_attn(bc: BatchCsc, h_in, params: AttnParams) -> np.ndarray:
    """Additive attention over each target's in-neighbors plus itself.

    Per head: z = W_h h; e_uv = LeakyReLU(a_src z_u + a_dst z_v); weights are
    softmax-normalized over the neighbor-plus-self set with max-subtraction;
    out_v = sum of weighted z_u (stored neighbor order, self last). Head
    outputs are concatenated in head order.
    """
    h_in = _as_f32(h_in)
    params.validate()
    if h_in.shape[0] != bc.num_inputs:
        raise ValueError(f"h_in has {h_in.shape[0]} rows, expected {bc.num_inputs}")
    seg = _edge_targets(bc)
    heads_out = []
    for h in range(params.num_heads):
        z = linear(h_in, params.weight[h])
        dh = params.head_dim
        a_src = _as_f32(params.attn[h, :dh])
        a_dst = _as_f32(params.attn[h, dh:])
        s_src = np.einsum("ij,j->i", z, a_src)
        s_dst = np.einsum("ij,j->i", z, a_dst)
        z_self = z[bc.target_pos]
        self_logit = leaky_relu(s_src[bc.target_pos] + s_dst[bc.target_pos])
        edge_logit = leaky_relu(s_src[bc.local_srcs] + s_dst[bc.target_pos][seg])
        peak = self_logit.copy()
        if len(seg):
            np.maximum.at(peak, seg, edge_logit)
        w_edge = np.exp(edge_logit - peak[seg])
        w_self = np.exp(self_logit - peak)
        denom = _segment_sum(w_edge, seg, bc.num_targets) + w_self
        numer = _segment_sum(w_edge[:, None] * z[bc.local_srcs], seg, bc.num_targets)
        numer += w_self[:, None] * z_self
        heads_out.append(numer / denom[:, None])
    return concat(heads_out)


def elementwise(kind, inputs) -> np.ndarray:
    """Pure per-row operators: ReLU, LeakyReLU, Add, Norm, DropoutIdentity."""
    mats = [_as_f32(m) for m in inputs]
    if kind == "ReLU":
        (x,) = mats
        return np.maximum(x, np.float32(0))
    if kind == "LeakyReLU":
        (x,) = mats
        return leaky_relu(x)
    if kind == "DropoutIdentity":
        (x,) = mats
        return x.copy()
    if kind == "Add":
        if len(mats) < 2:
            raise ValueError("Add needs at least two operands")
        out = mats[0].copy()
        for m in mats[1:]:
            if m.shape != out.shape:
                raise ValueError(f"Add shape mismatch: {out.shape} vs {m.shape}")
            out += m
        return out
    if kind == "Norm":
        (x,) = mats
        ss = np.sum(x * x, axis=1) + NORM_EPS
        return x / np.sqrt(ss)[:, None]
    raise ValueError(f"unknown elementwise kind {kind!r}")


def concat(parts) -> np.ndarray:
    parts = [_as_f32(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) > 1:
        raise ValueError(f"concat row mismatch: {sorted(rows)}")
    return np.concatenate(parts, axis=1)
