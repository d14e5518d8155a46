"""Deterministic synthetic graphs, features, and parameterized models.

Everything here is seed-driven: the same seed yields the same bytes, which
keeps end-to-end runs reproducible. Generated graphs store each
destination's in-neighbor slice in ascending id order.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .model_ir import ModelGraph, Operator, build_model
from .storage import CscGraph

GRAPH_KINDS = ("regular", "powerlaw", "sbm", "path")
MODEL_KINDS = ("gcn2", "gcn3", "gat2", "jknet3", "residual", "linear")


def _csc_from_slices(n, slices) -> CscGraph:
    indptr = np.zeros(n + 1, dtype=np.int64)
    chunks = []
    for v in range(n):
        s = np.asarray(slices[v], dtype=np.int64)
        indptr[v + 1] = indptr[v] + len(s)
        chunks.append(s)
    indices = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return CscGraph(n, int(indptr[-1]), indptr, indices)


def gen_regular(n, d, seed) -> CscGraph:
    """Every node has exactly d distinct in-neighbors (never itself)."""
    if not 0 <= d < n:
        raise ConfigError(f"regular graph needs 0 <= d < n, got d={d} n={n}")
    rng = np.random.default_rng([seed, 0])
    slices = []
    for v in range(n):
        pool = rng.choice(n - 1, size=d, replace=False)
        pool = np.where(pool >= v, pool + 1, pool)      # skip the self id
        slices.append(np.sort(pool))
    return _csc_from_slices(n, slices)


def gen_powerlaw(n, seed, exponent=2.1, max_deg=16) -> CscGraph:
    """Heavy-tailed in-degrees: zipf-drawn degree truncated at a desk-scale
    cap, sources uniform distinct."""
    if n < 2:
        raise ConfigError("powerlaw graph needs n >= 2")
    rng = np.random.default_rng([seed, 1])
    degrees = np.minimum(rng.zipf(exponent, size=n), min(max_deg, n - 1))
    slices = []
    for v in range(n):
        pool = rng.choice(n - 1, size=int(degrees[v]), replace=False)
        pool = np.where(pool >= v, pool + 1, pool)
        slices.append(np.sort(pool))
    return _csc_from_slices(n, slices)


def gen_sbm(blocks, size, p_in, p_out, seed) -> CscGraph:
    """Stochastic block model: dense intra-block, sparse inter-block in-edges."""
    if blocks < 1 or size < 1:
        raise ConfigError("sbm needs blocks >= 1 and size >= 1")
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ConfigError("sbm probabilities must lie in [0, 1]")
    n = blocks * size
    rng = np.random.default_rng([seed, 2])
    slices = []
    for v in range(n):
        b = v // size
        lo, hi = b * size, (b + 1) * size
        inside = np.concatenate([np.arange(lo, v), np.arange(v + 1, hi)])
        outside_count = n - size
        k_in = rng.binomial(len(inside), p_in)
        k_out = rng.binomial(outside_count, p_out)
        chosen_in = rng.choice(inside, size=k_in, replace=False) if k_in else np.zeros(0, np.int64)
        if k_out:
            pool = rng.choice(outside_count, size=k_out, replace=False)
            chosen_out = np.where(pool >= lo, pool + size, pool)
        else:
            chosen_out = np.zeros(0, np.int64)
        slices.append(np.sort(np.concatenate([chosen_in, chosen_out])))
    return _csc_from_slices(n, slices)


def gen_path(n) -> CscGraph:
    """Chain 0 -> 1 -> ... -> n-1 as in-edges; bandwidth-1 structure."""
    slices = [np.zeros(0, np.int64)] + [np.array([v - 1], dtype=np.int64) for v in range(1, n)]
    return _csc_from_slices(n, slices)


def gen_graph(kind, seed=0, **params) -> CscGraph:
    if kind == "regular":
        return gen_regular(params["n"], params["d"], seed)
    if kind == "powerlaw":
        return gen_powerlaw(params["n"], seed)
    if kind == "sbm":
        return gen_sbm(params["blocks"], params["size"],
                       params["p_in"], params["p_out"], seed)
    if kind == "path":
        return gen_path(params["n"])
    raise ConfigError(f"unknown graph kind {kind!r}")


def gen_features(n, dim, seed) -> np.ndarray:
    rng = np.random.default_rng([seed, 3])
    return rng.normal(0.0, 1.0, size=(n, dim)).astype(np.float32)


# -- model builders -----------------------------------------------------------


def _w(rng, shape):
    fan_in = shape[-1]
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape).astype(np.float32)


def build_gcn(input_dim, hidden, out_dim, layers, seed=0) -> ModelGraph:
    """Linear stack of mean convs with ReLU between them."""
    rng = np.random.default_rng([seed, 10, layers])
    ops = {"x": Operator("x", "Input", ())}
    prev, prev_dim = "x", input_dim
    for i in range(1, layers + 1):
        d = out_dim if i == layers else hidden
        cid = f"conv{i}"
        ops[cid] = Operator(cid, "ConvMean", (prev,),
                            {"weight": _w(rng, (d, prev_dim)), "bias": np.zeros(d, np.float32)})
        prev, prev_dim = cid, d
        if i < layers:
            rid = f"relu{i}"
            ops[rid] = Operator(rid, "ReLU", (prev,))
            prev = rid
    ops["out"] = Operator("out", "Output", (prev,))
    return build_model(ops, input_dim, "out")


def build_gat(input_dim, head_dim, out_dim, layers, heads=2, seed=0) -> ModelGraph:
    """Stack of multi-head attention convs, heads concatenated."""
    rng = np.random.default_rng([seed, 11, layers])
    ops = {"x": Operator("x", "Input", ())}
    prev, prev_dim = "x", input_dim
    for i in range(1, layers + 1):
        dh = out_dim if i == layers else head_dim
        cid = f"attn{i}"
        ops[cid] = Operator(cid, "ConvAttn", (prev,),
                            {"weight": _w(rng, (heads, dh, prev_dim)),
                             "attn": _w(rng, (heads, 2 * dh))})
        prev, prev_dim = cid, heads * dh
        if i < layers:
            rid = f"relu{i}"
            ops[rid] = Operator(rid, "ReLU", (prev,))
            prev = rid
    ops["out"] = Operator("out", "Output", (prev,))
    return build_model(ops, input_dim, "out")


def build_jknet(input_dim, hidden, out_dim, layers=3, seed=0) -> ModelGraph:
    """Per-layer convs with dropout taps, jump-concatenated into a final conv."""
    rng = np.random.default_rng([seed, 12, layers])
    ops = {"x": Operator("x", "Input", ())}
    prev, prev_dim = "x", input_dim
    taps = []
    for i in range(1, layers + 1):
        cid, did = f"conv{i}", f"drop{i}"
        ops[cid] = Operator(cid, "ConvMean", (prev,),
                            {"weight": _w(rng, (hidden, prev_dim)),
                             "bias": np.zeros(hidden, np.float32)})
        ops[did] = Operator(did, "DropoutIdentity", (cid,))
        taps.append(did)
        prev, prev_dim = did, hidden
    ops["jump"] = Operator("jump", "Concat", tuple(taps))
    ops["convf"] = Operator("convf", "ConvMean", ("jump",),
                            {"weight": _w(rng, (out_dim, hidden * layers)),
                             "bias": np.zeros(out_dim, np.float32)})
    ops["out"] = Operator("out", "Output", ("convf",))
    return build_model(ops, input_dim, "out")


def build_residual(input_dim, hidden, seed=0) -> ModelGraph:
    """Two mean convs with a skip connection added around the second."""
    rng = np.random.default_rng([seed, 13])
    ops = {
        "x": Operator("x", "Input", ()),
        "conv1": Operator("conv1", "ConvMean", ("x",),
                          {"weight": _w(rng, (hidden, input_dim)),
                           "bias": np.zeros(hidden, np.float32)}),
        "relu1": Operator("relu1", "ReLU", ("conv1",)),
        "conv2": Operator("conv2", "ConvMean", ("relu1",),
                          {"weight": _w(rng, (hidden, hidden)),
                           "bias": np.zeros(hidden, np.float32)}),
        "skip": Operator("skip", "Add", ("conv2", "relu1")),
        "norm": Operator("norm", "Norm", ("skip",)),
        "out": Operator("out", "Output", ("norm",)),
    }
    return build_model(ops, input_dim, "out")


def build_linear(input_dim, out_dim, seed=0) -> ModelGraph:
    """Conv-free model: a single per-node affine transform."""
    rng = np.random.default_rng([seed, 14])
    ops = {
        "x": Operator("x", "Input", ()),
        "lin": Operator("lin", "Linear", ("x",),
                        {"weight": _w(rng, (out_dim, input_dim)),
                         "bias": _w(rng, (out_dim,))}),
        "out": Operator("out", "Output", ("lin",)),
    }
    return build_model(ops, input_dim, "out")


def build_named_model(kind, input_dim, hidden, out_dim, seed=0) -> ModelGraph:
    if kind == "gcn2":
        return build_gcn(input_dim, hidden, out_dim, 2, seed)
    if kind == "gcn3":
        return build_gcn(input_dim, hidden, out_dim, 3, seed)
    if kind == "gat2":
        return build_gat(input_dim, hidden, out_dim, 2, heads=2, seed=seed)
    if kind == "jknet3":
        return build_jknet(input_dim, hidden, out_dim, 3, seed)
    if kind == "residual":
        return build_residual(input_dim, hidden, seed)
    if kind == "linear":
        return build_linear(input_dim, out_dim, seed)
    raise ConfigError(f"unknown model kind {kind!r}")
