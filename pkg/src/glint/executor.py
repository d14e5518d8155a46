"""The two inference engines plus target-set annotation.

The layer-wise engine executes the splitter's ConvBlocks in order, each over
feedback-sized batches of its layer's target set; a node in a layer touches
only its 1-hop (or sampled) in-neighbors, intermediate embeddings are
computed exactly once, and stores are released at their planned drop points.

The node-wise engine is the correctness oracle: per batch of output targets
it materializes the full multi-hop demand structure of the unsplit model DAG
(which nodes need which operator's rows), loads the required input rows, and
evaluates everything for that batch alone, recomputing whatever other
batches also need. Both engines share the same kernels, whose batch
invariance makes their outputs bit-identical.

Partial and sampling runs annotate per-layer target sets V[l] by backward
expansion from the user targets (self included); when a set is already so
large that expansion would cover most of the graph (|V[l+1]| * d_avg >= n),
annotation is skipped and the whole node set is assigned from that layer
down. Sampling draws each node's neighbors once, seeded per (seed, layer,
node), and both engines consume the same draws.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import device
from .batching import BatchController, Thresholds
from .errors import ConfigError, DeviceCapacityError, InternalError
from .kernels import build_batch_csc, gather_slices, trivial_batch_csc
from .model_ir import ModelGraph, eval_conv, eval_normal
from .reorder import NodeOrder, apply_order, make_order
from .splitter import INPUT_REF, BlockSchedule, TensorRef, split
from .storage import CscGraph, EmbeddingStore, open_store, prefix_for_targets

MODES = ("full", "partial", "sampling")


@dataclass
class TargetSets:
    """Per-layer target node sets plus (in sampling mode) the drawn subgraphs."""

    mode: str
    depth: int
    v_sets: dict
    sampled: dict | None = None
    skip_from: int | None = None     # highest layer assigned all nodes by the skip rule

    def graph_for_layer(self, g: CscGraph, layer) -> CscGraph:
        if self.sampled is not None and layer in self.sampled:
            return self.sampled[layer]
        return g


_U64 = np.uint64
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_GOLDEN = _U64(0x9E3779B97F4A7C15)


def _splitmix64(x) -> np.ndarray:
    x = (x + _GOLDEN).astype(np.uint64)
    x ^= x >> _U64(30)
    x *= _MIX1
    x ^= x >> _U64(27)
    x *= _MIX2
    x ^= x >> _U64(31)
    return x


def sample_neighbors(g: CscGraph, nodes, fanout, seed, layer) -> CscGraph:
    """Per-node draw of min(fanout, deg) distinct in-neighbors.

    Each edge gets a hash priority from (seed, layer, node id, slot) and a
    node keeps its fanout smallest, so draws are uniform-without-replacement,
    reproducible, and independent of the order or grouping of `nodes`.
    Sampled slices are stored ascending. Nodes outside `nodes` keep empty
    slices.
    """
    if fanout < 1:
        raise ValueError(f"fanout must be >= 1, got {fanout}")
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    if len(nodes) == 0:
        return CscGraph(g.num_nodes, 0, indptr, np.zeros(0, dtype=np.int64))

    degs = g.indptr[nodes + 1] - g.indptr[nodes]
    srcs, local_indptr = gather_slices(g, nodes)
    lens = np.diff(local_indptr)
    seg = np.repeat(np.arange(len(nodes), dtype=np.int64), lens)
    slot = np.arange(len(srcs), dtype=np.int64) - np.repeat(local_indptr[:-1], lens)

    with np.errstate(over="ignore"):
        base = _splitmix64(_splitmix64(np.uint64(np.int64(seed)))
                           ^ _splitmix64(np.uint64(layer) * _MIX2))
        prio = _splitmix64(base
                           ^ _splitmix64(nodes[seg].astype(np.uint64) * _MIX1)
                           ^ slot.astype(np.uint64))
    order = np.lexsort((prio, seg))
    # lexsort keeps segments contiguous with unchanged sizes, so position
    # minus segment start is the priority rank within the node's slice
    rank_sorted = np.arange(len(srcs), dtype=np.int64) - np.repeat(local_indptr[:-1], lens)
    kept = order[rank_sorted < fanout]
    kept_seg = seg[kept]
    kept_src = srcs[kept]
    order2 = np.lexsort((kept_src, kept_seg))
    kept_src = kept_src[order2]

    kept_count = np.minimum(degs, fanout)
    indptr[nodes + 1] = kept_count
    np.cumsum(indptr, out=indptr)
    return CscGraph(g.num_nodes, int(indptr[-1]), indptr, kept_src)


def _expand(graph: CscGraph, nodes) -> np.ndarray:
    """nodes union their in-neighbors (self-inclusion), sorted."""
    srcs, _ = gather_slices(graph, nodes)
    return np.unique(np.concatenate([nodes, srcs]))


def skip_fires(n_next, graph: CscGraph) -> bool:
    """|V[l+1]| * d_avg >= n, evaluated exactly in integers."""
    return n_next * graph.num_edges >= graph.num_nodes * graph.num_nodes


def annotate(g: CscGraph, targets, depth, mode, fanout=None, seed=0) -> TargetSets:
    """Derive V[depth..1] high-to-low; see the module docstring for the rules."""
    if mode not in MODES:
        raise ConfigError(f"unknown inference mode {mode!r}")
    targets = np.unique(np.asarray(targets, dtype=np.int64))
    if len(targets) and (targets[0] < 0 or targets[-1] >= g.num_nodes):
        raise ConfigError("target ids out of range")
    sampled = None
    if mode == "sampling":
        if fanout is None or fanout < 1:
            raise ConfigError("sampling mode requires fanout >= 1")
        all_nodes = np.arange(g.num_nodes, dtype=np.int64)
        sampled = {l: sample_neighbors(g, all_nodes, fanout, seed, l)
                   for l in range(1, depth + 1)}
    if depth == 0:
        return TargetSets(mode=mode, depth=0, v_sets={0: targets}, sampled=sampled)

    all_nodes = np.arange(g.num_nodes, dtype=np.int64)
    v_sets = {}
    skip_from = None
    if mode == "full":
        for l in range(1, depth + 1):
            v_sets[l] = all_nodes
    else:
        v_sets[depth] = targets
        for l in range(depth - 1, 0, -1):
            upper = v_sets[l + 1]
            g_used = sampled[l + 1] if sampled else g
            if len(targets) and skip_fires(len(upper), g_used):
                skip_from = l
                for ll in range(l, 0, -1):
                    v_sets[ll] = all_nodes
                break
            v_sets[l] = _expand(g_used, upper)
    return TargetSets(mode=mode, depth=depth, v_sets=v_sets, sampled=sampled,
                      skip_from=skip_from)


@dataclass
class RunStats:
    """Deterministic run statistics; wall time is kept out of the stats document."""

    executor: str
    mode: str
    order: str
    depth: int
    initial_thresholds: tuple | None = None
    layer_batches: dict = field(default_factory=dict)
    layer_transfer: dict = field(default_factory=dict)
    layer_aggregations: dict = field(default_factory=dict)
    layer_input_bytes: dict = field(default_factory=dict)
    total_transfer: int = 0
    total_input_bytes: int = 0
    total_aggregations: int = 0
    max_footprint: int = 0
    batches: int = 0
    trajectory: list = field(default_factory=list)       # (layer, n_t, n_i)
    batch_footprints: list = field(default_factory=list)
    batch_transfers: list = field(default_factory=list)
    batch_layers: list = field(default_factory=list)
    batch_sizes: list = field(default_factory=list)
    oom_retries: int = 0
    thresholds_carry: bool = True
    wall_time: float = 0.0

    def _add_batch(self, layer, n_targets, fp, thresholds=None, retries=0):
        self.batches += 1
        self.layer_batches[layer] = self.layer_batches.get(layer, 0) + 1
        self.layer_transfer[layer] = self.layer_transfer.get(layer, 0) + fp.transfer_bytes
        self.layer_input_bytes[layer] = self.layer_input_bytes.get(layer, 0) + fp.input_bytes
        self.total_transfer += fp.transfer_bytes
        self.total_input_bytes += fp.input_bytes
        self.max_footprint = max(self.max_footprint, fp.peak)
        self.oom_retries += retries
        self.batch_footprints.append(fp.peak)
        self.batch_transfers.append(fp.transfer_bytes)
        self.batch_layers.append(layer)
        self.batch_sizes.append(n_targets)
        if thresholds is not None:
            self.trajectory.append((layer, thresholds.n_t, thresholds.n_i))

    def _add_aggregations(self, layer, count):
        self.layer_aggregations[layer] = self.layer_aggregations.get(layer, 0) + count
        self.total_aggregations += count

    def to_lines(self) -> list:
        """Flat key<TAB>value lines; byte-stable across identical runs."""
        lines = [("schema", "glint-stats-v1"),
                 ("executor", self.executor),
                 ("mode", self.mode),
                 ("order", self.order),
                 ("depth", str(self.depth)),
                 ("batches", str(self.batches)),
                 ("total.transfer_bytes", str(self.total_transfer)),
                 ("total.input_bytes", str(self.total_input_bytes)),
                 ("total.aggregations", str(self.total_aggregations)),
                 ("max_footprint_bytes", str(self.max_footprint)),
                 ("oom_retries", str(self.oom_retries)),
                 ("thresholds.carry_across_layers", str(self.thresholds_carry).lower())]
        if self.initial_thresholds is not None:
            lines.append(("thresholds.initial",
                          f"{self.initial_thresholds[0]},{self.initial_thresholds[1]}"))
        for layer in sorted(self.layer_batches):
            lines.append((f"layer.{layer}.batches", str(self.layer_batches[layer])))
            lines.append((f"layer.{layer}.transfer_bytes", str(self.layer_transfer[layer])))
            lines.append((f"layer.{layer}.input_bytes",
                          str(self.layer_input_bytes.get(layer, 0))))
        for layer in sorted(self.layer_aggregations):
            lines.append((f"layer.{layer}.aggregations", str(self.layer_aggregations[layer])))
        if self.trajectory:
            lines.append(("thresholds.trajectory",
                          ";".join(f"{l}:{nt}:{ni}" for l, nt, ni in self.trajectory)))
        for name, vals in (("footprint_bytes", self.batch_footprints),
                           ("transfer_bytes", self.batch_transfers),
                           ("layer", self.batch_layers),
                           ("targets", self.batch_sizes)):
            if vals:
                lines.append((f"batch.{name}", ",".join(str(v) for v in vals)))
        return [f"{k}\t{v}" for k, v in lines]

    def document(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


def parse_stats(text) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("\t")
        out[key] = value
    return out


class _StoreEntry:
    """A tensor store plus the sorted node ids its rows correspond to."""

    def __init__(self, store: EmbeddingStore, rows=None):
        self.store = store
        self.rows = rows          # None means identity over all graph nodes

    def locate(self, ids):
        if self.rows is None:
            return ids
        pos = np.searchsorted(self.rows, ids)
        if np.any(pos >= len(self.rows)) or np.any(self.rows[np.minimum(pos, len(self.rows) - 1)] != ids):
            raise InternalError("read of a row that was never annotated for computation")
        return pos

    def gather(self, ids):
        return self.store.gather(self.locate(ids))

    def scatter(self, ids, values):
        self.store.scatter(self.locate(ids), values)


def _ref_key_of(schedule: BlockSchedule, m: ModelGraph, producer_id) -> str:
    if m.operators[producer_id].kind == "Input":
        return INPUT_REF
    return TensorRef(schedule.assignment[producer_id], producer_id).key


def _dims_table(m: ModelGraph, schedule: BlockSchedule) -> dict:
    dims = {INPUT_REF: m.input_dim}
    for op_id, d in m.out_dims.items():
        dims[op_id] = d
    for blk in schedule.blocks:
        for ref in blk.input_refs:
            dims[ref.key] = m.input_dim if ref.key == INPUT_REF else m.out_dims[ref.op]
    return dims


def infer_layerwise(m: ModelGraph, schedule: BlockSchedule, g: CscGraph,
                    x_store: EmbeddingStore, tsets: TargetSets, budget,
                    thresholds: Thresholds, stats: RunStats,
                    store_backing="memory", workdir=None):
    """Execute the block schedule; returns the output store entry for V[depth]."""
    dims = _dims_table(m, schedule)
    stores = {INPUT_REF: _StoreEntry(x_store, None)}
    controller = BatchController(thresholds=thresholds, budget=budget)
    out_key = schedule.model_output.key

    for blk in schedule.blocks:
        layer = blk.layer
        targets = tsets.v_sets[layer]
        graph_l = tsets.graph_for_layer(g, layer) if blk.has_conv else None
        rows = None if len(targets) == g.num_nodes else targets
        for op_id in blk.outputs:
            key = TensorRef(blk.block_id, op_id).key
            n_rows = g.num_nodes if rows is None else len(rows)
            path = None
            if store_backing == "file":
                path = f"{workdir}/{key}.dgif"
            stores[key] = _StoreEntry(
                open_store(n_rows, dims[op_id], backing=store_backing, path=path), rows)

        prefix = (prefix_for_targets(graph_l, targets) if blk.has_conv
                  else np.zeros(len(targets) + 1, dtype=np.int64))
        n_convs = sum(1 for _, k, _ in blk.iter_ops() if k in ("ConvMean", "ConvAttn"))

        def plan_fn(start, end, _blk=blk, _graph=graph_l, _targets=targets):
            bt = _targets[start:end]
            bc = build_batch_csc(_graph, bt) if _blk.has_conv else trivial_batch_csc(bt)
            return bc, device.footprint(_blk, bc, dims)

        def execute_fn(bc, _blk=blk):
            _run_block_batch(m, schedule, _blk, bc, stores)

        records = controller.run_layer(layer, targets, prefix, plan_fn, execute_fn)
        for rec in records:
            stats._add_batch(layer, rec.n_targets, rec.footprint,
                             Thresholds(rec.n_t, rec.n_i), rec.oom_retries)
            stats._add_aggregations(layer, n_convs * rec.n_targets)

        for key, drop_block in schedule.drop_after.items():
            if drop_block == blk.block_id and key not in (INPUT_REF, out_key):
                entry = stores.pop(key, None)
                if entry is not None:
                    entry.store.release()
    return stores[out_key]


def _run_block_batch(m, schedule, blk, bc, stores):
    gathered = {}
    for ref in blk.input_refs:
        gathered[ref.key] = stores[ref.key].gather(bc.input_ids)
    mats = {}
    domains = blk.domains

    def operand(p, want_target_rows):
        if p in mats:
            mat = mats[p]
            if want_target_rows and domains[p] == "input":
                return mat[bc.target_pos]
            return mat
        key = _ref_key_of(schedule, m, p)
        mat = gathered[key]
        if want_target_rows:
            return mat[bc.target_pos]
        return mat

    for op_id in blk.op_ids:
        op = m.operators[op_id]
        if op.kind == "Output":
            continue
        if op.is_conv:
            mats[op_id] = eval_conv(op, bc, operand(op.inputs[0], False))
        else:
            want_targets = domains[op_id] == "target"
            mats[op_id] = eval_normal(op, [operand(p, want_targets) for p in op.inputs])

    for op_id in blk.outputs:
        mat = mats[op_id]
        if domains[op_id] == "input":
            mat = mat[bc.target_pos]
        stores[TensorRef(blk.block_id, op_id).key].scatter(bc.targets, mat)


def infer_nodewise(m: ModelGraph, g: CscGraph, x_store: EmbeddingStore, targets,
                   batch_size, budget, stats: RunStats, sampled=None):
    """Per-batch multi-hop evaluation of the unsplit model DAG (the baseline).

    Returns the output rows for `targets` (given order). Exceeding device
    capacity is a hard error here; this engine has no adaptive retry.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    targets = np.asarray(targets, dtype=np.int64)
    out = np.zeros((len(targets), m.output_dim), dtype=np.float32)

    def graph_for(layer):
        if sampled is not None and layer in sampled:
            return sampled[layer]
        return g

    for start in range(0, len(targets), batch_size):
        chunk = targets[start:start + batch_size]
        chunk_sorted = np.unique(chunk)
        need = {m.output_id: chunk_sorted}
        for op_id in reversed(m.topo_order):
            cur = need.get(op_id)
            if cur is None or m.operators[op_id].kind == "Input":
                continue
            op = m.operators[op_id]
            req = _expand(graph_for(m.layer_of[op_id]), cur) if op.is_conv else cur
            for p in op.inputs:
                need[p] = np.union1d(need[p], req) if p in need else req

        slice_bytes = 0
        inter_bytes = 0
        agg_counts = {}
        bcs = {}
        for op_id in m.topo_order:
            if op_id not in need:
                continue
            op = m.operators[op_id]
            if op.kind in ("Input", "Output"):
                continue
            inter_bytes += len(need[op_id]) * m.out_dims[op_id] * device.VALUE_BYTES
            if op.is_conv:
                bc = build_batch_csc(graph_for(m.layer_of[op_id]), need[op_id])
                bcs[op_id] = bc
                slice_bytes += (bc.num_targets + 1 + bc.num_edges) * device.ID_BYTES
                layer = m.layer_of[op_id]
                agg_counts[layer] = agg_counts.get(layer, 0) + bc.num_targets
        input_bytes = len(need[m.input_id]) * m.input_dim * device.VALUE_BYTES
        output_bytes = len(chunk) * m.output_dim * device.VALUE_BYTES
        fp = device.BatchFootprint(slice_bytes, input_bytes, inter_bytes, output_bytes)
        if fp.peak > budget.capacity:
            raise DeviceCapacityError(
                f"node-wise batch of {len(chunk)} targets needs {fp.peak} B, "
                f"over device capacity {budget.capacity} B")

        mats = {m.input_id: x_store.gather(need[m.input_id])}
        for op_id in m.topo_order:
            if op_id not in need:
                continue
            op = m.operators[op_id]
            if op.kind == "Input":
                continue
            if op.kind == "Output":
                mats[op_id] = None
                continue
            if op.is_conv:
                bc = bcs[op_id]
                p = op.inputs[0]
                h_in = mats[p][np.searchsorted(need[p], bc.input_ids)]
                mats[op_id] = eval_conv(op, bc, h_in)
            else:
                rows = need[op_id]
                operands = [mats[p][np.searchsorted(need[p], rows)] for p in op.inputs]
                mats[op_id] = eval_normal(op, operands)

        producer = m.operators[m.output_id].inputs[0]
        chunk_vals = mats[producer][np.searchsorted(need[producer], chunk)]
        out[start:start + len(chunk)] = chunk_vals

        stats._add_batch(0, len(chunk), fp)
        for layer, cnt in sorted(agg_counts.items()):
            stats._add_aggregations(layer, cnt)
    return out


@dataclass
class InferenceResult:
    output: np.ndarray            # rows aligned with the user target list
    target_ids: np.ndarray        # original-id targets, user order
    stats: RunStats
    order: NodeOrder
    schedule: BlockSchedule | None = None


def run_inference(m: ModelGraph, g: CscGraph, x_store: EmbeddingStore, *,
                  mode="full", targets=None, fanout=None, seed=0,
                  executor="layerwise", order="none", budget=None,
                  thresholds=None, batch_size=1024,
                  store_backing="memory", workdir=None) -> InferenceResult:
    """End-to-end inference: reorder, annotate, execute, de-permute.

    Output rows are in the user's target order (all nodes ascending for full
    mode), in original node ids, regardless of the internal node order.
    """
    if mode == "partial" and targets is None:
        raise ConfigError("partial mode requires a target list")
    if mode == "sampling" and (fanout is None or fanout < 1):
        raise ConfigError("sampling mode requires fanout >= 1")
    if budget is None:
        raise ConfigError("a device budget is required")
    if x_store.num_rows != g.num_nodes or x_store.dim != m.input_dim:
        raise ConfigError(f"features ({x_store.num_rows}x{x_store.dim}) do not match "
                          f"graph ({g.num_nodes} nodes) and model input dim {m.input_dim}")
    if mode == "full" or targets is None:
        user_targets = np.arange(g.num_nodes, dtype=np.int64)
    else:
        user_targets = np.asarray(targets, dtype=np.int64)
        if len(user_targets) != len(np.unique(user_targets)):
            raise ConfigError("duplicate target ids")
        if len(user_targets) and (user_targets.min() < 0 or user_targets.max() >= g.num_nodes):
            raise ConfigError("target ids out of range")

    node_order = make_order(g, order, seed)
    g_i, x_i = apply_order(g, x_store, node_order)
    internal_targets = np.sort(node_order.inv[user_targets]) if len(user_targets) else user_targets

    thresholds = thresholds or Thresholds(n_t=1024, n_i=32768)
    stats = RunStats(executor=executor, mode=mode, order=order, depth=m.depth,
                     initial_thresholds=(thresholds.n_t, thresholds.n_i)
                     if executor == "layerwise" else None)
    started = time.perf_counter()
    tsets = annotate(g_i, internal_targets, m.depth, mode, fanout, seed)
    schedule = None
    if executor == "layerwise":
        schedule = split(m)
        entry = infer_layerwise(m, schedule, g_i, x_i, tsets, budget, thresholds,
                                stats, store_backing=store_backing, workdir=workdir)
        row_ids = tsets.v_sets[m.depth if m.depth else 0]
        out_sorted = entry.gather(row_ids)
        entry.store.release()
    elif executor == "nodewise":
        row_ids = internal_targets
        out_sorted = infer_nodewise(m, g_i, x_i, internal_targets, batch_size,
                                    budget, stats, sampled=tsets.sampled)
    else:
        raise ConfigError(f"unknown executor {executor!r}")
    stats.wall_time = time.perf_counter() - started

    internal_of_user = node_order.inv[user_targets]
    pos = np.searchsorted(row_ids, internal_of_user)
    if len(user_targets):
        safe = np.minimum(pos, len(row_ids) - 1)
        if not np.array_equal(row_ids[safe], internal_of_user):
            raise InternalError("output rows do not cover the requested targets")
    output = out_sorted[pos] if len(user_targets) else out_sorted[:0]
    return InferenceResult(output=output, target_ids=user_targets, stats=stats,
                           order=node_order, schedule=schedule)
