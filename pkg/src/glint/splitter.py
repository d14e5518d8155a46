"""Partition a model DAG into per-layer ConvBlocks and plan the schedule.

Blocks are formed in three steps. First, Convs sharing a layer counter land
in the same block, one block per counter, executed in ascending order.
Second, every movable normal operator is placed so that the number of
distinct stored tensors each downstream block must read is minimized; the
per-block input counts are compared lexicographically in execution order
(earlier boundaries first), which is what lets a jump-style tail block
accept several inputs rather than collapse its fan-in upstream. Third, ties
are broken by pushing normal operators upstream (recomputing a per-node
operator downstream is cheaper than transferring an extra tensor, but on
equal transfer the upstream copy wins because it runs once per node);
residual ties pick the lexicographically smallest downstream id set.

A normal operator with no Conv descendant trails the last layer and joins
block L. Operators topologically upstream of a Conv within their own block
are tagged input-domain (evaluated on the batch's gathered input rows);
everything else is target-domain.

The cut search is exhaustive over the movable operators' feasible blocks;
model graphs have tens of operators, so exactness beats asymptotics.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

from .errors import InternalError
from .model_ir import ModelGraph

log = logging.getLogger(__name__)

INPUT_REF = "input"

_MAX_ASSIGNMENTS = 2_000_000


@dataclass(frozen=True)
class TensorRef:
    """A stored tensor: an operator output crossing block boundaries, or the
    external input matrix (block 0)."""

    block: int
    op: str

    @property
    def key(self) -> str:
        return INPUT_REF if self.block == 0 else f"b{self.block}.{self.op}"


@dataclass
class ConvBlock:
    block_id: int
    layer: int
    op_ids: list            # members, deterministic topological order
    kinds: dict             # op id -> kind
    domains: dict           # op id -> 'input' | 'target'
    input_refs: list        # TensorRefs consumed from outside, sorted by key
    outputs: list           # member op ids whose tensors are stored

    @property
    def has_conv(self) -> bool:
        return any(k in ("ConvMean", "ConvAttn") for k in self.kinds.values())

    def iter_ops(self):
        for op_id in self.op_ids:
            yield op_id, self.kinds[op_id], self.domains[op_id]

    def input_keys(self):
        return [ref.key for ref in self.input_refs]

    def output_ids(self):
        return list(self.outputs)


@dataclass
class BlockSchedule:
    blocks: list
    schema: dict            # block id -> list of TensorRefs it reads
    drop_after: dict        # ref key -> block id after which the store is released
    model_output: TensorRef
    depth: int
    assignment: dict = field(default_factory=dict)   # op id -> block id

    def block_input_counts(self) -> dict:
        return {b.block_id: len(b.input_refs) for b in self.blocks}


def _ancestor_conv_layer(m: ModelGraph) -> dict:
    """Max layer counter among Conv ancestors (0 when none), per operator."""
    cl = {}
    for op_id in m.topo_order:
        best = 0
        for p in m.operators[op_id].inputs:
            best = max(best, m.layer_of[p] if m.operators[p].is_conv else cl[p])
        cl[op_id] = best
    return cl


def _descendant_conv_layer(m: ModelGraph) -> dict:
    """Min layer counter among Conv descendants (None when none), per operator."""
    cd = {}
    cons = m.consumers()
    for op_id in reversed(m.topo_order):
        best = None
        for c in cons[op_id]:
            down = m.layer_of[c] if m.operators[c].is_conv else cd[c]
            if down is not None and (best is None or down < best):
                best = down
        cd[op_id] = best
    return cd


def feasible_blocks(m: ModelGraph) -> dict:
    """Inclusive (lo, hi) block range per operator; Input is excluded (block 0)."""
    depth = m.depth
    cl = _ancestor_conv_layer(m)
    cd = _descendant_conv_layer(m)
    ranges = {}
    for op_id in m.topo_order:
        op = m.operators[op_id]
        if op.kind == "Input":
            continue
        if op.is_conv:
            l = m.layer_of[op_id]
            ranges[op_id] = (l, l)
        elif depth == 0:
            ranges[op_id] = (0, 0)
        elif op.kind == "Output" or cd[op_id] is None:
            ranges[op_id] = (depth, depth)        # trailing tail joins block L
        else:
            ranges[op_id] = (max(1, cl[op_id]), cd[op_id])
    return ranges


def _block_of(assignment, m, op_id):
    return 0 if m.operators[op_id].kind == "Input" else assignment[op_id]


def _input_refsets(m: ModelGraph, assignment) -> dict:
    """Per block: the set of outside tensor keys its members read."""
    refs = {b: set() for b in set(assignment.values())}
    for op_id, b in assignment.items():
        for p in m.operators[op_id].inputs:
            pb = _block_of(assignment, m, p)
            if pb != b:
                refs[b].add((pb, p if pb else INPUT_REF))
    return refs


def _objective(m: ModelGraph, assignment, depth, free_ids):
    """(input counts of blocks 2..L, -upstream normal-op counts, downstream ids)."""
    refs = _input_refsets(m, assignment)
    in_counts = tuple(len(refs.get(l, ())) for l in range(2, depth + 1))
    normals = [op_id for op_id in free_ids]
    ups = []
    downs = []
    for l in range(1, depth):
        ups.append(-sum(1 for op_id in normals if assignment[op_id] <= l))
        downs.append(tuple(sorted(op_id for op_id in normals if assignment[op_id] > l)))
    return (in_counts, tuple(ups), tuple(downs))


def _enumerate_assignments(m: ModelGraph, ranges, free_ids):
    """Yield edge-monotone assignments over the free operators' ranges."""
    fixed = {op_id: lo for op_id, (lo, hi) in ranges.items() if lo == hi}
    if not free_ids:
        yield dict(fixed)
        return
    spans = [range(ranges[op_id][0], ranges[op_id][1] + 1) for op_id in free_ids]
    total = 1
    for s in spans:
        total *= len(s)
        if total > _MAX_ASSIGNMENTS:
            raise InternalError(f"cut search space exceeds {_MAX_ASSIGNMENTS} assignments")
    preds = {op_id: [p for p in m.operators[op_id].inputs
                     if m.operators[p].kind != "Input"] for op_id in m.operators}
    cons = m.consumers()
    for combo in itertools.product(*spans):
        assignment = dict(fixed)
        assignment.update(zip(free_ids, combo))
        ok = True
        for op_id in free_ids:
            b = assignment[op_id]
            if any(assignment[p] > b for p in preds[op_id]):
                ok = False
                break
            if any(assignment[c] < b for c in cons[op_id] if c in assignment):
                ok = False
                break
        if ok:
            yield assignment


def _choose_assignment(m: ModelGraph, ranges) -> dict:
    free_ids = sorted(op_id for op_id, (lo, hi) in ranges.items() if lo != hi)
    best = None
    best_key = None
    for assignment in _enumerate_assignments(m, ranges, free_ids):
        key = _objective(m, assignment, m.depth, free_ids)
        if best_key is None or key < best_key:
            best, best_key = assignment, key
    if best is None:
        raise InternalError("no valid operator-to-block assignment found")
    return best


def split(m: ModelGraph) -> BlockSchedule:
    """Partition the model into ConvBlocks and derive schema and lifetimes.

    A model with zero Convs degenerates to a single target-domain block
    holding every operator.
    """
    ranges = feasible_blocks(m)
    assignment = _choose_assignment(m, ranges)
    depth = m.depth
    block_ids = list(range(1, depth + 1)) if depth else [1]
    if depth == 0:
        assignment = {op_id: 1 for op_id in assignment}

    members = {b: [] for b in block_ids}
    for op_id in m.topo_order:
        if m.operators[op_id].kind == "Input":
            continue
        members[assignment[op_id]].append(op_id)

    cons = m.consumers()
    blocks = []
    refsets = _input_refsets(m, assignment)
    for b in block_ids:
        ops = members[b]
        kinds = {op_id: m.operators[op_id].kind for op_id in ops}
        domains = _tag_domains(m, ops, kinds)
        input_refs = sorted((TensorRef(pb, op) for pb, op in refsets.get(b, ())),
                            key=lambda r: r.key)
        outputs = []
        for op_id in ops:
            if kinds[op_id] in ("Input", "Output"):
                continue
            used_later = any(_block_of(assignment, m, c) > b for c in cons[op_id])
            is_model_out = (op_id == m.operators[m.output_id].inputs[0])
            if used_later or (is_model_out and b == block_ids[-1]):
                outputs.append(op_id)
            if not cons[op_id]:
                log.warning("operator %r has no consumer; its output is dropped "
                            "immediately after block %d", op_id, b)
        blocks.append(ConvBlock(block_id=b, layer=b if depth else 0, op_ids=ops,
                                kinds=kinds, domains=domains,
                                input_refs=input_refs, outputs=outputs))

    schema = {blk.block_id: list(blk.input_refs) for blk in blocks}
    out_producer = m.operators[m.output_id].inputs[0]
    model_output = TensorRef(assignment[out_producer], out_producer)
    drop_after = plan_lifetimes(blocks, schema)
    return BlockSchedule(blocks=blocks, schema=schema, drop_after=drop_after,
                         model_output=model_output, depth=depth, assignment=assignment)


def _tag_domains(m: ModelGraph, ops, kinds) -> dict:
    """input-domain iff the operator feeds a Conv of its own block."""
    member = set(ops)
    cons = m.consumers()
    feeds_conv = set()
    for op_id in reversed([o for o in m.topo_order if o in member]):
        if kinds[op_id] in ("ConvMean", "ConvAttn"):
            continue
        for c in cons[op_id]:
            if c in member and (kinds[c] in ("ConvMean", "ConvAttn") or c in feeds_conv):
                feeds_conv.add(op_id)
                break
    return {op_id: ("input" if op_id in feeds_conv else "target") for op_id in ops}


def plan_lifetimes(blocks, schema) -> dict:
    """Map each stored tensor ref to the last block that consumes it."""
    drop = {}
    for blk in blocks:
        for ref in schema[blk.block_id]:
            key = ref.key
            drop[key] = max(drop.get(key, blk.block_id), blk.block_id)
    for blk in blocks:
        for op_id in blk.outputs:
            key = TensorRef(blk.block_id, op_id).key
            drop.setdefault(key, blk.block_id)
    return drop


def enumerate_cuts(m: ModelGraph, l) -> list:
    """Brute-force the boundary between blocks l and l+1.

    Enumerates every topologically valid up/down assignment of the operators
    movable at this boundary (operators pinned elsewhere sit at their lowest
    feasible block; "down" means block l+1). Returns (downstream id tuple,
    crossing tensor count, movable ops placed upstream) triples; the crossing
    count is the number of distinct stored tensors block l+1 would read.
    """
    if not 1 <= l < max(m.depth, 1):
        raise ValueError(f"boundary {l} out of range for depth {m.depth}")
    ranges = feasible_blocks(m)
    movable = sorted(op_id for op_id, (lo, hi) in ranges.items() if lo <= l < hi)
    baseline = {op_id: lo for op_id, (lo, hi) in ranges.items()}
    preds = {op_id: [p for p in m.operators[op_id].inputs
                     if m.operators[p].kind != "Input"] for op_id in m.operators}
    results = []
    for downs in itertools.chain.from_iterable(
            itertools.combinations(movable, k) for k in range(len(movable) + 1)):
        down_set = set(downs)
        assignment = dict(baseline)
        for op_id in movable:
            assignment[op_id] = l + 1 if op_id in down_set else min(l, ranges[op_id][1])
        ok = True
        for op_id in m.operators:
            if m.operators[op_id].kind == "Input":
                continue
            if any(assignment[p] > assignment[op_id] for p in preds[op_id]):
                ok = False
                break
        if not ok:
            continue
        crossing = set()
        for op_id, b in assignment.items():
            if b != l + 1:
                continue
            for p in m.operators[op_id].inputs:
                pb = _block_of(assignment, m, p)
                if pb != l + 1:
                    crossing.add((pb, p))
        results.append((tuple(sorted(down_set)), len(crossing), len(movable) - len(down_set)))
    return results


def format_schedule(schedule: BlockSchedule) -> str:
    """Stable one-line-per-block rendering used by golden tests and the CLI."""
    lines = [f"schedule blocks={len(schedule.blocks)} depth={schedule.depth} "
             f"output={schedule.model_output.key}"]
    for blk in schedule.blocks:
        ops = ",".join(f"{op_id}:{blk.domains[op_id][0]}" for op_id in blk.op_ids)
        inputs = ",".join(blk.input_keys())
        outputs = ",".join(blk.outputs)
        drops = ",".join(sorted(k for k, b in schedule.drop_after.items()
                                if b == blk.block_id and k != INPUT_REF
                                and k != schedule.model_output.key))
        lines.append(f"block {blk.block_id} layer={blk.layer} ops=[{ops}] "
                     f"inputs=[{inputs}] outputs=[{outputs}] drop=[{drops}]")
    return "\n".join(lines)
