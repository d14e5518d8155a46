"""GNN models as explicit operator DAGs with named parameter tensors.

A model arrives as two files: a JSON document listing operators (id, kind,
inputs, parameter tensor names) and a binary parameter file. Convs
(ConvMean, ConvAttn) are the only cross-node operators; everything else is
pure and per-node. Each Conv carries a layer counter: 1 if it has no Conv
ancestor, else one plus the maximum counter among its Conv ancestors.

Parameter file layout (little-endian): magic ``DGIW``, version u32=1,
tensor count u32, then per tensor: name length u16, name bytes, rank u8,
dims u32 each, float32 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError
from .kernels import AttnParams, BatchCsc, build_batch_csc

PARAMS_MAGIC = b"DGIW"
PARAMS_VERSION = 1

CONV_KINDS = ("ConvMean", "ConvAttn")
NORMAL_KINDS = ("Linear", "ReLU", "LeakyReLU", "Add", "Concat", "Norm", "DropoutIdentity")
MARKER_KINDS = ("Input", "Output")
ALL_KINDS = CONV_KINDS + NORMAL_KINDS + MARKER_KINDS

_SINGLE_INPUT = {"ReLU", "LeakyReLU", "Norm", "DropoutIdentity", "Linear",
                 "ConvMean", "ConvAttn", "Output"}


@dataclass(frozen=True)
class Operator:
    op_id: str
    kind: str
    inputs: tuple
    params: dict = field(default_factory=dict)

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS


@dataclass(frozen=True)
class ModelGraph:
    """Validated operator DAG with layer counters and inferred widths."""

    operators: dict
    topo_order: tuple
    input_id: str
    output_id: str
    input_dim: int
    out_dims: dict
    layer_of: dict
    depth: int

    @property
    def output_dim(self) -> int:
        return self.out_dims[self.output_id]

    def consumers(self) -> dict:
        cons = {op_id: [] for op_id in self.operators}
        for op in self.operators.values():
            for p in op.inputs:
                cons[p].append(op.op_id)
        return cons


def _find_cycle(operators) -> list:
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {op_id: WHITE for op_id in operators}
    parent = {}
    for root in operators:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(operators[root].inputs))]
        color[root] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if p not in operators:
                    continue
                if color[p] == GRAY:
                    cycle = [p, node]
                    cur = node
                    while cur != p:
                        cur = parent[cur]
                        cycle.append(cur)
                    return cycle[::-1]
                if color[p] == WHITE:
                    color[p] = GRAY
                    parent[p] = node
                    stack.append((p, iter(operators[p].inputs)))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return []


def topo_sort(operators) -> tuple:
    """Topological order (producers first), deterministic; names any cycle."""
    indeg = {op_id: 0 for op_id in operators}
    cons = {op_id: [] for op_id in operators}
    for op in operators.values():
        seen = set()
        for p in op.inputs:
            if p not in operators:
                raise FormatError(f"operator {op.op_id!r} references unknown input {p!r}")
            cons[p].append(op.op_id)
            if p not in seen:
                indeg[op.op_id] += 1
                seen.add(p)
    ready = sorted(op_id for op_id, d in indeg.items() if d == 0)
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        fresh = []
        for v in set(cons[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                fresh.append(v)
        ready = sorted(ready + fresh)
    if len(order) != len(operators):
        cycle = _find_cycle(operators)
        raise FormatError("cycle detected: " + " -> ".join(cycle))
    return tuple(order)


def assign_layers(operators, topo_order=None) -> dict:
    """Layer counter per Conv: 1 + max counter among Conv ancestors, else 1."""
    order = topo_order if topo_order is not None else topo_sort(operators)
    reach = {}
    layers = {}
    for op_id in order:
        op = operators[op_id]
        best = 0
        for p in op.inputs:
            best = max(best, layers[p] if operators[p].is_conv else reach[p])
        reach[op_id] = best
        if op.is_conv:
            layers[op_id] = best + 1
    return layers


def _op_output_dim(op: Operator, in_dims, all_dims_of):
    """Output width of one operator; raises naming both ends on a mismatch."""
    k = op.kind

    def fail(why):
        raise FormatError(f"dimension mismatch at {op.op_id!r}: {why}")

    if k == "Input":
        raise AssertionError("Input handled by caller")
    if k in ("ReLU", "LeakyReLU", "Norm", "DropoutIdentity", "Output"):
        return in_dims[0]
    if k == "Add":
        if len(set(in_dims)) != 1:
            fail(f"Add over unequal widths {in_dims} from {list(op.inputs)}")
        return in_dims[0]
    if k == "Concat":
        return sum(in_dims)
    if k == "Linear" or k == "ConvMean":
        w = op.params["weight"]
        if w.ndim != 2:
            fail(f"weight must be rank 2, got shape {w.shape}")
        if w.shape[1] != in_dims[0]:
            fail(f"weight expects width {w.shape[1]} but producer {op.inputs[0]!r} "
                 f"yields {in_dims[0]}")
        b = op.params.get("bias")
        if b is not None and b.shape != (w.shape[0],):
            fail(f"bias shape {b.shape} != ({w.shape[0]},)")
        return int(w.shape[0])
    if k == "ConvAttn":
        ap = AttnParams(op.params["weight"], op.params["attn"])
        try:
            ap.validate()
        except ValueError as e:
            fail(str(e))
        if ap.weight.shape[2] != in_dims[0]:
            fail(f"attention weight expects width {ap.weight.shape[2]} but producer "
                 f"{op.inputs[0]!r} yields {in_dims[0]}")
        return int(ap.num_heads * ap.head_dim)
    raise FormatError(f"unknown operator kind {k!r} at {op.op_id!r}")


def build_model(operators, input_dim, output_id) -> ModelGraph:
    """Validate an operator dict and assemble the ModelGraph."""
    inputs = [o for o in operators.values() if o.kind == "Input"]
    outputs = [o for o in operators.values() if o.kind == "Output"]
    if len(inputs) != 1:
        raise FormatError(f"model must have exactly one Input operator, found {len(inputs)}")
    if len(outputs) != 1:
        raise FormatError(f"model must have exactly one Output operator, found {len(outputs)}")
    if output_id not in operators or operators[output_id].kind != "Output":
        raise FormatError(f"document output field {output_id!r} does not name an Output operator")
    for op in operators.values():
        if op.kind not in ALL_KINDS:
            raise FormatError(f"unknown operator kind {op.kind!r} at {op.op_id!r}")
        if op.kind in _SINGLE_INPUT and len(op.inputs) != 1:
            raise FormatError(f"{op.kind} operator {op.op_id!r} takes exactly one input, "
                              f"got {len(op.inputs)}")
        if op.kind == "Input" and op.inputs:
            raise FormatError(f"Input operator {op.op_id!r} cannot have inputs")
    order = topo_sort(operators)
    if input_dim <= 0:
        raise FormatError(f"input_dim must be positive, got {input_dim}")
    out_dims = {}
    for op_id in order:
        op = operators[op_id]
        if op.kind == "Input":
            out_dims[op_id] = int(input_dim)
        else:
            out_dims[op_id] = _op_output_dim(op, [out_dims[p] for p in op.inputs], out_dims)
    layers = assign_layers(operators, order)
    depth = max(layers.values(), default=0)
    return ModelGraph(operators=dict(operators), topo_order=order,
                      input_id=inputs[0].op_id, output_id=output_id,
                      input_dim=int(input_dim), out_dims=out_dims,
                      layer_of=layers, depth=depth)


# -- documents ---------------------------------------------------------------


def model_from_document(doc: dict, tensors: dict) -> ModelGraph:
    for key in ("version", "input_dim", "operators", "output"):
        if key not in doc:
            raise FormatError(f"model document missing field {key!r}")
    if doc["version"] != 1:
        raise FormatError(f"unsupported model document version {doc['version']}")
    operators = {}
    for entry in doc["operators"]:
        op_id = entry["id"]
        if op_id in operators:
            raise FormatError(f"duplicate operator id {op_id!r}")
        params = {}
        for role, name in entry.get("params", {}).items():
            if name not in tensors:
                raise FormatError(f"operator {op_id!r} references missing parameter {name!r}")
            params[role] = tensors[name]
        operators[op_id] = Operator(op_id=op_id, kind=entry["kind"],
                                    inputs=tuple(entry.get("inputs", ())), params=params)
    return build_model(operators, doc["input_dim"], doc["output"])


def parse_model(model_path, params_path) -> ModelGraph:
    tensors = load_params(params_path)
    try:
        with open(model_path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"model document is not valid JSON: {e}") from e
    return model_from_document(doc, tensors)


def model_document(m: ModelGraph) -> dict:
    """JSON-able document; parameter names are derived as <op>.<role>."""
    ops = []
    for op_id in m.topo_order:
        op = m.operators[op_id]
        ops.append({
            "id": op.op_id,
            "kind": op.kind,
            "inputs": list(op.inputs),
            "params": {role: f"{op.op_id}.{role}" for role in sorted(op.params)},
        })
    return {"version": 1, "input_dim": m.input_dim, "operators": ops, "output": m.output_id}


def model_tensors(m: ModelGraph) -> dict:
    return {f"{op.op_id}.{role}": op.params[role]
            for op in m.operators.values() for role in sorted(op.params)}


def save_model(m: ModelGraph, model_path, params_path):
    with open(model_path, "w") as f:
        json.dump(model_document(m), f, indent=1, sort_keys=False)
        f.write("\n")
    save_params(model_tensors(m), params_path)


def save_params(tensors: dict, path):
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<II", PARAMS_VERSION, len(tensors)))
        for name in sorted(tensors):
            data = np.ascontiguousarray(tensors[name], dtype=np.float32)
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())


def load_params(path) -> dict:
    tensors = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PARAMS_MAGIC:
            raise FormatError(f"bad parameter magic {magic!r} at offset 0")
        version, count = struct.unpack("<II", f.read(8))
        if version != PARAMS_VERSION:
            raise FormatError(f"unsupported parameter version {version} at offset 4")
        for _ in range(count):
            raw = f.read(2)
            if len(raw) != 2:
                raise FormatError("truncated parameter file at tensor name length")
            (name_len,) = struct.unpack("<H", raw)
            name = f.read(name_len).decode()
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = f.read(4 * n)
            if len(data) != 4 * n:
                raise FormatError(f"truncated parameter data for tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    return tensors


# -- evaluation --------------------------------------------------------------


def eval_conv(op: Operator, bc: BatchCsc, h_in) -> np.ndarray:
    """One Conv on one batch: aggregate over neighbors-plus-self, then transform."""
    if op.kind == "ConvMean":
        agg = kernels.agg_mean(bc, h_in)
        return kernels.linear(agg, op.params["weight"], op.params.get("bias"))
    if op.kind == "ConvAttn":
        return kernels.agg_attn(bc, h_in, AttnParams(op.params["weight"], op.params["attn"]))
    raise ValueError(f"not a conv: {op.kind}")


def eval_normal(op: Operator, input_mats) -> np.ndarray:
    if op.kind == "Linear":
        return kernels.linear(input_mats[0], op.params["weight"], op.params.get("bias"))
    if op.kind == "Concat":
        return kernels.concat(input_mats)
    if op.kind in kernels.ELEMENTWISE_KINDS:
        return kernels.elementwise(op.kind, input_mats)
    raise ValueError(f"not a normal operator: {op.kind}")


def eval_reference(m: ModelGraph, g, x) -> np.ndarray:
    """Whole-graph single-pass evaluation; the test oracle for both engines."""
    x_arr = x.to_array() if hasattr(x, "to_array") else np.asarray(x, dtype=np.float32)
    if x_arr.shape != (g.num_nodes, m.input_dim):
        raise FormatError(f"features {x_arr.shape} do not match graph/model "
                          f"({g.num_nodes}, {m.input_dim})")
    bc = build_batch_csc(g, np.arange(g.num_nodes, dtype=np.int64))
    mats = {}
    for op_id in m.topo_order:
        op = m.operators[op_id]
        if op.kind == "Input":
            mats[op_id] = x_arr
        elif op.kind == "Output":
            mats[op_id] = mats[op.inputs[0]]
        elif op.is_conv:
            mats[op_id] = eval_conv(op, bc, mats[op.inputs[0]])
        else:
            mats[op_id] = eval_normal(op, [mats[p] for p in op.inputs])
    return mats[m.output_id]
