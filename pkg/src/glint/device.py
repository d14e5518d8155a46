"""Deterministic device model: memory accountant and transfer meter.

The computing device is modeled, not measured: a batch's peak memory is the
sum of its graph slice, gathered input tensors, every operator output
materialized by the block, and the dumped output rows, all computable from
the batch plan alone. Intermediate bytes are the conservative sum over all
operator outputs (no intra-block liveness). This accountant is the single
source of truth for the batch-size controller's feedback signal.

Sizing rules (bytes): the graph slice is (|targets|+1 + batch_edges) * 8;
each distinct input tensor costs |input ids| * dim * 4 (a shared input node
is counted once per batch per tensor); operator outputs cost rows * dim * 4
with rows = |input ids| for input-domain operators and |targets| otherwise.
An empty batch costs zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

ID_BYTES = 8
VALUE_BYTES = 4


@dataclass(frozen=True)
class DeviceBudget:
    """Device capacity plus the controller setpoint at 90% of it."""

    capacity: int

    def __post_init__(self):
        if self.target <= 0 or self.target >= self.capacity:
            raise ValueError(f"capacity {self.capacity} leaves no valid setpoint")

    @property
    def target(self) -> int:
        return int(0.9 * self.capacity)


@dataclass(frozen=True)
class BatchFootprint:
    graph_slice_bytes: int
    input_bytes: int
    intermediate_bytes: int
    output_bytes: int

    @property
    def peak(self) -> int:
        return (self.graph_slice_bytes + self.input_bytes
                + self.intermediate_bytes + self.output_bytes)

    @property
    def transfer_bytes(self) -> int:
        """Host-to-device plus device-to-host traffic; intermediates stay on device."""
        return self.graph_slice_bytes + self.input_bytes + self.output_bytes


ZERO_FOOTPRINT = BatchFootprint(0, 0, 0, 0)


def footprint(block, bc, dims) -> BatchFootprint:
    """Peak-memory model of executing `block` on batch `bc`.

    `block` exposes member (op_id, kind, domain) triples via iter_ops(),
    input ref keys via input_keys(), stored outputs via output_ids(), and
    has_conv; `dims` maps op ids and ref keys to embedding widths.
    """
    n_t = bc.num_targets
    if n_t == 0:
        return ZERO_FOOTPRINT
    n_i = bc.num_inputs
    slice_bytes = (n_t + 1 + bc.num_edges) * ID_BYTES if block.has_conv else 0
    input_bytes = sum(n_i * dims[key] * VALUE_BYTES for key in block.input_keys())
    inter_bytes = 0
    for op_id, kind, domain in block.iter_ops():
        if kind in ("Input", "Output"):
            continue
        rows = n_i if domain == "input" else n_t
        inter_bytes += rows * dims[op_id] * VALUE_BYTES
    output_bytes = sum(n_t * dims[op_id] * VALUE_BYTES for op_id in block.output_ids())
    return BatchFootprint(slice_bytes, input_bytes, inter_bytes, output_bytes)


def admit(fp: BatchFootprint, budget: DeviceBudget) -> bool:
    """True when the batch fits; the boundary peak == capacity is admitted."""
    return fp.peak <= budget.capacity


def meter_transfer(fp: BatchFootprint) -> int:
    return fp.transfer_bytes
