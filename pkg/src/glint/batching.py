"""Dynamic batch-size control.

Batches are consecutive runs of the ordered target list, grown until either
the target-node threshold n_t or the total-in-degree threshold n_i would be
exceeded (found by binary search on the degree prefix sums). After each
executed batch the thresholds are rescaled by r = M / M_k, where M is the
memory setpoint and M_k the batch's accounted peak; on a would-be OOM both
thresholds halve and the batch is re-derived from the same cursor position.
Thresholds carry across layers within a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .device import BatchFootprint, DeviceBudget, admit
from .errors import DeviceCapacityError

DEFAULT_NT = 1024
DEFAULT_NI = 32768

# Per-step bound on the multiplicative update; keeps a nonlinear footprint
# from oscillating while preserving the fixed point M_k == M.
RATIO_MIN = 0.5
RATIO_MAX = 4.0


@dataclass(frozen=True)
class Thresholds:
    n_t: int
    n_i: int

    def __post_init__(self):
        if self.n_t < 1 or self.n_i < 0:
            raise ValueError(f"invalid thresholds ({self.n_t}, {self.n_i})")


def next_batch(prefix, position, t: Thresholds) -> int:
    """End index j of the batch starting at `position` under thresholds `t`.

    j is maximal with j - position <= n_t and prefix[j] - prefix[position]
    <= n_i; if even one node violates n_i the singleton is returned anyway
    (progress guarantee).
    """
    n = len(prefix) - 1
    if position >= n:
        raise IndexError("cursor exhausted")
    j_nodes = min(position + t.n_t, n)
    j_edges = int(np.searchsorted(prefix, prefix[position] + t.n_i, side="right")) - 1
    j = min(j_nodes, j_edges)
    return max(j, position + 1)


def adapt(t: Thresholds, m_target, m_k) -> Thresholds:
    """Rescale thresholds by r = M/M_k, clamped to [0.5, 4] per step."""
    if m_k <= 0:
        raise ValueError("M_k must be positive")
    r = min(RATIO_MAX, max(RATIO_MIN, m_target / m_k))
    return Thresholds(max(1, round(r * t.n_t)), max(0, round(r * t.n_i)))


def on_oom(t: Thresholds) -> Thresholds:
    return Thresholds(max(1, t.n_t // 2), t.n_i // 2)


@dataclass
class BatchRecord:
    layer: int
    start: int
    end: int
    n_targets: int
    n_inputs: int
    n_edges: int
    footprint: BatchFootprint
    oom_retries: int
    n_t: int
    n_i: int


@dataclass
class BatchController:
    """Feedback-driven batch scheduler; strictly sequential per layer."""

    thresholds: Thresholds
    budget: DeviceBudget
    records: list = field(default_factory=list)

    def run_layer(self, layer, targets, prefix, plan_fn, execute_fn) -> list:
        """Partition `targets` into batches and execute each exactly once.

        plan_fn(start, end) -> (plan, BatchFootprint) must be side-effect
        free; execute_fn(plan) runs the admitted batch. Returns the records
        appended for this layer.
        """
        n = len(targets)
        made = []
        pos = 0
        while pos < n:
            retries = 0
            while True:
                end = next_batch(prefix, pos, self.thresholds)
                plan, fp = plan_fn(pos, end)
                if admit(fp, self.budget):
                    break
                if end - pos == 1:
                    raise DeviceCapacityError(
                        f"node {int(targets[pos])} alone needs {fp.peak} B, "
                        f"over device capacity {self.budget.capacity} B")
                self.thresholds = on_oom(self.thresholds)
                retries += 1
            execute_fn(plan)
            if fp.peak > 0:
                self.thresholds = adapt(self.thresholds, self.budget.target, fp.peak)
            rec = BatchRecord(layer=layer, start=pos, end=end, n_targets=end - pos,
                              n_inputs=getattr(plan, "num_inputs", end - pos),
                              n_edges=getattr(plan, "num_edges", 0),
                              footprint=fp, oom_retries=retries,
                              n_t=self.thresholds.n_t, n_i=self.thresholds.n_i)
            self.records.append(rec)
            made.append(rec)
            pos = end
        return made
