"""Render run-statistics figures to files alongside the delimited stats.

Consumes the tab-delimited stats document emitted by an inference run and
writes PNG figures (threshold trajectory, per-batch footprint against the
memory setpoint, per-layer traffic) plus a per-batch CSV extract.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import FormatError


def _ints(stats, key):
    raw = stats.get(key, "")
    return [int(v) for v in raw.split(",") if v] if raw else []


def _layer_series(stats, field):
    out = {}
    for key, value in stats.items():
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "layer" and parts[2] == field:
            out[int(parts[1])] = int(value)
    return dict(sorted(out.items()))


def render_figures(stats: dict, out_dir, prefix="run", budget_capacity=None) -> list:
    """Write figures for one stats document; returns the created paths."""
    if stats.get("schema") != "glint-stats-v1":
        raise FormatError(f"not a stats document (schema={stats.get('schema')!r})")
    os.makedirs(out_dir, exist_ok=True)
    made = []

    footprints = _ints(stats, "batch.footprint_bytes")
    transfers = _ints(stats, "batch.transfer_bytes")
    sizes = _ints(stats, "batch.targets")

    trajectory = stats.get("thresholds.trajectory", "")
    if trajectory:
        nts, nis = [], []
        for item in trajectory.split(";"):
            _, nt, ni = item.split(":")
            nts.append(int(nt))
            nis.append(int(ni))
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(nts, label="node threshold n_t", marker="o", markersize=3)
        ax.plot(nis, label="edge threshold n_i", marker="s", markersize=3)
        ax.set_xlabel("batch index")
        ax.set_ylabel("threshold")
        ax.set_yscale("log")
        ax.set_title("Adaptive batch thresholds")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_thresholds.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)

    if footprints:
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(footprints, label="batch footprint", marker="o", markersize=3)
        if budget_capacity:
            ax.axhline(budget_capacity, color="tab:red", linestyle="--", label="capacity")
            ax.axhline(int(0.9 * budget_capacity), color="tab:orange",
                       linestyle=":", label="setpoint M")
        ax.set_xlabel("batch index")
        ax.set_ylabel("bytes")
        ax.set_title("Accounted peak memory per batch")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_footprint.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)

    transfer_by_layer = _layer_series(stats, "transfer_bytes")
    if transfer_by_layer:
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar([str(l) for l in transfer_by_layer], list(transfer_by_layer.values()),
               color="tab:blue")
        ax.set_xlabel("layer")
        ax.set_ylabel("transfer bytes")
        ax.set_title("Traffic per layer")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_transfer.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)

    if footprints:
        path = os.path.join(out_dir, f"{prefix}_batches.csv")
        layers = _ints(stats, "batch.layer")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["batch", "layer", "targets", "footprint_bytes", "transfer_bytes"])
            for i, fp in enumerate(footprints):
                w.writerow([i,
                            layers[i] if i < len(layers) else "",
                            sizes[i] if i < len(sizes) else "",
                            fp,
                            transfers[i] if i < len(transfers) else ""])
        made.append(path)
    return made
