"""Command-line surface: gen, split, reorder, infer, validate, report."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import model_ir, report, reorder, splitter, storage, synth
from .batching import DEFAULT_NI, DEFAULT_NT, Thresholds
from .device import DeviceBudget
from .errors import EXIT_FORMAT, EXIT_INTERNAL, EXIT_OK, ConfigError, FormatError, GlintError
from .executor import parse_stats, run_inference

_MEM_UNITS = {"": 1, "B": 1, "KIB": 1024, "MIB": 1024 ** 2, "GIB": 1024 ** 3}


def parse_mem(text) -> int:
    """'65536', '64KiB', '16MiB', '2GiB' -> bytes."""
    t = str(text).strip()
    for unit in sorted(_MEM_UNITS, key=len, reverse=True):
        if unit and t.upper().endswith(unit):
            try:
                return int(float(t[: -len(unit)]) * _MEM_UNITS[unit])
            except ValueError as e:
                raise ConfigError(f"bad memory size {text!r}") from e
    try:
        return int(t)
    except ValueError as e:
        raise ConfigError(f"bad memory size {text!r}") from e


def read_targets(path) -> np.ndarray:
    try:
        with open(path) as f:
            ids = [int(line) for line in f if line.strip()]
    except OSError as e:
        raise ConfigError(f"cannot read targets file {path}: {e}") from e
    except ValueError as e:
        raise FormatError(f"targets file {path} has a non-integer line: {e}") from e
    return np.asarray(ids, dtype=np.int64)


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="glint",
                                  description="Layer-wise GNN inference engine")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic graph, features, and model")
    p.add_argument("--kind", required=True, choices=synth.GRAPH_KINDS)
    p.add_argument("--nodes", type=int, help="node count (regular, powerlaw, path)")
    p.add_argument("--degree", type=int, help="in-degree (regular)")
    p.add_argument("--blocks", type=int, help="block count (sbm)")
    p.add_argument("--block-size", type=int, help="nodes per block (sbm)")
    p.add_argument("--p-in", type=float, help="intra-block edge probability (sbm)")
    p.add_argument("--p-out", type=float, help="inter-block edge probability (sbm)")
    p.add_argument("--model", default="gcn2", choices=synth.MODEL_KINDS)
    p.add_argument("--dim", type=int, default=8, help="input feature width")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--classes", type=int, default=4, help="output width")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("split", help="print the ConvBlock schedule of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)

    p = sub.add_parser("reorder", help="renumber a graph and its features")
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--order", required=True, choices=("rcmk", "degree", "random", "none"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-graph", required=True)
    p.add_argument("--out-features", required=True)
    p.add_argument("--out-perm", required=True)

    p = sub.add_parser("infer", help="run inference end to end")
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--mode", default="full", choices=("full", "partial", "sampling"))
    p.add_argument("--targets", help="file of node ids, one per line (partial mode)")
    p.add_argument("--fanout", type=int, help="sampled in-neighbors per node (sampling mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--executor", default="layerwise", choices=("layerwise", "nodewise"))
    p.add_argument("--order", default="none", choices=("rcmk", "degree", "random", "none"))
    p.add_argument("--device-mem", default="64MiB", help="device capacity (B/KiB/MiB/GiB)")
    p.add_argument("--init-nt", type=int, default=DEFAULT_NT,
                   help="initial node-count threshold")
    p.add_argument("--init-ni", type=int, default=DEFAULT_NI,
                   help="initial edge-count threshold")
    p.add_argument("--batch-size", type=int, default=1024,
                   help="fixed batch size for the node-wise executor")
    p.add_argument("--store-backing", default="memory", choices=("memory", "file"),
                   help="backing for intermediate embedding stores")
    p.add_argument("--workdir", help="directory for file-backed intermediate stores")
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--stats", help="stats document path (default: <out>.stats.tsv)")
    p.add_argument("--figures", help="also render figures into this directory")

    p = sub.add_parser("validate", help="check file formats and model invariants")
    p.add_argument("--graph")
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--params")

    p = sub.add_parser("report", help="render figures from a stats document")
    p.add_argument("--stats", required=True, nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--device-mem", help="draw capacity/setpoint lines at this size")

    return top


def cmd_gen(args) -> int:
    params = {}
    if args.kind in ("regular", "powerlaw", "path"):
        if args.nodes is None:
            raise ConfigError(f"--nodes is required for kind {args.kind}")
        params["n"] = args.nodes
        if args.kind == "regular":
            if args.degree is None:
                raise ConfigError("--degree is required for kind regular")
            params["d"] = args.degree
    else:
        for name, val in (("blocks", args.blocks), ("size", args.block_size),
                          ("p_in", args.p_in), ("p_out", args.p_out)):
            if val is None:
                raise ConfigError(f"--{name.replace('_', '-')} is required for kind sbm")
            params[name] = val
    g = synth.gen_graph(args.kind, seed=args.seed, **params)
    feats = synth.gen_features(g.num_nodes, args.dim, args.seed)
    model = synth.build_named_model(args.model, args.dim, args.hidden, args.classes,
                                    seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    storage.save_graph(g, os.path.join(args.out_dir, "graph.dgig"))
    storage.save_matrix(feats, os.path.join(args.out_dir, "features.dgif"))
    model_ir.save_model(model, os.path.join(args.out_dir, "model.json"),
                        os.path.join(args.out_dir, "params.dgiw"))
    manifest = {"kind": args.kind, "params": params, "model": args.model,
                "nodes": g.num_nodes, "edges": g.num_edges,
                "dim": args.dim, "hidden": args.hidden, "classes": args.classes,
                "seed": args.seed}
    with open(os.path.join(args.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"wrote graph ({g.num_nodes} nodes, {g.num_edges} edges), features, "
          f"model '{args.model}' to {args.out_dir}")
    return EXIT_OK


def cmd_split(args) -> int:
    m = model_ir.parse_model(args.model, args.params)
    print(splitter.format_schedule(splitter.split(m)))
    return EXIT_OK


def cmd_reorder(args) -> int:
    g = storage.load_graph(args.graph)
    x = storage.load_features(args.features)
    order = reorder.make_order(g, args.order, args.seed)
    g2, x2 = reorder.apply_order(g, x, order)
    storage.save_graph(g2, args.out_graph)
    if x2 is x:
        storage.save_features(x, args.out_features)
    else:
        storage.save_features(x2, args.out_features)
    reorder.save_order(order, args.out_perm)
    print(f"reordered {g.num_nodes} nodes with {args.order}")
    return EXIT_OK


def cmd_infer(args) -> int:
    if args.mode == "partial" and not args.targets:
        raise ConfigError("--mode partial requires --targets")
    if args.mode == "sampling" and not args.fanout:
        raise ConfigError("--mode sampling requires --fanout")
    if args.store_backing == "file" and not args.workdir:
        raise ConfigError("--store-backing file requires --workdir")
    g = storage.load_graph(args.graph)
    x = storage.load_features(args.features)
    m = model_ir.parse_model(args.model, args.params)
    targets = read_targets(args.targets) if args.targets else None
    budget = DeviceBudget(parse_mem(args.device_mem))
    res = run_inference(m, g, x, mode=args.mode, targets=targets, fanout=args.fanout,
                        seed=args.seed, executor=args.executor, order=args.order,
                        budget=budget,
                        thresholds=Thresholds(args.init_nt, args.init_ni),
                        batch_size=args.batch_size,
                        store_backing=args.store_backing, workdir=args.workdir)
    storage.save_matrix(res.output, args.out)
    stats_path = args.stats or f"{args.out}.stats.tsv"
    with open(stats_path, "w") as f:
        f.write(res.stats.document())
    print(f"wrote {len(res.output)} output rows to {args.out}; stats to {stats_path}",
          file=sys.stderr)
    print(f"elapsed {res.stats.wall_time:.3f}s, {res.stats.batches} batches, "
          f"{res.stats.total_transfer} transfer bytes", file=sys.stderr)
    if args.figures:
        made = report.render_figures(parse_stats(res.stats.document()), args.figures,
                                     prefix=args.executor, budget_capacity=budget.capacity)
        print("figures: " + ", ".join(made), file=sys.stderr)
    return EXIT_OK


def _check(name, fn, results):
    try:
        detail = fn()
        results.append((name, True, detail or "ok"))
    except GlintError as e:
        results.append((name, False, str(e)))
    except Exception as e:  # validation reports, never crashes
        results.append((name, False, f"{type(e).__name__}: {e}"))


def cmd_validate(args) -> int:
    results = []
    g = None
    if args.graph:
        def load_g():
            nonlocal g
            g = storage.load_graph(args.graph)
            return f"{g.num_nodes} nodes, {g.num_edges} edges"
        _check("graph.format", load_g, results)
    if args.features:
        def load_x():
            x = storage.load_features(args.features)
            detail = f"{x.num_rows} rows x {x.dim}"
            if g is not None and x.num_rows != g.num_nodes:
                raise FormatError(f"feature rows {x.num_rows} != graph nodes {g.num_nodes}")
            return detail
        _check("features.format", load_x, results)
    if args.model or args.params:
        if not (args.model and args.params):
            raise ConfigError("--model and --params must be given together")
        def load_m():
            m = model_ir.parse_model(args.model, args.params)
            return (f"{len(m.operators)} operators, depth {m.depth}, "
                    f"dims {m.input_dim}->{m.output_dim}")
        _check("model.format", load_m, results)

    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not results:
        raise ConfigError("nothing to validate; pass --graph/--features/--model/--params")
    return EXIT_OK


def cmd_report(args) -> int:
    capacity = parse_mem(args.device_mem) if args.device_mem else None
    for i, path in enumerate(args.stats):
        try:
            with open(path) as f:
                stats = parse_stats(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read stats file {path}: {e}") from e
        prefix = os.path.splitext(os.path.basename(path))[0] or f"run{i}"
        made = report.render_figures(stats, args.out_dir, prefix=prefix,
                                     budget_capacity=capacity)
        for p in made:
            print(p)
    return EXIT_OK


_COMMANDS = {"gen": cmd_gen, "split": cmd_split, "reorder": cmd_reorder,
             "infer": cmd_infer, "validate": cmd_validate, "report": cmd_report}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except GlintError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT if isinstance(e, (EOFError,)) else 2
    except Exception as e:  # pragma: no cover - internal invariant escape hatch
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
