"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 input validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import make_toy_dataset
from .latency import LatencyTable, load_latency_table, synthesize_table
from .search import (SearchConfig, deployment_plan, derive_and_retrain, history_to_tsv, init_state, load_config,
                     load_state_into, run_search, save_state)
from .simulator import PlanError, cloud_only_plan, load_plan, simulate, trace_to_tsv
from .topology import TopologyError, load_topology

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3
OUT_ENV = "SPLITNAS_OUT"

log = logging.getLogger("splitnas")


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "splitnas-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(loader, path, what):
    if path is None:
        raise InputError(f"missing {what}")
    if not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    try:
        return loader(path)
    except (TopologyError, PlanError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise InputError(f"invalid {what} {path}: {e}") from None


def _config(args) -> SearchConfig:
    cfg = _load(load_config, args.config, "config") if args.config else SearchConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "tconst", None) is not None:
        overrides["t_const"] = args.tconst
    if overrides:
        try:
            cfg = SearchConfig.from_dict({**cfg.to_dict(), **overrides})
        except ValueError as e:
            raise InputError(str(e)) from None
    args.resolved_config = cfg
    return cfg


def _table(args, topo, cfg) -> tuple[LatencyTable, bool]:
    if args.latency_table:
        return _load(load_latency_table, args.latency_table, "latency table"), False
    if not args.synthesize_table:
        raise InputError("provide --latency-table or --synthesize-table")
    return synthesize_table(topo, cfg.num_layers, cfg.shape, cfg.layer_candidates(), cfg.ms_per_mac), True


INPUT_FLAGS = ("topology", "config", "latency_table", "plan", "state")


def _write_manifest(args, out: Path, started: str):
    cfg = getattr(args, "resolved_config", None)
    inputs = {name: getattr(args, name, None) for name in INPUT_FLAGS}
    doc = {
        "command": args.command,
        "argv": list(args.argv),
        "config": cfg.to_dict() if cfg else None,
        "synthesized_table": bool(getattr(args, "synthesize_table", False)) and not inputs["latency_table"],
        "inputs": {name: {"path": str(p), "sha256": _digest(p)} for name, p in inputs.items() if p},
        "seed": cfg.seed if cfg else getattr(args, "seed", None),
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    _atomic_write(out / "manifest.json", json.dumps(doc, indent=2) + "\n")


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _init_state(topo, table, cfg):
    try:
        return init_state(topo, table, cfg)
    except (KeyError, ValueError, TopologyError) as e:
        raise InputError(str(e)) from None


# ------------------------------------------------------------------ commands


def cmd_search(args) -> int:
    topo = _load(load_topology, args.topology, "topology")
    cfg = _config(args)
    table, synthesized = _table(args, topo, cfg)
    out = _out_dir(args)
    dataset = make_toy_dataset(cfg.data_seed, cfg.n_train, cfg.n_val, cfg.image_size, cfg.channels, cfg.num_classes)
    state = _init_state(topo, table, cfg)
    run_search(dataset, topo, table, cfg, state)
    report = derive_and_retrain(state, dataset, cfg)
    plan = deployment_plan(state, report.architecture)
    if synthesized:
        _atomic_write(out / "latency_table.tsv", table.to_tsv())
    _atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=2) + "\n")
    _atomic_write(out / "plan.json", plan.to_json())
    _atomic_write(out / "history.tsv", history_to_tsv(report.history))
    doc = report.to_dict()
    doc["assignment"] = state.assignment.to_dict()
    _atomic_write(out / "report.json", json.dumps(doc, indent=2) + "\n")
    tmp = out / "state.tmp.npz"
    save_state(state, tmp)
    os.replace(tmp, out / "state.npz")
    print(f"architecture: {' '.join(report.architecture[n] for n in sorted(report.architecture))}")
    print(f"expected latency {report.expected_latency:.3f} ms, simulated {report.simulated_latency:.3f} ms, "
          f"T_Const {cfg.t_const:.3f} ms, val accuracy {report.val_accuracy:.3f}")
    print(f"outputs written to {out}")
    return EXIT_OK


def cmd_derive(args) -> int:
    topo = _load(load_topology, args.topology, "topology")
    cfg = _config(args)
    table, _ = _table(args, topo, cfg)
    out = _out_dir(args)
    state = _init_state(topo, table, cfg)
    _load(lambda p: load_state_into(state, p), args.state, "saved state")
    arch = state.net.architecture()
    plan = deployment_plan(state, arch)
    _atomic_write(out / "plan.json", plan.to_json())
    print("architecture: " + " ".join(arch[n] for n in sorted(arch)))
    print(f"simulated latency {simulate(plan).completion:.3f} ms")
    return EXIT_OK


def cmd_simulate(args) -> int:
    plan = _load(load_plan, args.plan, "plan")
    res = simulate(plan)
    print(f"completion latency: {res.completion:.3f} ms")
    if args.trace:
        _atomic_write(Path(args.trace), trace_to_tsv(res.trace))
    return EXIT_OK


def cmd_compare(args) -> int:
    plan = _load(load_plan, args.plan, "plan")
    topo = _load(load_topology, args.topology, "topology")
    if topo.to_dict() != plan.topology.to_dict():
        raise InputError("plan was built for a different topology")
    table = _load(load_latency_table, args.latency_table, "latency table") if args.latency_table else None
    split = simulate(plan).completion
    cloud = simulate(cloud_only_plan(plan, table)).completion
    diff = 0.0 if cloud == split else (cloud - split) / cloud * 100.0
    print(f"split deployment: {split:.3f} ms")
    print(f"cloud only:       {cloud:.3f} ms")
    print(f"reduction vs cloud: {diff:.1f}%")
    return EXIT_OK


def cmd_gen_table(args) -> int:
    topo = _load(load_topology, args.topology, "topology")
    cfg = _config(args)
    ms_per_mac = args.ms_per_mac if args.ms_per_mac is not None else cfg.ms_per_mac
    table = synthesize_table(topo, cfg.num_layers, cfg.shape, cfg.layer_candidates(), ms_per_mac)
    text = table.to_tsv()
    if args.output:
        _atomic_write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splitnas", description="Joint architecture search and multi-split deployment over edge networks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./splitnas-out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--verbose", "-v", action="store_true")

    def space(sp):
        sp.add_argument("--topology", required=True)
        sp.add_argument("--config")
        sp.add_argument("--latency-table")
        sp.add_argument("--synthesize-table", action="store_true")

    s = sub.add_parser("search", help="run warm-up, search and retraining")
    space(s)
    common(s)
    s.add_argument("--tconst", type=float, help="override the latency constraint (ms)")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("derive", help="compact model and plan from a saved search state")
    space(s)
    common(s)
    s.add_argument("--state", required=True)
    s.set_defaults(func=cmd_derive)

    s = sub.add_parser("simulate", help="simulate one inference over a plan")
    common(s)
    s.add_argument("--plan", required=True)
    s.add_argument("--trace", help="write the event trace as TSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", help="split plan against cloud-only execution")
    common(s)
    s.add_argument("--plan", required=True)
    s.add_argument("--topology", required=True)
    s.add_argument("--latency-table")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gen-table", help="emit a synthetic latency table")
    common(s)
    s.add_argument("--topology", required=True)
    s.add_argument("--config")
    s.add_argument("--ms-per-mac", type=float)
    s.add_argument("--output", "-o")
    s.set_defaults(func=cmd_gen_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        code = args.func(args)
        _write_manifest(args, _out_dir(args), started)
        return code
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (TopologyError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
