"""Command-line entry point: ``fedcd {simulate,serve,join,gen-data,score}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from fedcd.config import ConfigError, ExperimentConfig, dump_config, load_config
from fedcd.evalkit import MetricsReport, metrics_row
from fedcd.experiment import rows_to_csv, run_experiment
from fedcd.federation.protocol import ProtocolError
from fedcd.localsolver import DivergenceError, extract_dag
from fedcd.synthgen import (load_client_csvs, load_edge_list, make_scenario, save_client_csvs,
                            save_edge_list)

log = logging.getLogger("fedcd")


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    for flag, key in (("seed", "federation.seed"), ("mode", "federation.mode"),
                      ("repetitions", "experiment.repetitions"), ("out", "experiment.output_dir"),
                      ("port", "federation.port"), ("host", "federation.host")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg)
    print(json.dumps({"csv": result["csv"], "summary": result["summary"]}, indent=2))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    gt, datasets = make_scenario(cfg.scenario)
    paths = save_client_csvs(datasets, cfg.output_dir)
    truth = os.path.join(cfg.output_dir, "truth.txt")
    save_edge_list(gt.B_true, truth)
    print(json.dumps({"clients": paths, "truth": truth}, indent=2))
    return 0


def _write_single(cfg: ExperimentConfig, report, d: int, truth_path: str | None, tag: str) -> None:
    os.makedirs(cfg.output_dir, exist_ok=True)
    metrics = None
    if truth_path:
        metrics = MetricsReport.compare(report.adjacency, load_edge_list(truth_path, d))
    row = metrics_row("external", d, "-", "-", cfg.federation.mode, cfg.federation.seed, metrics,
                      report.outer_iters, report.wall_seconds)
    with open(os.path.join(cfg.output_dir, f"results_{tag}.csv"), "w") as fh:
        fh.write(rows_to_csv([row]))
    save_edge_list(report.adjacency, os.path.join(cfg.output_dir, f"graph_{tag}.txt"))


def cmd_serve(args) -> int:
    from fedcd.federation.tcp import serve
    cfg = _config(args)
    report = serve(cfg.federation, args.d)
    _write_single(cfg, report, args.d, args.truth or cfg.truth_path, "server")
    print(json.dumps({"edges": report.edges(), "outer_iters": report.outer_iters}))
    return 0


def cmd_join(args) -> int:
    from fedcd.federation.tcp import join
    cfg = _config(args)
    X = load_client_csvs([args.data])[0]
    U = join(X, args.client_id, cfg.federation)
    solver = cfg.federation.solver.resolved(X.shape[1], cfg.federation.mode)
    B, _ = extract_dag(U, cfg.federation.mode == "LINEAR_AS", solver)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_edge_list(B, os.path.join(cfg.output_dir, f"graph_client{args.client_id}.txt"))
    edges = [[int(i), int(j)] for i, j in zip(*np.nonzero(B))]
    print(json.dumps({"client": args.client_id, "edges": edges}))
    return 0


def cmd_score(args) -> int:
    est = load_edge_list(args.estimate, args.d)
    truth = load_edge_list(args.truth, args.d)
    m = MetricsReport.compare(est, truth)
    print(json.dumps({"shd": m.shd, "tpr": m.tpr, "fdr": m.fdr, "nnz": m.nnz}))
    return 0


def cmd_show_config(args) -> int:
    print(dump_config(_config(args)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcd", description="Federated causal structure learning")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI file with [scenario]/[federation]/[solver]/[experiment]")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=("DS", "AS", "SEPARATE", "LINEAR_AS"))
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("simulate", help="run an in-process experiment over repetitions")
    common(sp)
    sp.add_argument("--repetitions", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("serve", help="host the aggregation server for tcp clients")
    common(sp)
    sp.add_argument("--d", type=int, required=True, help="number of variables")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--truth", help="ground-truth edge list for scoring")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("join", help="run one client against a server")
    common(sp)
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--client-id", type=int, required=True)
    sp.add_argument("--data", required=True, help="headerless CSV of this client's rows")
    sp.set_defaults(func=cmd_join)

    sp = sub.add_parser("gen-data", help="write a synthetic scenario as client CSVs")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("score", help="compare two edge-list files")
    sp.add_argument("estimate")
    sp.add_argument("truth")
    sp.add_argument("--d", type=int, required=True)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("show-config", help="print the effective configuration")
    common(sp)
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 \
        else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        log.error("%s", exc)
        return 3
    except DivergenceError as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
