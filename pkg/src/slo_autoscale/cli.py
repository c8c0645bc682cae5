from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .env import Environment
from .harness import ConfigError, ExperimentConfig, Trace, report, run_experiment
from .metrics import MetricStore
from .solver import oracle_solve


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _oracle_value(cfg: ExperimentConfig) -> float:
    _, value = oracle_solve(truth=cfg.truth.with_sigma(0.0), specs=cfg.specs, budget=cfg.budget)
    return value


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.trace_path = str(out / "trace.jsonl")
    cfg.store_path = str(out / "metrics.jsonl")
    trace = run_experiment(cfg)
    summary, _ = report(trace, _oracle_value(cfg), out / "report.csv", out / "summary.txt")
    sys.stdout.write(summary.text())
    return 0


def cmd_oracle(args) -> int:
    cfg = _config(args)
    a, value = oracle_solve(truth=cfg.truth.with_sigma(0.0), specs=cfg.specs, budget=cfg.budget)
    print(json.dumps({"value": value, "assignment": a.to_dict()}, indent=2))
    return 0


def cmd_replay(args) -> int:
    trace = Trace.load(args.trace)
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig.from_dict({k: v for k, v in trace.config.items()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary, _ = report(trace, _oracle_value(cfg), out / "report.csv", out / "summary.txt")
    sys.stdout.write(summary.text())
    return 0


def cmd_serve(args) -> int:
    from .server import serve

    cfg = _config(args)
    env = Environment(cfg.specs, cfg.truth, seed=cfg.seed, budget=cfg.budget)
    store = MetricStore.load(args.store) if args.store else MetricStore()
    serve(env, store, args.host, args.port, args.tick)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slo-autoscale",
                                     description="Simulated multi-dimensional autoscaling experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (every field optional)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("run", help="run the explore/exploit experiment")
    common(p)
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="brute-force optimum for a config")
    common(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("replay", help="recompute the report from a trace file")
    p.add_argument("trace")
    p.add_argument("--config", help="override the config recorded in the trace")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="serve the HTTP control surface")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--tick", type=float, default=None, help="seconds between automatic cycles")
    p.add_argument("--store", help="JSON Lines metrics file to preload")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
