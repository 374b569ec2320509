"""Command-line driver.

Run path (default): `hflsim --config PATH --seed N --method hfl --rounds N
--out PATH` plus `--key value` overrides for every config key. Report
path: `hflsim report --out DIR metrics.csv [...]` renders figures from
previously written metrics files. Worker count comes from the
HFLSIM_WORKERS environment variable only.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import orchestrator as orch
from .config import ConfigError, ExperimentConfig, parse_config
from .metrics import read_metrics, series_sha256, write_metrics, write_summary

logger = logging.getLogger(__name__)

WORKERS_ENV = "HFLSIM_WORKERS"


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring non-integer %s=%r", WORKERS_ENV, raw)
        return 1


def final_window_accuracy(series, window: int) -> float:
    tail = [m.accuracy for m in series[-window:]]
    return sum(tail) / len(tail)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> dict:
    """Execute one run and write the metrics CSV, summary sidecar, and the
    stitched deployable model next to it. Returns the written paths."""
    if not cfg.out:
        raise ConfigError("out: an output path is required (key `out` / flag --out)")
    out = Path(cfg.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)

    if cfg.method == "fedavg":
        series, setup, final_params = orch.run_fedavg(cfg, workers=workers)
        n_shallow = len(setup.model.shallow.specs)
        shallow, deep = final_params[:n_shallow], final_params[n_shallow:]
    else:
        series, setup, state = orch.run_hfl(cfg, workers=workers)
        shallow, deep = state.shallow_global, state.deep_global

    write_metrics(out, series)
    reached = orch.overhead_to_target(series, cfg.target_accuracy, cfg.window)
    summary = {
        "method": cfg.method,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_window_accuracy": repr(final_window_accuracy(series, cfg.window)),
        "target_accuracy": repr(cfg.target_accuracy),
        "window": cfg.window,
        "overhead_round": reached[0] if reached else "not_reached",
        "overhead_scalars": reached[1] if reached else "not_reached",
        "final_epsilon": repr(series[-1].epsilon),
        "partition_hash": setup.partition_digest,
        "series_sha256": series_sha256(series),
    }
    summary_path = out.with_name(out.name + ".summary")
    write_summary(summary_path, summary)
    model_path = out.with_name(out.name + ".model.npz")
    orch.export_model(model_path, setup.model, shallow, deep)
    logger.info(
        "run complete: method=%s seed=%d rounds=%d final_window_accuracy=%s",
        cfg.method, cfg.seed, cfg.rounds, summary["final_window_accuracy"],
    )
    return {"metrics": out, "summary": summary_path, "model": model_path}


def build_run_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hflsim",
        description="Hierarchical federated learning simulator (run mode).",
    )
    parser.add_argument("--config", help="flat key=value config file")
    for f in fields(ExperimentConfig):
        parser.add_argument(f"--{f.name}", metavar=f.type.upper(), default=None)
    return parser


def run_main(argv: list[str]) -> int:
    parser = build_run_parser()
    args = parser.parse_args(argv)
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(ExperimentConfig)
        if getattr(args, f.name) is not None
    }
    try:
        cfg = parse_config(args.config, overrides)
        run_experiment(cfg, workers=workers_from_env())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def report_main(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(
        prog="hflsim report",
        description="Render comparison figures from metrics CSV files.",
    )
    parser.add_argument("metrics", nargs="+", help="metrics CSV files")
    parser.add_argument("--out", required=True, help="output directory for figures")
    parser.add_argument("--target", type=float, default=None,
                        help="target accuracy for the overhead figure (default: from sidecars)")
    args = parser.parse_args(argv)
    from .report import render_report

    try:
        written = render_report(args.metrics, args.out, target=args.target)
    except Exception as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    if argv and argv[0] == "report":
        return report_main(argv[1:])
    return run_main(argv)


if __name__ == "__main__":
    sys.exit(main())
