"""Metrics CSV and summary sidecar emission.

The CSV is the plot-ready per-round record; the sidecar is a flat
key=value summary. Floats are rendered with repr so files reparse to the
exact in-memory values. The wall-clock seconds column is inherently
nondeterministic, so the canonical content digest covers every column
except it.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .orchestrator import RoundMetrics

CSV_HEADER = "round,accuracy,uplink_scalars,downlink_scalars,cum_uplink,cum_downlink,epsilon,seconds"


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_rows(series: list[RoundMetrics]) -> list[str]:
    rows = []
    cum_up = cum_down = 0
    for m in series:
        cum_up += m.uplink_scalars
        cum_down += m.downlink_scalars
        rows.append(
            f"{m.round},{_fmt(m.accuracy)},{m.uplink_scalars},{m.downlink_scalars},"
            f"{cum_up},{cum_down},{_fmt(m.epsilon)},{_fmt(m.seconds)}"
        )
    return rows


def write_metrics(path, series: list[RoundMetrics]) -> None:
    if not series:
        raise ValueError("refusing to write an empty metrics series")
    text = "\n".join([CSV_HEADER, *metrics_rows(series)]) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_metrics(path) -> list[RoundMetrics]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: not a metrics file (bad header)")
    series = []
    cum_up = cum_down = 0
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 8:
            raise ValueError(f"{path}: malformed row {line!r}")
        m = RoundMetrics(
            round=int(parts[0]),
            accuracy=float(parts[1]),
            uplink_scalars=int(parts[2]),
            downlink_scalars=int(parts[3]),
            epsilon=float(parts[6]),
            seconds=float(parts[7]),
        )
        cum_up += m.uplink_scalars
        cum_down += m.downlink_scalars
        if int(parts[4]) != cum_up or int(parts[5]) != cum_down:
            raise ValueError(f"{path}: cumulative columns disagree at round {m.round}")
        series.append(m)
    return series


def series_sha256(series: list[RoundMetrics]) -> str:
    """Digest of the deterministic columns (everything except seconds)."""
    h = hashlib.sha256()
    cum_up = cum_down = 0
    for m in series:
        cum_up += m.uplink_scalars
        cum_down += m.downlink_scalars
        h.update(
            f"{m.round},{_fmt(m.accuracy)},{m.uplink_scalars},{m.downlink_scalars},"
            f"{cum_up},{cum_down},{_fmt(m.epsilon)}\n".encode()
        )
    return h.hexdigest()


def write_summary(path, values: dict) -> None:
    text = "\n".join(f"{k}={v}" for k, v in values.items()) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, value = line.split("=", 1)
            out[key] = value
    return out
