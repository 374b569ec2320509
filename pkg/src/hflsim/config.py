"""Experiment configuration: flat key=value files plus flag overrides.

Grammar: one `key=value` per line, `#` starts a comment, blank lines are
ignored. Flags mirror keys with a `--` prefix and take precedence over file
values. Unknown keys are rejected. Protocol symbols map to keys as
eta=eta, P=client_fraction, S=example_fraction, C=compression_ratio,
I=deep_iterations, L=clip_norm, sigma=noise_level.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

METHODS = ("hfl", "hfl-nocorrector", "fedavg")
DATASETS = ("synthetic", "idx", "csv")
PARTITIONS = ("sorted", "dirichlet")
REFERENCE_KINDS = ("uniform", "random")


class ConfigError(ValueError):
    """A configuration key is unknown, malformed, or out of range."""


@dataclass
class ExperimentConfig:
    # dataset source
    dataset: str = "synthetic"
    classes: int = 10
    points: int = 4000
    dim: int = 64
    cluster_std: float = 1.0
    test_points: int = 1000
    data_seed: int = -1  # -1: derive from seed
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_csv: str = ""
    test_csv: str = ""
    # federation and partition
    num_clients: int = 100
    num_mediators: int = 3
    classes_per_client: int = 2
    partition: str = "sorted"
    dirichlet_alpha: float = 0.5
    clusters: int = 0  # 0: ceil(classes / classes_per_client)
    mediator_fraction: float = 1.0
    reference_distribution: str = "uniform"
    kl_smoothing: float = 1e-6
    # protocol hyper-parameters
    eta: float = 0.015
    client_fraction: float = 0.3
    example_fraction: float = 0.5
    compression_ratio: float = 0.4
    deep_iterations: int = 10
    clip_norm: float = 1.0
    noise_level: float = 0.5
    delta: float = 1e-5
    per_example_clip: bool = False
    # split model
    hidden_dim: int = 64
    deep_hidden: int = 64
    # run control
    method: str = "hfl"
    rounds: int = 50
    seed: int = 0
    target_accuracy: float = 0.8
    window: int = 10
    rank_override: int = 0  # 0: rank from the compression ratio
    broadcast_every_round: bool = True
    fedavg_epochs: int = 1
    out: str = ""

    def validate(self) -> None:
        def require(cond: bool, key: str, allowed: str) -> None:
            if not cond:
                raise ConfigError(f"{key}={getattr(self, key)!r} invalid: expected {allowed}")

        require(self.dataset in DATASETS, "dataset", f"one of {DATASETS}")
        require(self.method in METHODS, "method", f"one of {METHODS}")
        require(self.partition in PARTITIONS, "partition", f"one of {PARTITIONS}")
        require(
            self.reference_distribution in REFERENCE_KINDS,
            "reference_distribution",
            f"one of {REFERENCE_KINDS}",
        )
        require(0.0 < self.compression_ratio < 0.5, "compression_ratio", "C < 0.5 (and C > 0)")
        require(0.0 < self.client_fraction <= 1.0, "client_fraction", "0 < P <= 1")
        require(0.0 < self.example_fraction <= 1.0, "example_fraction", "0 < S <= 1")
        require(self.noise_level >= 0.0, "noise_level", "sigma >= 0")
        require(self.eta >= 0.0, "eta", "eta >= 0")
        require(self.rounds >= 1, "rounds", "rounds >= 1")
        require(self.window >= 1, "window", "window >= 1")
        require(self.deep_iterations >= 1, "deep_iterations", "I >= 1")
        require(self.clip_norm > 0.0, "clip_norm", "L > 0")
        require(0.0 < self.delta < 1.0, "delta", "0 < delta < 1")
        require(self.num_clients >= 1, "num_clients", ">= 1")
        require(self.num_mediators >= 1, "num_mediators", ">= 1")
        require(self.classes_per_client >= 1, "classes_per_client", ">= 1")
        require(0.0 < self.mediator_fraction <= 1.0, "mediator_fraction", "0 < fraction <= 1")
        require(0.0 < self.target_accuracy <= 1.0, "target_accuracy", "0 < target <= 1")
        require(self.hidden_dim >= 1, "hidden_dim", ">= 1")
        require(self.deep_hidden >= 1, "deep_hidden", ">= 1")
        require(self.fedavg_epochs >= 1, "fedavg_epochs", ">= 1")
        require(self.rank_override >= 0, "rank_override", ">= 0")
        require(self.kl_smoothing > 0.0, "kl_smoothing", "> 0")
        require(self.dirichlet_alpha > 0.0, "dirichlet_alpha", "> 0")
        if self.dataset == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, key):
                    raise ConfigError(f"dataset=idx requires key {key}")
        if self.dataset == "csv":
            for key in ("train_csv", "test_csv"):
                if not getattr(self, key):
                    raise ConfigError(f"dataset=csv requires key {key}")

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed < 0 else self.data_seed


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}={raw!r}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw.strip())
    return values


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Config from an optional file plus overrides; overrides win."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), source=str(p)))
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def config_lines(cfg: ExperimentConfig) -> str:
    """Canonical key=value rendering (used for summaries and echo files)."""
    return "\n".join(f"{f.name}={getattr(cfg, f.name)}" for f in fields(ExperimentConfig))
