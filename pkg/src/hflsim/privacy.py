"""Gradient clipping, Gaussian noising, and a simplified privacy-loss ledger.

Noise is applied to shallow-model gradients only: the update is clipped to
an l2 budget over all shallow parameters jointly, then perturbed per
coordinate with N(0, sigma^2 L^2 / n_c). The ledger composes per-round
losses with the analytic Gaussian-mechanism bound plus advanced
composition; reported epsilon is an upper bound under this simplified
analysis, not a moments-accountant figure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError
from .nn import Params


@dataclass(frozen=True)
class DpParams:
    clip_norm: float  # l2 bound L
    noise_level: float  # dimensionless multiplier sigma
    delta: float = 1e-5

    def __post_init__(self) -> None:
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")


def flat_l2_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for layer in grads for g in layer))


def clip_gradients(grads: Params, clip_norm: float) -> Params:
    """g / max(1, ||g||_2 / L), jointly over every array."""
    scale = 1.0 / max(1.0, flat_l2_norm(grads) / clip_norm)
    return [[g * scale for g in layer] for layer in grads]


def clip_and_noise(
    grads: Params, dp: DpParams, n_c: int, rng: np.random.Generator
) -> Params:
    """Clip the whole gradient to L, then add N(0, sigma^2 L^2 / n_c) per coordinate."""
    if n_c < 1:
        raise ValueError(f"batch size must be >= 1, got {n_c}")
    for layer in grads:
        for g in layer:
            if not np.isfinite(g).all():
                raise ValueError("non-finite gradient entries")
    clipped = clip_gradients(grads, dp.clip_norm)
    if dp.noise_level == 0.0:
        return clipped
    std = dp.noise_level * dp.clip_norm / math.sqrt(n_c)
    return [[g + rng.normal(0.0, std, size=g.shape) for g in layer] for layer in clipped]


def per_example_clip_and_noise(
    per_example_grads: list[Params], dp: DpParams, rng: np.random.Generator
) -> Params:
    """Clip each example's gradient to L, average, then add N(0, sigma^2 L^2 / n_c).

    The comparison arm for the per-example reading of the clipping step.
    """
    n_c = len(per_example_grads)
    if n_c < 1:
        raise ValueError("need at least one per-example gradient")
    clipped = [clip_gradients(g, dp.clip_norm) for g in per_example_grads]
    mean: Params = [
        [sum(c[li][pi] for c in clipped) / n_c for pi in range(len(clipped[0][li]))]
        for li in range(len(clipped[0]))
    ]
    if dp.noise_level == 0.0:
        return mean
    std = dp.noise_level * dp.clip_norm / math.sqrt(n_c)
    return [[g + rng.normal(0.0, std, size=g.shape) for g in layer] for layer in mean]


@dataclass(frozen=True)
class RoundRecord:
    noise_level: float
    sampling_rate: float
    n_c: int


def round_epsilon(noise_level: float, n_c: int, delta: float) -> float:
    """Analytic Gaussian-mechanism bound for one round.

    The effective multiplier is sigma * sqrt(n_c): per-example sensitivity is
    L / n_c while the injected std is sigma * L / sqrt(n_c).
    """
    if noise_level <= 0:
        return math.inf
    return math.sqrt(2.0 * math.log(1.25 / delta)) / (noise_level * math.sqrt(n_c))


@dataclass(frozen=True)
class PrivacyLedger:
    """Cumulative (epsilon, delta) bookkeeping across rounds."""

    delta: float = 1e-5
    records: tuple[RoundRecord, ...] = field(default_factory=tuple)

    def updated(self, record: RoundRecord) -> "PrivacyLedger":
        return PrivacyLedger(delta=self.delta, records=self.records + (record,))

    def cumulative_epsilon(self) -> float:
        """Advanced composition of the per-round analytic bounds at fixed delta."""
        if not self.records:
            return 0.0
        eps = [round_epsilon(r.noise_level, r.n_c, self.delta) for r in self.records]
        if any(math.isinf(e) for e in eps):
            return math.inf
        sum_sq = sum(e * e for e in eps)
        slack = sum(e * (math.exp(e) - 1.0) for e in eps)
        return math.sqrt(2.0 * math.log(1.0 / self.delta) * sum_sq) + slack
