"""Lossy feature compression and the gradient bias corrector.

A client's feature matrix is truncated to its top-k singular triplets; only
the factors travel, and the mediator rebuilds the synthetic feature block.
The corrector exploits the projector identity b = u d_k u^T o: on the way
back it projects the upstream feature gradient onto the retained left
singular subspace before chaining through the shallow model, treating the
projector as a constant of the forward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .linalg import ShapeError, SvdFactors, as_matrix, svd, truncate

WIRE_HEADER = struct.Struct("<iiii")  # client_id, d, n, k
WIRE_SCALAR_BYTES = 4  # simulated wire width: little-endian float32


def rank_for(d: int, n: int, c: float) -> int:
    """Retained rank floor(min(d, n) * c), clamped to at least one triplet."""
    return max(1, int(np.floor(min(d, n) * c)))


@dataclass
class CompressedFeatures:
    """Truncated SVD factors of one client's feature upload."""

    client_id: int
    u_k: np.ndarray  # (d, k)
    sigma_k: np.ndarray  # (k,)
    vt_k: np.ndarray  # (k, n)
    k: int
    n_c: int
    transmitted_scalars: int

    @property
    def feature_dim(self) -> int:
        return self.u_k.shape[0]


@dataclass
class CorrectionContext:
    """Client-private state for one round: full left factors plus the shallow trace."""

    u_full: np.ndarray  # (d, r) from the client's own SVD of the features
    k: int
    trace: nn.ForwardTrace


def compress(
    features: np.ndarray, c: float, *, client_id: int = -1, rank: int | None = None
) -> tuple[CompressedFeatures, SvdFactors]:
    """Truncated-SVD compression of a feature matrix at ratio c.

    Returns the wire payload plus the full factors, which stay client-side
    (only the truncated factors count as uplink). `rank` overrides the ratio
    rule for diagnostics such as the lossless full-rank configuration.
    """
    o = as_matrix(features, "features")
    if not 0.0 < c < 0.5:
        raise ValueError(f"compression ratio must satisfy 0 < C < 0.5, got {c}")
    d, n = o.shape
    factors = svd(o)
    k = min(rank, factors.rank_bound) if rank is not None else rank_for(d, n, c)
    u_k, sigma_k, vt_k = truncate(factors, k)
    cf = CompressedFeatures(
        client_id=client_id,
        u_k=u_k,
        sigma_k=sigma_k,
        vt_k=vt_k,
        k=k,
        n_c=n,
        transmitted_scalars=d * k + k + k * n,
    )
    return cf, factors


def reconstruct(cf: CompressedFeatures) -> np.ndarray:
    """Synthetic feature block u_k diag(sigma_k) vt_k, built mediator-side."""
    return (cf.u_k * cf.sigma_k) @ cf.vt_k


def projection_identity_check(o: np.ndarray, cf: CompressedFeatures, u_full: np.ndarray) -> float:
    """Max abs deviation between u d_k u^T o and the truncated reconstruction."""
    proj = u_full[:, : cf.k]
    return float(np.max(np.abs(proj @ (proj.T @ o) - reconstruct(cf))))


def corrected_shallow_gradient(grad_b: np.ndarray, ctx: CorrectionContext) -> nn.Params:
    """Project the upstream feature gradient onto the retained subspace, then chain.

    The projector is symmetric and idempotent, so applying it to the incoming
    gradient is exactly the adjoint of the forward-side projection.
    """
    if grad_b.shape != ctx.trace.output.shape:
        raise ShapeError(
            f"feature gradient shape {grad_b.shape} != feature shape {ctx.trace.output.shape}"
        )
    proj = ctx.u_full[:, : ctx.k]
    grad_o = proj @ (proj.T @ grad_b)
    return nn.backward_shallow(ctx.trace, grad_o)


def uncorrected_shallow_gradient(grad_b: np.ndarray, trace: nn.ForwardTrace) -> nn.Params:
    """Ablation arm: chain the raw feature gradient as if nothing were truncated."""
    if grad_b.shape != trace.output.shape:
        raise ShapeError(
            f"feature gradient shape {grad_b.shape} != feature shape {trace.output.shape}"
        )
    return nn.backward_shallow(trace, grad_b)


def pack_uplink(cf: CompressedFeatures) -> bytes:
    """Simulated wire record: int32 header + float32 factors, little-endian."""
    header = WIRE_HEADER.pack(cf.client_id, cf.feature_dim, cf.n_c, cf.k)
    body = np.concatenate(
        [cf.u_k.ravel(), cf.sigma_k.ravel(), cf.vt_k.ravel()]
    ).astype("<f4")
    return header + body.tobytes()


def unpack_uplink(payload: bytes) -> CompressedFeatures:
    client_id, d, n, k = WIRE_HEADER.unpack_from(payload, 0)
    body = np.frombuffer(payload, dtype="<f4", offset=WIRE_HEADER.size).astype(np.float64)
    expected = d * k + k + k * n
    if body.size != expected:
        raise ValueError(f"wire payload has {body.size} scalars, expected {expected}")
    u_k = body[: d * k].reshape(d, k)
    sigma_k = body[d * k : d * k + k]
    vt_k = body[d * k + k :].reshape(k, n)
    return CompressedFeatures(
        client_id=client_id,
        u_k=u_k,
        sigma_k=sigma_k,
        vt_k=vt_k,
        k=k,
        n_c=n,
        transmitted_scalars=expected,
    )
