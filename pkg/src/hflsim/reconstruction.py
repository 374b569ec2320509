"""Distribution reconstruction: signatures, clustering, mediator assignment.

Clients summarize their local label distribution as a 2-D signature
(entropy, KL divergence from a reference distribution). Signatures are
clustered with seeded k-means and each cluster is dealt round-robin across
mediators, so every mediator's client mix approximates the global label
distribution. Runs once at setup; per-round participant sampling draws
from the fixed assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientShard

KL_SMOOTHING = 1e-6
KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class ClientSignature:
    client_id: int
    entropy: float  # nats
    divergence: float  # KL(reference || local), nats

    def as_point(self) -> np.ndarray:
        return np.array([self.entropy, self.divergence])


@dataclass
class MediatorAssignment:
    clients_of: dict[int, list[int]]  # mediator id -> ascending client ids
    cluster_labels: np.ndarray  # per client, indexed by client id

    def mediator_of(self, client_id: int) -> int:
        for mid, members in self.clients_of.items():
            if client_id in members:
                return mid
        raise KeyError(f"client {client_id} not assigned")


@dataclass(frozen=True)
class HyperParams:
    """Global training knobs fixed at initialization."""

    eta: float = 0.015
    client_fraction: float = 0.3  # per-client participation probability
    example_fraction: float = 0.5  # per-example sampling probability
    compression_ratio: float = 0.4  # feature compression ratio, < 0.5
    deep_iterations: int = 10  # deep-training epochs per round
    clip_norm: float = 1.0  # l2 bound on the shallow gradient
    noise_level: float = 0.5  # gaussian noise multiplier

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if not 0 < self.client_fraction <= 1:
            raise ValueError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if not 0 < self.example_fraction <= 1:
            raise ValueError(f"example_fraction must be in (0, 1], got {self.example_fraction}")
        if not 0 < self.compression_ratio < 0.5:
            raise ValueError(
                f"compression_ratio must satisfy 0 < C < 0.5, got {self.compression_ratio}"
            )
        if self.deep_iterations < 1:
            raise ValueError(f"deep_iterations must be >= 1, got {self.deep_iterations}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")


@dataclass
class Federation:
    """Client population, mediator ids and the distinguished aggregation mediator.

    Mediators hold deep-model replicas and receive client features; the
    aggregation mediator only distributes and averages shallow models, so it
    carries a separate id and no clients.
    """

    clients: list[int]
    mediators: list[int]
    aggregation_mediator: int
    hyper: HyperParams
    mediator_fraction: float = 1.0

    def __post_init__(self) -> None:
        if len(self.mediators) < 1:
            raise ValueError("at least one mediator is required")
        if self.aggregation_mediator in self.mediators:
            raise ValueError("the aggregation mediator must be distinct from deep-training mediators")
        if not 0 < self.mediator_fraction <= 1:
            raise ValueError(f"mediator_fraction must be in (0, 1], got {self.mediator_fraction}")


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"{name} is not a probability distribution (sum={p.sum()!r})")
    return p


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with 0 * ln 0 := 0."""
    p = _check_distribution(p, "p")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def kl_divergence(p_ref: np.ndarray, p_c: np.ndarray, smoothing: float = KL_SMOOTHING) -> float:
    """KL(p_ref || p_c) in nats with additive smoothing on p_c.

    Smoothing keeps the divergence finite for clients that miss classes
    entirely, which is the normal case under few-classes-per-client sharding.
    """
    p_ref = _check_distribution(p_ref, "p_ref")
    p_c = _check_distribution(p_c, "p_c")
    if p_ref.shape != p_c.shape:
        raise ValueError(f"length mismatch: {p_ref.shape[0]} vs {p_c.shape[0]}")
    q = (p_c + smoothing) / (p_c + smoothing).sum()
    mask = p_ref > 0
    return float(np.sum(p_ref[mask] * np.log(p_ref[mask] / q[mask])))


def reference_distribution(num_classes: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    """The broadcast reference: uniform by default, optionally a random simplex point."""
    if kind == "uniform":
        return np.full(num_classes, 1.0 / num_classes)
    if kind == "random":
        raw = rng.random(num_classes) + 1e-12
        return raw / raw.sum()
    raise ValueError(f"unknown reference distribution kind {kind!r}")


def client_signatures(
    shards: list[ClientShard], p_ref: np.ndarray, smoothing: float = KL_SMOOTHING
) -> list[ClientSignature]:
    return [
        ClientSignature(
            client_id=s.client_id,
            entropy=entropy(s.label_dist),
            divergence=kl_divergence(p_ref, s.label_dist, smoothing),
        )
        for s in sorted(shards, key=lambda s: s.client_id)
    ]


def cluster_clients(signatures: list[ClientSignature], k: int, seed: int) -> np.ndarray:
    """Seeded k-means++ over the 2-D signature points; returns per-client labels."""
    n = len(signatures)
    if not 1 <= k <= n:
        raise ValueError(f"cluster count k={k} outside [1, {n}]")
    points = np.stack([s.as_point() for s in sorted(signatures, key=lambda s: s.client_id)])
    rng = np.random.default_rng([seed, 0xC1])

    centers = np.empty((k, 2))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dist, axis=1)  # lowest index wins ties
        new_centers = centers.copy()
        for j in range(k):
            members = points[labels == j]
            if members.shape[0] > 0:
                new_centers[j] = members.mean(axis=0)
        if np.allclose(new_centers, centers, rtol=0.0, atol=1e-12):
            break
        centers = new_centers
    return labels


def assign_to_mediators(
    cluster_labels: np.ndarray, mediators: list[int], seed: int
) -> MediatorAssignment:
    """Shuffle each cluster and deal clients round-robin across mediators.

    The dealing pointer carries over between clusters, so both the per-cluster
    and the total mediator loads differ by at most one.
    """
    if len(mediators) < 1:
        raise ValueError("at least one mediator is required")
    rng = np.random.default_rng([seed, 0xA5])
    mediators = sorted(mediators)
    clients_of: dict[int, list[int]] = {m: [] for m in mediators}
    pointer = 0
    for cluster in sorted(set(int(c) for c in cluster_labels)):
        members = np.flatnonzero(cluster_labels == cluster)
        for cid in rng.permutation(members):
            clients_of[mediators[pointer % len(mediators)]].append(int(cid))
            pointer += 1
    for members in clients_of.values():
        members.sort()
    return MediatorAssignment(clients_of=clients_of, cluster_labels=np.asarray(cluster_labels))


def sample_participants(
    fed: Federation, assignment: MediatorAssignment, rng: np.random.Generator
) -> dict[int, list[int]]:
    """Per-round participants: sampled mediators, then their clients with probability P.

    Every selected mediator keeps at least one client so no mediator round is
    vacuous. Draws consume the rng in ascending mediator order.
    """
    p = fed.hyper.client_fraction
    mediators = sorted(fed.mediators)
    count = max(1, int(round(fed.mediator_fraction * len(mediators))))
    if count < len(mediators):
        chosen = sorted(rng.permutation(len(mediators))[:count].tolist())
        mediators = [mediators[i] for i in chosen]
    participants: dict[int, list[int]] = {}
    for mid in mediators:
        members = assignment.clients_of.get(mid, [])
        if not members:
            continue
        picked = [cid for cid in members if rng.random() < p]
        if not picked:
            picked = [members[int(rng.integers(len(members)))]]
        participants[mid] = picked
    return participants


@dataclass
class GapReport:
    """KL-to-global divergences before and after mediator-level mixing."""

    mediator_kl: dict[int, float]
    mediator_mean: float  # size-weighted over mediators
    client_mean: float  # size-weighted over clients


def distribution_gap(
    assignment: MediatorAssignment,
    shards: list[ClientShard],
    smoothing: float = KL_SMOOTHING,
) -> GapReport:
    """Compare per-mediator mixture distributions against the global one."""
    by_id = {s.client_id: s for s in shards}
    total = sum(s.size for s in shards)
    num_classes = shards[0].label_dist.shape[0]
    p_global = np.zeros(num_classes)
    for s in shards:
        p_global += s.size / total * s.label_dist

    client_mean = sum(
        s.size / total * kl_divergence(p_global, s.label_dist, smoothing) for s in shards
    )

    mediator_kl: dict[int, float] = {}
    mediator_mean = 0.0
    for mid, members in sorted(assignment.clients_of.items()):
        if not members:
            continue
        m_total = sum(by_id[c].size for c in members)
        p_m = np.zeros(num_classes)
        for c in members:
            p_m += by_id[c].size / m_total * by_id[c].label_dist
        gap = kl_divergence(p_global, p_m, smoothing)
        mediator_kl[mid] = gap
        mediator_mean += m_total / total * gap
    return GapReport(mediator_kl=mediator_kl, mediator_mean=mediator_mean, client_mean=client_mean)
