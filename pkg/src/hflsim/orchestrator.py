"""Round engine: client feature uploads, mediator deep training, gradient
slicing, private client updates, and the two aggregation paths, plus a
FedAVG baseline under identical data and accounting.

Every random draw comes from a stream derived from (seed, namespace,
round, entity), and all cross-entity reductions run in ascending entity-id
order, so a round is a pure function of (state, seed) regardless of how
many workers execute the client phase.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import compression as comp
from . import data as datamod
from . import nn
from . import reconstruction as rec
from .config import ExperimentConfig
from .linalg import ShapeError
from .privacy import DpParams, PrivacyLedger, RoundRecord, clip_and_noise, per_example_clip_and_noise

logger = logging.getLogger(__name__)

# rng stream namespaces
NS_INIT = 1
NS_PARTITION = 2
NS_CLUSTER = 3
NS_ASSIGN = 4
NS_PARTICIPANTS = 5
NS_BATCH = 6
NS_NOISE = 7
NS_REFERENCE = 8
NS_TEST_DATA = 9


def rng_for(seed: int, namespace: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, namespace, *extra])


class RoundError(RuntimeError):
    """A sub-operation failed; the round was aborted with state unchanged."""


@dataclass(frozen=True)
class UploadRecord:
    """Raw accounting facts for one client upload (scalars recomputed in tests)."""

    client_id: int
    mediator_id: int
    feature_dim: int
    n_c: int
    k: int
    transmitted_scalars: int


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    uplink_scalars: int
    downlink_scalars: int
    epsilon: float
    seconds: float
    uploads: list[UploadRecord] = field(default_factory=list)


@dataclass
class MediatorBatch:
    """Synthetic features for one mediator: client blocks concatenated in
    ascending client-id order, with the segment table mapping columns back."""

    mediator_id: int
    features: np.ndarray
    labels: np.ndarray
    segments: list[tuple[int, int, int]]  # (client_id, start, n_c)

    def __post_init__(self) -> None:
        covered = sum(n for _, _, n in self.segments)
        if covered != self.features.shape[1]:
            raise ShapeError(
                f"segment table covers {covered} columns, batch has {self.features.shape[1]}"
            )


@dataclass
class Setup:
    """Everything immutable across rounds."""

    cfg: ExperimentConfig
    train: datamod.Dataset
    test: datamod.Dataset
    shards: list[datamod.ClientShard]
    federation: rec.Federation
    assignment: rec.MediatorAssignment
    model: nn.SplitModel
    partition_digest: str


@dataclass
class GlobalState:
    setup: Setup
    shallow_global: nn.Params
    deep_global: nn.Params
    mediator_deep: dict[int, nn.Params]
    client_shallow: dict[int, nn.Params]
    ledger: PrivacyLedger
    round_index: int = 0  # rounds completed so far


def load_train_test(cfg: ExperimentConfig) -> tuple[datamod.Dataset, datamod.Dataset]:
    if cfg.dataset == "synthetic":
        base = dict(
            classes=cfg.classes, dim=cfg.dim, cluster_std=cfg.cluster_std,
            seed=cfg.effective_data_seed,
        )
        train = datamod.load_dataset(dict(base, points=cfg.points, split=0), "synthetic-spec")
        test = datamod.load_dataset(dict(base, points=cfg.test_points, split=1), "synthetic-spec")
        return train, test
    if cfg.dataset == "idx":
        train = datamod.load_dataset(
            {"images": cfg.train_images, "labels": cfg.train_labels}, "idx-ubyte"
        )
        test = datamod.load_dataset(
            {"images": cfg.test_images, "labels": cfg.test_labels}, "idx-ubyte"
        )
        return train, test
    train = datamod.load_dataset(cfg.train_csv, "csv")
    test = datamod.load_dataset(cfg.test_csv, "csv")
    return train, test


def build_setup(cfg: ExperimentConfig) -> Setup:
    train, test = load_train_test(cfg)
    if cfg.partition == "sorted":
        shards = datamod.partition_noniid(train, cfg.num_clients, cfg.classes_per_client, cfg.seed)
    else:
        shards = datamod.partition_dirichlet(train, cfg.num_clients, cfg.dirichlet_alpha, cfg.seed)

    hyper = rec.HyperParams(
        eta=cfg.eta,
        client_fraction=cfg.client_fraction,
        example_fraction=cfg.example_fraction,
        compression_ratio=cfg.compression_ratio,
        deep_iterations=cfg.deep_iterations,
        clip_norm=cfg.clip_norm,
        noise_level=cfg.noise_level,
    )
    federation = rec.Federation(
        clients=list(range(cfg.num_clients)),
        mediators=list(range(cfg.num_mediators)),
        aggregation_mediator=cfg.num_mediators,
        hyper=hyper,
        mediator_fraction=cfg.mediator_fraction,
    )

    p_ref = rec.reference_distribution(
        train.num_classes, cfg.reference_distribution, rng_for(cfg.seed, NS_REFERENCE)
    )
    signatures = rec.client_signatures(shards, p_ref, cfg.kl_smoothing)
    k = cfg.clusters or max(1, math.ceil(train.num_classes / cfg.classes_per_client))
    k = min(k, cfg.num_clients)
    labels = rec.cluster_clients(signatures, k, cfg.seed)
    assignment = rec.assign_to_mediators(labels, federation.mediators, cfg.seed)

    model = nn.default_split_model(
        input_dim=train.feature_dim,
        num_classes=train.num_classes,
        rng=rng_for(cfg.seed, NS_INIT),
        boundary_dim=cfg.hidden_dim,
        deep_hidden=cfg.deep_hidden,
    )
    return Setup(
        cfg=cfg,
        train=train,
        test=test,
        shards=shards,
        federation=federation,
        assignment=assignment,
        model=model,
        partition_digest=datamod.partition_hash(shards),
    )


def init_state(setup: Setup) -> GlobalState:
    return GlobalState(
        setup=setup,
        shallow_global=nn.clone_params(setup.model.shallow.params),
        deep_global=nn.clone_params(setup.model.deep.params),
        mediator_deep={},
        client_shallow={},
        ledger=PrivacyLedger(delta=setup.cfg.delta),
        round_index=0,
    )


def aggregate_deep(models: list[nn.Params]) -> nn.Params:
    """Unweighted per-parameter mean, anchored on the first model so that
    averaging identical copies is bit-exact."""
    if not models:
        raise ValueError("nothing to aggregate")
    base = models[0]
    out: nn.Params = []
    for li, layer in enumerate(base):
        new_layer = []
        for pi, p in enumerate(layer):
            acc = np.zeros_like(p)
            for m in models[1:]:
                if m[li][pi].shape != p.shape:
                    raise ShapeError(
                        f"model shape mismatch at layer {li}: {m[li][pi].shape} vs {p.shape}"
                    )
                acc += m[li][pi] - p
            new_layer.append(p + acc / len(models))
        out.append(new_layer)
    return out


def aggregate_shallow(models: list[nn.Params]) -> nn.Params:
    return aggregate_deep(models)


def evaluate_accuracy(
    specs: list[nn.LayerSpec], params: nn.Params, ds: datamod.Dataset, chunk: int = 4096
) -> float:
    stack = nn.Stack(specs, params)
    correct = 0
    for start in range(0, ds.size, chunk):
        cols = ds.examples[:, start : start + chunk]
        logits = nn.forward_stack(stack, cols).output
        correct += int(np.sum(np.argmax(logits, axis=0) == ds.labels[start : start + chunk]))
    return correct / ds.size


@dataclass
class _ClientUpload:
    client_id: int
    mediator_id: int
    batch: datamod.ClientBatch
    trace: nn.ForwardTrace
    cf: comp.CompressedFeatures
    u_full: np.ndarray


def _client_forward(state: GlobalState, cid: int, mid: int, shallow_params: nn.Params) -> _ClientUpload:
    setup = state.setup
    cfg = setup.cfg
    batch = datamod.sample_minibatch(
        setup.train,
        setup.shards[cid],
        cfg.example_fraction,
        rng_for(cfg.seed, NS_BATCH, state.round_index, cid),
    )
    feats, trace = nn.forward_shallow(nn.Stack(setup.model.shallow.specs, shallow_params), batch.examples)
    cf, factors = comp.compress(
        feats,
        cfg.compression_ratio,
        client_id=cid,
        rank=cfg.rank_override if cfg.rank_override > 0 else None,
    )
    d, n = feats.shape
    if cf.k < d * n / (d + 1 + n):
        assert cf.transmitted_scalars < d * n
    logger.debug(
        "upload client=%d k=%d scalars=%d/%d ratio=%.3f",
        cid, cf.k, cf.transmitted_scalars, d * n, cf.transmitted_scalars / (d * n),
    )
    return _ClientUpload(cid, mid, batch, trace, cf, factors.u)


def run_round(state: GlobalState, workers: int = 1) -> tuple[GlobalState, RoundMetrics]:
    """One full protocol round; returns the successor state and its metrics.

    Any sub-operation failure raises RoundError and leaves `state` untouched.
    """
    try:
        return _run_round(state, workers)
    except RoundError:
        raise
    except Exception as exc:
        raise RoundError(f"round {state.round_index + 1} aborted: {exc}") from exc


def _run_round(state: GlobalState, workers: int) -> tuple[GlobalState, RoundMetrics]:
    t_start = time.perf_counter()
    setup = state.setup
    cfg = setup.cfg
    fed = setup.federation
    model = setup.model
    t = state.round_index
    corrector_on = cfg.method != "hfl-nocorrector"
    dp = DpParams(clip_norm=cfg.clip_norm, noise_level=cfg.noise_level, delta=cfg.delta)

    participants = rec.sample_participants(
        fed, setup.assignment, rng_for(cfg.seed, NS_PARTICIPANTS, t)
    )

    def shallow_of(cid: int) -> nn.Params:
        if cfg.broadcast_every_round or cid not in state.client_shallow:
            return nn.clone_params(state.shallow_global)
        return nn.clone_params(state.client_shallow[cid])

    def deep_of(mid: int) -> nn.Params:
        if cfg.broadcast_every_round or mid not in state.mediator_deep:
            return nn.clone_params(state.deep_global)
        return nn.clone_params(state.mediator_deep[mid])

    # client phase: feature extraction, compression, upload accounting
    tasks = [(cid, mid) for mid in sorted(participants) for cid in participants[mid]]
    client_params = {cid: shallow_of(cid) for cid, _ in tasks}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_client_forward, state, cid, mid, client_params[cid])
                for cid, mid in tasks
            ]
            results = [f.result() for f in futures]
            uploads = {r.client_id: r for r in results}
    else:
        uploads = {cid: _client_forward(state, cid, mid, client_params[cid]) for cid, mid in tasks}

    uplink = 0
    records = []
    for cid, _ in tasks:
        up = uploads[cid]
        uplink += up.cf.transmitted_scalars + up.batch.n_c  # factors plus labels
        records.append(
            UploadRecord(
                client_id=cid,
                mediator_id=up.mediator_id,
                feature_dim=up.cf.feature_dim,
                n_c=up.batch.n_c,
                k=up.cf.k,
                transmitted_scalars=up.cf.transmitted_scalars,
            )
        )

    # mediator phase: reconstruct, concatenate, deep-train, slice feature grads
    downlink = 0
    new_mediator_deep: dict[int, nn.Params] = {}
    feature_grads: dict[int, np.ndarray] = {}
    for mid in sorted(participants):
        members = participants[mid]
        blocks = [comp.reconstruct(uploads[cid].cf) for cid in members]
        labels = np.concatenate([uploads[cid].batch.labels for cid in members])
        segments = []
        start = 0
        for cid in members:
            n_c = uploads[cid].batch.n_c
            segments.append((cid, start, n_c))
            start += n_c
        mbatch = MediatorBatch(
            mediator_id=mid,
            features=np.concatenate(blocks, axis=1),
            labels=labels,
            segments=segments,
        )

        deep_params = deep_of(mid)
        grad_features = None
        for _ in range(cfg.deep_iterations):
            _, dtrace = nn.forward_deep(
                nn.Stack(model.deep.specs, deep_params), mbatch.features, mbatch.labels
            )
            deep_grads, grad_features = nn.backward_deep(dtrace)
            deep_params = nn.sgd_step(deep_params, deep_grads, cfg.eta)
        new_mediator_deep[mid] = deep_params

        for cid, start, n_c in mbatch.segments:
            feature_grads[cid] = grad_features[:, start : start + n_c]
            downlink += grad_features.shape[0] * n_c

    # client update phase: bias-corrected chain, clip, noise, step
    mediator_total = {mid: sum(uploads[c].batch.n_c for c in participants[mid]) for mid in participants}
    new_client_shallow: dict[int, nn.Params] = {}
    for cid, mid in tasks:
        up = uploads[cid]
        grad_b = feature_grads[cid]
        if corrector_on:
            ctx = comp.CorrectionContext(u_full=up.u_full, k=up.cf.k, trace=up.trace)
            grad_o = ctx.u_full[:, : ctx.k] @ (ctx.u_full[:, : ctx.k].T @ grad_b)
        else:
            grad_o = grad_b
        noise_rng = rng_for(cfg.seed, NS_NOISE, t, cid)
        if cfg.per_example_clip:
            per_ex = nn.per_example_gradients(up.trace, grad_o)
            total = mediator_total[mid]
            scaled = [[[g * total for g in layer] for layer in ex] for ex in per_ex]
            noised = per_example_clip_and_noise(scaled, dp, noise_rng)
        else:
            shallow_grads = nn.backward_shallow(up.trace, grad_o)
            noised = clip_and_noise(shallow_grads, dp, up.batch.n_c, noise_rng)
        new_client_shallow[cid] = nn.sgd_step(client_params[cid], noised, cfg.eta)

    # FL-server deep average and AM shallow average, ascending ids
    new_deep_global = aggregate_deep([new_mediator_deep[m] for m in sorted(new_mediator_deep)])
    new_shallow_global = aggregate_shallow(
        [new_client_shallow[c] for c in sorted(new_client_shallow)]
    )

    min_n_c = min(up.batch.n_c for up in uploads.values())
    ledger = state.ledger.updated(
        RoundRecord(noise_level=cfg.noise_level, sampling_rate=cfg.example_fraction, n_c=min_n_c)
    )

    accuracy = evaluate_accuracy(
        model.shallow.specs + model.deep.specs,
        new_shallow_global + new_deep_global,
        setup.test,
    )

    if cfg.broadcast_every_round:
        mediator_deep, client_shallow = {}, {}
    else:
        mediator_deep = {**state.mediator_deep, **new_mediator_deep}
        client_shallow = {**state.client_shallow, **new_client_shallow}

    new_state = GlobalState(
        setup=setup,
        shallow_global=new_shallow_global,
        deep_global=new_deep_global,
        mediator_deep=mediator_deep,
        client_shallow=client_shallow,
        ledger=ledger,
        round_index=t + 1,
    )
    metrics = RoundMetrics(
        round=t + 1,
        accuracy=accuracy,
        uplink_scalars=uplink,
        downlink_scalars=downlink,
        epsilon=ledger.cumulative_epsilon(),
        seconds=time.perf_counter() - t_start,
        uploads=records,
    )
    return new_state, metrics


def run_hfl(cfg: ExperimentConfig, workers: int = 1) -> tuple[list[RoundMetrics], Setup, GlobalState]:
    setup = build_setup(cfg)
    state = init_state(setup)
    series = []
    for _ in range(cfg.rounds):
        state, metrics = run_round(state, workers=workers)
        series.append(metrics)
    return series, setup, state


def full_model_scalars(model: nn.SplitModel) -> int:
    return nn.param_count(model.shallow.params) + nn.param_count(model.deep.params)


def _fedavg_participants(cfg: ExperimentConfig, num_clients: int, t: int) -> list[int]:
    rng = rng_for(cfg.seed, NS_PARTICIPANTS, t)
    picked = [cid for cid in range(num_clients) if rng.random() < cfg.client_fraction]
    if not picked:
        picked = [int(rng.integers(num_clients))]
    return picked


def _local_train(
    cfg: ExperimentConfig,
    setup: Setup,
    params: nn.Params,
    shard: datamod.ClientShard,
    t: int,
) -> nn.Params:
    specs = setup.model.shallow.specs + setup.model.deep.specs
    rng = rng_for(cfg.seed, NS_BATCH, t, shard.client_id)
    n_c = max(1, int(round(cfg.example_fraction * shard.size)))
    for _ in range(cfg.fedavg_epochs):
        order = shard.indices[rng.permutation(shard.size)]
        for start in range(0, shard.size - n_c + 1, n_c):
            picked = order[start : start + n_c]
            batch = setup.train.examples[:, picked]
            labels = setup.train.labels[picked]
            _, trace = nn.forward_deep(nn.Stack(specs, params), batch, labels)
            grads, _ = nn.backward_deep(trace)
            params = nn.sgd_step(params, grads, cfg.eta)
    return params


def run_fedavg(cfg: ExperimentConfig, workers: int = 1) -> tuple[list[RoundMetrics], Setup, nn.Params]:
    """FedAVG baseline: full local models, shard-size-weighted averaging,
    identical data, partition, seed streams and accounting units."""
    setup = build_setup(cfg)
    specs = setup.model.shallow.specs + setup.model.deep.specs
    global_params = nn.clone_params(setup.model.shallow.params) + nn.clone_params(
        setup.model.deep.params
    )
    model_scalars = full_model_scalars(setup.model)
    series = []
    for t in range(cfg.rounds):
        t_start = time.perf_counter()
        picked = _fedavg_participants(cfg, cfg.num_clients, t)
        locals_: dict[int, nn.Params] = {}
        weights: dict[int, int] = {}
        for cid in sorted(picked):
            shard = setup.shards[cid]
            locals_[cid] = _local_train(cfg, setup, nn.clone_params(global_params), shard, t)
            weights[cid] = shard.size
        total_weight = sum(weights.values())
        base = locals_[sorted(picked)[0]]
        merged: nn.Params = []
        for li, layer in enumerate(base):
            new_layer = []
            for pi, p in enumerate(layer):
                acc = np.zeros_like(p)
                for cid in sorted(picked):
                    acc += weights[cid] / total_weight * (locals_[cid][li][pi] - p)
                new_layer.append(p + acc)
            merged.append(new_layer)
        global_params = merged
        accuracy = evaluate_accuracy(specs, global_params, setup.test)
        uplink = len(picked) * model_scalars
        downlink = len(picked) * model_scalars
        series.append(
            RoundMetrics(
                round=t + 1,
                accuracy=accuracy,
                uplink_scalars=uplink,
                downlink_scalars=downlink,
                epsilon=math.inf,
                seconds=time.perf_counter() - t_start,
            )
        )
    return series, setup, global_params


def overhead_to_target(
    series: list[RoundMetrics], target: float, window: int = 10
) -> tuple[int, int] | None:
    """Earliest round whose trailing window mean accuracy reaches the target.

    Returns (round, cumulative uplink+downlink scalars through that round),
    or None when no window qualifies.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    cumulative = 0
    acc = [m.accuracy for m in series]
    for i, m in enumerate(series):
        cumulative += m.uplink_scalars + m.downlink_scalars
        if i + 1 >= window and sum(acc[i + 1 - window : i + 1]) / window >= target:
            return m.round, cumulative
    return None


def export_model(path, model: nn.SplitModel, shallow: nn.Params, deep: nn.Params) -> None:
    """Stitch the final shallow and deep halves into one deployable file."""
    specs = model.shallow.specs + model.deep.specs
    params = shallow + deep
    arrays = {}
    for li, layer in enumerate(params):
        for pi, p in enumerate(layer):
            arrays[f"layer{li}_param{pi}"] = p
    meta = [
        dict(kind=s.kind, in_dim=s.in_dim, out_dim=s.out_dim, height=s.height,
             width=s.width, kernel=s.kernel, channels=s.channels)
        for s in specs
    ]
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
