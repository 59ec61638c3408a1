"""In-process federation: clients, server aggregation, round schedules.

Every protocol is a sequence of client-local stages (run serially or on a
thread pool) separated by aggregation barriers. Each client owns its own
parameters and RNG stream and the server averages in client-id order, so
results do not depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .autograd import ComputeGraph, ShapeError, no_grad
from .data_synth import DEFAULT_AUG_A, DEFAULT_AUG_B, AugmentationSpec, ClientDataset, augment_pair
from .ledger import CommLedger
from .metrics import MetricsRecord, aggregate_metrics, per_image_dice
from .objectives import EmaConfig, ema_update, embedding_spread, lfe_total_loss, supervised_loss
from .optim import SgdState, sgd_step
from .segnet import ModelConfig, ParameterSet, PartitionBoundary, build_model, forward_project, forward_segment, partition

log = logging.getLogger(__name__)

COLLAPSE_SPREAD = 1e-3  # warn below this embedding spread

PROTOCOLS = ("pflfe", "fc_pflfe", "fedavg", "fedavg_ft", "local_only", "centralized", "decoupled_no_lfe")
BASELINES = ("fedavg", "fedavg_ft", "local_only", "centralized", "decoupled_no_lfe")
FULL_MODEL = PartitionBoundary.last_k_layers(0)


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class RoundPlan:
    protocol: str = "pflfe"
    lfe_epochs: int = 1
    sup_epochs: int = 1
    total_rounds: int = 30
    boundary: PartitionBoundary = PartitionBoundary.all_decoder()
    finetune_epochs: int | None = None  # fedavg_ft budget; defaults to sup_epochs

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.lfe_epochs < 1 or self.sup_epochs < 1:
            raise ProtocolError("epochs must be >= 1")
        if self.total_rounds < 1:
            raise ProtocolError("total_rounds must be >= 1")

    @property
    def effective_boundary(self) -> PartitionBoundary:
        if self.protocol in ("fedavg", "fedavg_ft", "centralized"):
            return FULL_MODEL
        return self.boundary

    @property
    def aggregations_per_round(self) -> int:
        return {"pflfe": 2, "local_only": 0, "centralized": 0}.get(self.protocol, 1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    ema_decay: float = 0.99
    lfe_learning_rate: float | None = None
    aug_a: AugmentationSpec = DEFAULT_AUG_A
    aug_b: AugmentationSpec = DEFAULT_AUG_B
    weighting: str = "equal"  # or "data"
    eval_point: str = "after_aggregation"  # or "before_aggregation"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ProtocolError("batch_size must be >= 1")
        if self.weighting not in ("equal", "data"):
            raise ProtocolError(f"unknown weighting {self.weighting!r}")
        if self.eval_point not in ("after_aggregation", "before_aggregation"):
            raise ProtocolError(f"unknown eval_point {self.eval_point!r}")
        EmaConfig(self.ema_decay)

    @property
    def lfe_lr(self) -> float:
        return self.learning_rate if self.lfe_learning_rate is None else self.lfe_learning_rate


@dataclass
class ClientState:
    id: int
    train: ClientDataset
    test: ClientDataset
    params: ParameterSet
    optimizer: SgdState
    rng: np.random.Generator
    rng_seed: int
    target_model: ParameterSet | None = None
    lfe_spread: list[float] = field(default_factory=list)  # per LFE epoch, collapse monitor

    @property
    def model(self) -> ParameterSet:
        return self.params.subset(self.params.names("encoder", "decoder"))

    @property
    def projector(self) -> ParameterSet:
        return self.params.subset(self.params.names("projector"))


@dataclass
class FederationState:
    clients: list[ClientState]
    model_config: ModelConfig
    plan: RoundPlan
    train_config: TrainConfig
    ledger: CommLedger
    round: int = 0
    records: list[MetricsRecord] = field(default_factory=list)
    threads: int = 1
    checkpoint_dir: str | None = None
    central: ClientState | None = None
    cross_dice: list[list[float]] | None = None

    @property
    def boundary(self) -> PartitionBoundary:
        return self.plan.effective_boundary

    def map_clients(self, fn: Callable[[ClientState], object]) -> list:
        if self.threads <= 1 or len(self.clients) == 1:
            return [fn(c) for c in self.clients]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, self.clients))

    def shared_names(self) -> list[str]:
        return partition(self.clients[0].params, self.boundary).shared.names()


def _client_seed(base: int, client_id: int, stream: int) -> int:
    return int(np.random.SeedSequence([base, client_id, stream]).generate_state(1)[0])


def make_client(
    client_id: int,
    train: ClientDataset,
    test: ClientDataset,
    model_config: ModelConfig,
    shared_init: ParameterSet,
    shared_names: Sequence[str],
    model_seed: int,
    train_config: TrainConfig,
) -> ClientState:
    params = build_model(model_config, _client_seed(model_seed, client_id, 0))
    params.assign_from(shared_init, shared_names)
    rng_seed = _client_seed(model_seed, client_id, 1)
    return ClientState(
        id=client_id,
        train=train,
        test=test,
        params=params,
        optimizer=SgdState(train_config.learning_rate, train_config.momentum),
        rng=np.random.default_rng(rng_seed),
        rng_seed=rng_seed,
    )


def init_federation(
    datasets: Sequence[tuple[ClientDataset, ClientDataset]],
    model_config: ModelConfig,
    plan: RoundPlan,
    model_seed: int,
    train_config: TrainConfig | None = None,
    client_ids: Sequence[int] | None = None,
    threads: int = 1,
    checkpoint_dir: str | None = None,
) -> FederationState:
    """Build clients whose shared segment starts from one global init.

    Personalized layers and projectors are seeded per client.
    """
    train_config = train_config or TrainConfig()
    ids = list(range(len(datasets))) if client_ids is None else list(client_ids)
    if len(ids) != len(datasets) or len(set(ids)) != len(ids):
        raise ProtocolError("client ids must be unique and match the datasets")
    minimum = 1 if plan.protocol in ("local_only", "centralized") else 2
    if len(datasets) < minimum:
        raise ProtocolError(f"protocol {plan.protocol} needs at least {minimum} clients")
    for train, test in datasets:
        if len(train) == 0 or len(test) == 0:
            raise ProtocolError("every client needs non-empty train and test data")
    shared_init = build_model(model_config, model_seed)
    shared_names = partition(shared_init, plan.effective_boundary).shared.names()
    clients = [
        make_client(cid, train, test, model_config, shared_init, shared_names, model_seed, train_config)
        for cid, (train, test) in zip(ids, datasets)
    ]
    fed = FederationState(clients, model_config, plan, train_config, CommLedger(), threads=threads,
                          checkpoint_dir=checkpoint_dir)
    if plan.protocol == "centralized":
        pooled = ClientDataset(
            np.concatenate([c.train.images for c in clients]),
            np.concatenate([c.train.masks for c in clients]),
        )
        # the pooled pseudo-client takes the next free id so seed derivation stays non-negative
        fed.central = make_client(max(ids) + 1, pooled, pooled, model_config, shared_init, shared_init.names(),
                                  model_seed, train_config)
        for c in clients:
            c.params = fed.central.params
    return fed


# ---------------------------------------------------------------------------
# client-local stages


def _batches(client: ClientState, batch_size: int):
    order = client.rng.permutation(len(client.train))
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def local_feature_enhancement(client: ClientState, epochs: int, cfg: TrainConfig) -> list[float]:
    """Self-supervised stage on encoder+projector with an EMA target branch.

    The target copy exists only for the duration of this call. Returns the
    mean loss of each epoch.
    """
    if len(client.train) == 0:
        raise ProtocolError(f"client {client.id} has no training data")
    params = client.params
    online = params.subset(params.names("encoder", "projector"))
    client.target_model = params.copy(online.names())
    optimizer = client.optimizer
    optimizer.learning_rate = cfg.lfe_lr
    optimizer.reset()
    history = []
    try:
        for _ in range(epochs):
            losses, spreads = [], []
            for idx in _batches(client, cfg.batch_size):
                pairs = [augment_pair(img, cfg.aug_a, cfg.aug_b, client.rng) for img in client.train.images[idx]]
                v = np.stack([p[0] for p in pairs])
                vp = np.stack([p[1] for p in pairs])
                with no_grad():
                    t_v = forward_project(client.target_model, v)
                    t_vp = forward_project(client.target_model, vp)
                graph = ComputeGraph()
                with graph:
                    o_v = forward_project(params, v)
                    loss = lfe_total_loss(o_v, t_v, forward_project(params, vp), t_vp)
                graph.backward(loss, [t for _, t in online.items()])
                spreads.append(embedding_spread(o_v))
                sgd_step(online.items(), optimizer)
                ema_update(client.target_model, params, cfg.ema_decay)
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
            client.lfe_spread.append(float(np.mean(spreads)))
            if client.lfe_spread[-1] < COLLAPSE_SPREAD:
                log.warning("client %d: LFE embeddings near collapse (spread %.2e)", client.id, client.lfe_spread[-1])
    finally:
        client.target_model = None
    return history


def local_supervised(
    client: ClientState,
    epochs: int,
    cfg: TrainConfig,
    trainable: Sequence[str] | None = None,
) -> list[float]:
    """Dice + cross-entropy training; by default updates encoder+decoder.

    Parameters outside ``trainable`` are frozen (no gradient is computed for
    them). Returns the mean loss of each epoch.
    """
    if len(client.train) == 0:
        raise ProtocolError(f"client {client.id} has no training data")
    params = client.params
    names = params.names("encoder", "decoder") if trainable is None else list(trainable)
    frozen = [n for n in params.names("encoder", "decoder") if n not in set(names)]
    params.set_requires_grad(frozen, False)
    subset = params.subset(names)
    optimizer = client.optimizer
    optimizer.learning_rate = cfg.learning_rate
    optimizer.reset()
    history = []
    try:
        for _ in range(epochs):
            losses = []
            for idx in _batches(client, cfg.batch_size):
                graph = ComputeGraph()
                with graph:
                    loss = supervised_loss(forward_segment(params, client.train.images[idx]), client.train.masks[idx])
                graph.backward(loss, [t for _, t in subset.items()])
                sgd_step(subset.items(), optimizer)
                losses.append(loss.item())
            history.append(float(np.mean(losses)))
    finally:
        params.set_requires_grad(frozen, True)
    return history


def evaluate(params: ParameterSet, data: ClientDataset, chunk: int = 64) -> list[float]:
    """Per-image Dice of argmax predictions."""
    out: list[float] = []
    with no_grad():
        for start in range(0, len(data), chunk):
            probs = forward_segment(params, data.images[start:start + chunk]).data
            pred = probs.argmax(axis=1)
            out.extend(per_image_dice(pred, data.masks[start:start + chunk], probs.shape[1]))
    return out


# ---------------------------------------------------------------------------
# server


def aggregate_shared(
    clients: Sequence[ClientState],
    boundary: PartitionBoundary,
    ledger: CommLedger | None = None,
    round_index: int = 0,
    stage: str = "",
    weighting: str = "equal",
) -> ParameterSet:
    """Average the shared segment over clients and broadcast it back.

    Clients are averaged in id order, so the result does not depend on the
    order of ``clients``. Returns a copy of the averaged shared parameters.
    """
    if not clients:
        raise ProtocolError("aggregation needs at least one client")
    ordered = sorted(clients, key=lambda c: c.id)
    views = [partition(c.params, boundary).shared for c in ordered]
    names = views[0].names()
    for c, view in zip(ordered, views):
        if view.names() != names:
            raise ShapeError(f"client {c.id} shared names differ from client {ordered[0].id}")
        for n in names:
            if view[n].shape != views[0][n].shape:
                raise ShapeError(f"client {c.id} parameter {n}: {view[n].shape} vs {views[0][n].shape}")
    if weighting == "equal":
        weights = np.full(len(ordered), 1.0 / len(ordered))
    else:
        sizes = np.array([len(c.train) for c in ordered], dtype=np.float64)
        weights = sizes / sizes.sum()
    result = views[0].copy()
    for n in names:
        if len(ordered) == 1:
            continue
        stack = np.stack([view[n].data for view in views])
        mean = np.tensordot(weights, stack, axes=1)
        # elementwise agreement is returned bit-exactly (idempotent aggregation)
        result[n].data[...] = np.where(np.all(stack == stack[0], axis=0), stack[0], mean)
    if ledger is not None:
        ledger.record_aggregation(round_index, stage, [c.id for c in ordered], views[0])
    for view in views:
        view.assign_from(result, names)
    return result


# ---------------------------------------------------------------------------
# rounds


def _evaluate_all(fed: FederationState) -> list[list[float]]:
    return fed.map_clients(lambda c: evaluate(c.params, c.test))


def _record(fed: FederationState, per_image: list[list[float]]) -> MetricsRecord:
    acli, aimg, vdice = aggregate_metrics(per_image, [len(x) for x in per_image])
    record = MetricsRecord(
        round=fed.round,
        per_client_dice=[float(np.mean(x)) for x in per_image],
        dice_acli=acli,
        dice_aimg=aimg,
        vdice_acli=vdice,
        comm_cumulative_bytes=fed.ledger.total_bytes(),
        aggregation_events=fed.ledger.event_count(),
        client_ids=[c.id for c in fed.clients],
    )
    fed.records.append(record)
    log.info("%s round %d: dice_acli=%.4f vdice=%.4f", fed.plan.protocol, fed.round, acli, vdice)
    return record


def _aggregate(fed: FederationState, stage: str) -> None:
    aggregate_shared(fed.clients, fed.boundary, fed.ledger, fed.round, stage, fed.train_config.weighting)


def _lfe_all(fed: FederationState) -> None:
    fed.map_clients(lambda c: local_feature_enhancement(c, fed.plan.lfe_epochs, fed.train_config))


def _sup_all(fed: FederationState) -> None:
    fed.map_clients(lambda c: local_supervised(c, fed.plan.sup_epochs, fed.train_config))


def _final_aggregate_and_eval(fed: FederationState, stage: str) -> MetricsRecord:
    if fed.train_config.eval_point == "before_aggregation":
        scores = _evaluate_all(fed)
        _aggregate(fed, stage)
    else:
        _aggregate(fed, stage)
        scores = _evaluate_all(fed)
    return _record(fed, scores)


def run_round_pflfe(fed: FederationState) -> MetricsRecord:
    """LFE, aggregation I, supervised learning, aggregation II, evaluation."""
    fed.round += 1
    _lfe_all(fed)
    _aggregate(fed, "I")
    _sup_all(fed)
    record = _final_aggregate_and_eval(fed, "II")
    _checkpoint(fed)
    return record


def run_round_fc(fed: FederationState) -> MetricsRecord:
    """LFE then supervised learning locally, followed by one aggregation."""
    fed.round += 1
    _lfe_all(fed)
    _sup_all(fed)
    record = _final_aggregate_and_eval(fed, "I")
    _checkpoint(fed)
    return record


def _round_decoupled(fed: FederationState) -> MetricsRecord:
    fed.round += 1
    _sup_all(fed)
    record = _final_aggregate_and_eval(fed, "I")
    _checkpoint(fed)
    return record


def _round_fedavg(fed: FederationState, finetune: bool) -> MetricsRecord:
    fed.round += 1
    _sup_all(fed)
    _aggregate(fed, "I")
    if finetune:
        epochs = fed.plan.finetune_epochs or fed.plan.sup_epochs
        fed.map_clients(lambda c: local_supervised(c, epochs, fed.train_config))
    record = _record(fed, _evaluate_all(fed))
    _checkpoint(fed)
    return record


def _round_local(fed: FederationState) -> MetricsRecord:
    fed.round += 1
    _sup_all(fed)
    record = _record(fed, _evaluate_all(fed))
    _checkpoint(fed)
    return record


def _round_centralized(fed: FederationState) -> MetricsRecord:
    fed.round += 1
    local_supervised(fed.central, fed.plan.sup_epochs, fed.train_config)
    record = _record(fed, _evaluate_all(fed))
    _checkpoint(fed)
    return record


def run_round(fed: FederationState) -> MetricsRecord:
    protocol = fed.plan.protocol
    if protocol == "pflfe":
        return run_round_pflfe(fed)
    if protocol == "fc_pflfe":
        return run_round_fc(fed)
    if protocol == "decoupled_no_lfe":
        return _round_decoupled(fed)
    if protocol == "fedavg":
        return _round_fedavg(fed, finetune=False)
    if protocol == "fedavg_ft":
        return _round_fedavg(fed, finetune=fed.round + 1 == fed.plan.total_rounds)
    if protocol == "local_only":
        return _round_local(fed)
    if protocol == "centralized":
        return _round_centralized(fed)
    raise ProtocolError(f"unknown protocol {protocol!r}")


def run(fed: FederationState) -> list[MetricsRecord]:
    """Run every remaining round of the plan."""
    while fed.round < fed.plan.total_rounds:
        run_round(fed)
    if fed.plan.protocol == "local_only" and fed.cross_dice is None:
        fed.cross_dice = cross_client_dice(fed)
    return fed.records


def run_baseline(fed: FederationState, protocol: str) -> list[MetricsRecord]:
    if protocol not in BASELINES:
        raise ProtocolError(f"unknown baseline {protocol!r}; expected one of {BASELINES}")
    if fed.plan.protocol != protocol:
        raise ProtocolError(f"federation was initialised for {fed.plan.protocol!r}, not {protocol!r}")
    return run(fed)


def cross_client_dice(fed: FederationState) -> list[list[float]]:
    """``[i][j]`` = mean Dice of client i's model on client j's test set."""
    return [[float(np.mean(evaluate(ci.params, cj.test))) for cj in fed.clients] for ci in fed.clients]


def cross_client_deficit(matrix: Sequence[Sequence[float]]) -> float:
    """Own-client Dice minus mean off-diagonal Dice."""
    m = np.asarray(matrix, dtype=np.float64)
    own = np.diag(m).mean()
    off = m[~np.eye(len(m), dtype=bool)].mean()
    return float(own - off)


def _checkpoint(fed: FederationState) -> None:
    if not fed.checkpoint_dir:
        return
    os.makedirs(fed.checkpoint_dir, exist_ok=True)
    r = fed.round
    for c in fed.clients:
        checkpoint.save(os.path.join(fed.checkpoint_dir, f"round_{r}_client_{c.id}.ckpt"), c.params.items())
    shared = partition(fed.clients[0].params, fed.boundary).shared
    checkpoint.save(os.path.join(fed.checkpoint_dir, f"round_{r}_global.ckpt"), shared.items())


# ---------------------------------------------------------------------------
# domain adaptation


@dataclass
class AdaptResult:
    client_id: int
    dice: float
    encoder_frozen: bool
    per_image: list[float]


def domain_adapt(
    fed: FederationState,
    unseen_id: int,
    train: ClientDataset,
    test: ClientDataset,
    finetune_epochs: int,
    model_seed: int = 0,
) -> AdaptResult:
    """Freeze the federation's encoder on an unseen client; fit a fresh decoder."""
    if unseen_id in {c.id for c in fed.clients}:
        raise ProtocolError(f"client {unseen_id} took part in the federation")
    seen = {c.train.digest() for c in fed.clients} | {c.test.digest() for c in fed.clients}
    if train.digest() in seen or test.digest() in seen:
        raise ProtocolError(f"client {unseen_id} data overlaps the federation's data")
    source = fed.clients[0].params
    enc_names = source.names("encoder")
    digests = {c.params.digest(enc_names) for c in fed.clients}
    if len(digests) != 1:
        raise ProtocolError("clients do not share one aggregated encoder")
    client = make_client(unseen_id, train, test, fed.model_config, source, enc_names, model_seed, fed.train_config)
    before = client.params.digest(enc_names)
    if finetune_epochs > 0:
        local_supervised(client, finetune_epochs, fed.train_config, trainable=client.params.names("decoder"))
    frozen = client.params.digest(enc_names) == before
    if not frozen:
        raise ProtocolError("encoder changed during decoder fine-tuning")
    scores = evaluate(client.params, test)
    return AdaptResult(unseen_id, float(np.mean(scores)), frozen, scores)


def leave_one_out(
    datasets: Sequence[tuple[ClientDataset, ClientDataset]],
    model_config: ModelConfig,
    plan: RoundPlan,
    model_seed: int,
    finetune_epochs: int,
    train_config: TrainConfig | None = None,
    threads: int = 1,
    client_ids: Sequence[int] | None = None,
) -> list[AdaptResult]:
    """For each client: federate the others, then adapt to the held-out one."""
    all_ids = list(range(len(datasets))) if client_ids is None else list(client_ids)
    results = []
    for held in range(len(datasets)):
        keep = [i for i in range(len(datasets)) if i != held]
        fed = init_federation([datasets[i] for i in keep], model_config, plan, model_seed, train_config,
                              client_ids=[all_ids[i] for i in keep], threads=threads)
        run(fed)
        train, test = datasets[held]
        results.append(domain_adapt(fed, all_ids[held], train, test, finetune_epochs, model_seed))
    return results
