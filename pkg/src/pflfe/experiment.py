"""Experiment drivers shared by the CLI and the acceptance suite.

A driver turns a :class:`RunConfig` plus a seed into datasets, runs one
protocol end to end and gathers everything the reports need.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data_synth import ClientDataset, gen_client_dataset
from .federation import AdaptResult, RoundPlan, cross_client_deficit, init_federation, leave_one_out, run
from .features import FeatureSampleSet, InsufficientSamplesError, extract_pixel_features, kl_feature_divergence
from .ledger import CommLedger
from .metrics import MetricsRecord, convergence_tracker
from .segnet import PartitionBoundary, partition

log = logging.getLogger(__name__)

CONVERGENCE_FRACTION = 0.95


def build_datasets(cfg: RunConfig, seed: int) -> list[tuple[ClientDataset, ClientDataset]]:
    out = []
    for client in cfg.clients:
        train, test = gen_client_dataset(client, seed)
        out.append((ClientDataset.from_samples(train), ClientDataset.from_samples(test)))
    return out


def data_hash(datasets: Sequence[tuple[ClientDataset, ClientDataset]]) -> str:
    h = hashlib.sha256()
    for train, test in datasets:
        h.update(train.digest().encode())
        h.update(test.digest().encode())
    return h.hexdigest()[:16]


@dataclass
class RunResult:
    protocol: str
    seed: int
    records: list[MetricsRecord]
    ledger: CommLedger
    features: FeatureSampleSet
    drift_kl: float | None
    interclass_kl: float | None
    data_hash: str
    shared_elements: int
    personal_elements: int
    aggregations_per_round: int
    cross_dice: list[list[float]] | None = None
    label: str = ""

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]

    @property
    def name(self) -> str:
        return self.label or self.protocol

    def convergence(self, fraction: float = CONVERGENCE_FRACTION):
        return convergence_tracker(self.records, fraction)

    @property
    def cross_deficit(self) -> float | None:
        return None if self.cross_dice is None else cross_client_deficit(self.cross_dice)


def _features(fed, seed: int, max_per_class: int) -> FeatureSampleSet:
    clients = {}
    for c in fed.clients:
        sub_seed = int(np.random.SeedSequence([seed, c.id, 7]).generate_state(1)[0])
        clients[c.id] = extract_pixel_features(c.params, c.test, max_per_class, sub_seed)
    return FeatureSampleSet(clients)


def _kl(features: FeatureSampleSet, mode: str) -> float | None:
    try:
        return kl_feature_divergence(features, mode)
    except InsufficientSamplesError as exc:
        log.warning("%s KL skipped: %s", mode, exc)
        return None


def run_protocol(
    cfg: RunConfig,
    protocol: str,
    seed: int,
    boundary: PartitionBoundary | None = None,
    label: str = "",
    checkpoint_dir: str | None = None,
    datasets: Sequence[tuple[ClientDataset, ClientDataset]] | None = None,
) -> RunResult:
    """Run ``protocol`` for the configured number of rounds from ``seed``."""
    plan = replace(cfg.plan, protocol=protocol)
    if boundary is not None:
        plan = replace(plan, boundary=boundary)
    datasets = build_datasets(cfg, seed) if datasets is None else datasets
    ids = [c.client_id for c in cfg.clients]
    fed = init_federation(datasets, cfg.model, plan, seed, cfg.train, client_ids=ids,
                          threads=cfg.threads, checkpoint_dir=checkpoint_dir)
    log.info("running %s seed=%d rounds=%d boundary=%s", protocol, seed, plan.total_rounds,
             plan.effective_boundary.label())
    records = run(fed)
    split = partition(fed.clients[0].params, plan.effective_boundary)
    features = _features(fed, seed, cfg.features_per_class)
    return RunResult(
        protocol=protocol,
        seed=seed,
        records=records,
        ledger=fed.ledger,
        features=features,
        drift_kl=_kl(features, "drift"),
        interclass_kl=_kl(features, "interclass"),
        data_hash=data_hash(datasets),
        shared_elements=split.shared.num_elements(),
        personal_elements=split.personal.num_elements(),
        aggregations_per_round=plan.aggregations_per_round,
        cross_dice=fed.cross_dice,
        label=label,
    )


def compare(cfg: RunConfig, protocols: Sequence[str]) -> list[RunResult]:
    """Every protocol on every seed, from identical data and initial encoders."""
    results = []
    for seed in cfg.seeds:
        datasets = build_datasets(cfg, seed)
        for protocol in protocols:
            results.append(run_protocol(cfg, protocol, seed, datasets=datasets))
    return results


@dataclass(frozen=True)
class AblationSetting:
    label: str
    protocol: str
    boundary: PartitionBoundary


def ablation_settings(cfg: RunConfig) -> list[AblationSetting]:
    """No LFE, growing numbers of personalized decoder layers, whole decoder."""
    layers = cfg.model.decoder_layer_count
    settings = [AblationSetting("without_lfe", "decoupled_no_lfe", PartitionBoundary.all_decoder())]
    for k in range(1, layers, 2):
        settings.append(AblationSetting(f"last_{k}", "pflfe", PartitionBoundary.last_k_layers(k)))
    settings.append(AblationSetting("all_decoder", "pflfe", PartitionBoundary.all_decoder()))
    return settings


def ablate(cfg: RunConfig) -> list[RunResult]:
    results = []
    for seed in cfg.seeds:
        datasets = build_datasets(cfg, seed)
        for s in ablation_settings(cfg):
            results.append(run_protocol(cfg, s.protocol, seed, boundary=s.boundary, label=s.label,
                                        datasets=datasets))
    return results


@dataclass
class AdaptRow:
    protocol: str
    seed: int
    held_out: int
    dice: float
    encoder_frozen: bool
    held_out_hash: str
    excluded: bool  # held-out train/test digests absent from the federation's data


@dataclass
class AdaptStudy:
    rows: list[AdaptRow] = field(default_factory=list)

    def mean_dice(self, protocol: str, seed: int) -> float:
        vals = [r.dice for r in self.rows if r.protocol == protocol and r.seed == seed]
        return float(np.mean(vals))


def domain_adaptation(cfg: RunConfig, protocols: Sequence[str]) -> AdaptStudy:
    """Leave-one-client-out: federate the rest, freeze its encoder, fit a decoder."""
    rounds = cfg.adapt_rounds or cfg.plan.total_rounds
    study = AdaptStudy()
    for seed in cfg.seeds:
        datasets = build_datasets(cfg, seed)
        ids = [c.client_id for c in cfg.clients]
        for protocol in protocols:
            plan: RoundPlan = replace(cfg.plan, protocol=protocol, total_rounds=rounds)
            log.info("domain adaptation %s seed=%d rounds=%d", protocol, seed, rounds)
            results: list[AdaptResult] = leave_one_out(datasets, cfg.model, plan, seed, cfg.adapt_epochs,
                                                       cfg.train, threads=cfg.threads, client_ids=ids)
            for pos, res in enumerate(results):
                fed_digests = {part.digest() for i, d in enumerate(datasets) if i != pos for part in d}
                excluded = not ({part.digest() for part in datasets[pos]} & fed_digests)
                study.rows.append(AdaptRow(
                    protocol=protocol,
                    seed=seed,
                    held_out=ids[pos],
                    dice=res.dice,
                    encoder_frozen=res.encoder_frozen,
                    held_out_hash=data_hash([datasets[pos]]),
                    excluded=excluded,
                ))
    return study


def summarize(results: Sequence[RunResult]) -> dict[str, dict[str, float]]:
    """Seed means per run name."""
    out: dict[str, dict[str, list[float]]] = {}
    for r in results:
        row = out.setdefault(r.name, {"dice_acli": [], "dice_aimg": [], "vdice_acli": [], "drift_kl": []})
        row["dice_acli"].append(r.final.dice_acli)
        row["dice_aimg"].append(r.final.dice_aimg)
        row["vdice_acli"].append(r.final.vdice_acli)
        if r.drift_kl is not None:
            row["drift_kl"].append(r.drift_kl)
    return {k: {m: float(np.mean(v)) if v else float("nan") for m, v in row.items()} for k, row in out.items()}


__all__ = [
    "AblationSetting", "AdaptRow", "AdaptStudy", "RunResult", "ablate", "ablation_settings",
    "build_datasets", "compare", "data_hash", "domain_adaptation", "run_protocol", "summarize",
]
