"""Dice statistics and convergence tracking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class MetricsRecord:
    round: int
    per_client_dice: list[float]
    dice_acli: float
    dice_aimg: float
    vdice_acli: float
    comm_cumulative_bytes: int
    aggregation_events: int = 0
    client_ids: list[int] = field(default_factory=list)


def dice_coefficient(pred_mask, gt_mask) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def per_image_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int = 2) -> list[float]:
    """Dice per image, averaged over foreground classes when there are several."""
    out = []
    for p, g in zip(pred, gt):
        scores = [dice_coefficient(p == c, g == c) for c in range(1, num_classes)]
        out.append(float(np.mean(scores)))
    return out


def aggregate_metrics(
    per_client_dices: Sequence[Sequence[float]],
    test_counts: Sequence[int] | None = None,
) -> tuple[float, float, float]:
    """Return ``(dice_acli, dice_aimg, vdice_acli)``.

    dice_acli is the unweighted mean of client means, dice_aimg the mean over
    all test images (client means weighted by test counts) and vdice_acli the
    population standard deviation of client means. The spread is a standard
    deviation, not a variance: it is the quantity that reproduces published
    client-spread figures from their per-client columns.
    """
    if not per_client_dices or any(len(d) == 0 for d in per_client_dices):
        raise ValueError("aggregate_metrics needs a non-empty Dice list per client")
    means = np.array([np.mean(d) for d in per_client_dices], dtype=np.float64)
    counts = np.array(
        [len(d) for d in per_client_dices] if test_counts is None else test_counts, dtype=np.float64
    )
    if len(counts) != len(means) or np.any(counts <= 0):
        raise ValueError("test_counts must give one positive count per client")
    acli = float(means.mean())
    aimg = float((means * counts).sum() / counts.sum())
    vdice = float(np.sqrt(((means - acli) ** 2).mean()))
    return acli, aimg, vdice


@dataclass
class Convergence:
    rounds_to_target: int | None  # None: not reached
    target: float
    curve: list[tuple[int, float]]

    @property
    def reached(self) -> bool:
        return self.rounds_to_target is not None


NOT_REACHED = None


def convergence_tracker(records: Sequence[MetricsRecord], target_fraction: float) -> Convergence:
    """First round whose dice_acli reaches ``target_fraction`` of the final one."""
    if not records:
        raise ValueError("no records")
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError("target_fraction must lie in (0, 1]")
    curve = [(r.round, r.dice_acli) for r in records]
    target = target_fraction * records[-1].dice_acli
    hit = next((rnd for rnd, value in curve if value >= target), NOT_REACHED)
    return Convergence(hit, target, curve)


def events_to_target(records: Sequence[MetricsRecord], target_fraction: float) -> int | None:
    """Like :func:`convergence_tracker` but counted in aggregation events."""
    conv = convergence_tracker(records, target_fraction)
    if conv.rounds_to_target is None:
        return None
    rec = next(r for r in records if r.round == conv.rounds_to_target)
    return rec.aggregation_events
