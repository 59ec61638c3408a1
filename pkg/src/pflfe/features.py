"""Pixel-level encoder features and Gaussian KL diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, no_grad
from .data_synth import ClientDataset
from .segnet import ParameterSet, encode

VAR_FLOOR = 1e-6
# Variance floor for the summary divergences, in units of the pooled per-channel
# variance. Channels that are silent for one client would otherwise dominate
# the mean through an arbitrary absolute floor.
REL_VAR_FLOOR = 1e-2
CLASSES = ("fg", "bg")


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class ClientFeatures:
    fg: np.ndarray  # (n_fg, C)
    bg: np.ndarray  # (n_bg, C)
    empty: tuple[str, ...] = ()

    def of(self, cls: str) -> np.ndarray:
        return self.fg if cls == "fg" else self.bg


@dataclass
class FeatureSampleSet:
    clients: dict[int, ClientFeatures] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        for cf in self.clients.values():
            for arr in (cf.fg, cf.bg):
                if arr.size:
                    return arr.shape[1]
        return 0

    def pooled(self, cls: str) -> np.ndarray:
        parts = [cf.of(cls) for cf in self.clients.values() if len(cf.of(cls))]
        return np.concatenate(parts) if parts else np.zeros((0, self.dim))


def feature_coordinate(row: int, col: int, downsamplings: int) -> tuple[int, int]:
    return row >> downsamplings, col >> downsamplings


def extract_pixel_features(
    params: ParameterSet,
    data: ClientDataset,
    max_per_class: int = 200,
    seed: int = 0,
) -> ClientFeatures:
    """Encoder feature vectors at labelled pixels, subsampled per class.

    Pixel ``(r, c)`` reads the feature map at ``(r >> L, c >> L)`` for ``L``
    downsampling stages.
    """
    depth = params.config.depth
    with no_grad():
        fmap, _ = encode(params, Tensor(data.images))
    fmap = fmap.data.transpose(0, 2, 3, 1)  # (N, h, w, C)
    rng = np.random.default_rng(seed)
    out, empty = {}, []
    for cls in CLASSES:
        hit = data.masks > 0 if cls == "fg" else data.masks == 0
        n_idx, r_idx, c_idx = np.nonzero(hit)
        if len(n_idx) > max_per_class:
            keep = np.sort(rng.choice(len(n_idx), size=max_per_class, replace=False))
            n_idx, r_idx, c_idx = n_idx[keep], r_idx[keep], c_idx[keep]
        if len(n_idx) == 0:
            empty.append(cls)
        out[cls] = fmap[n_idx, r_idx >> depth, c_idx >> depth]
    return ClientFeatures(out["fg"], out["bg"], tuple(empty))


def fit_diag_gaussian(samples: np.ndarray, floor: float = VAR_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    if len(samples) < 2:
        raise InsufficientSamplesError(f"need >= 2 samples, got {len(samples)}")
    return samples.mean(axis=0), np.maximum(samples.var(axis=0), floor)


def gaussian_kl(mu_p, var_p, mu_q, var_q) -> float:
    """KL(p || q) for diagonal Gaussians."""
    mu_p, var_p, mu_q, var_q = (np.asarray(a, dtype=np.float64) for a in (mu_p, var_p, mu_q, var_q))
    return float(0.5 * np.sum(np.log(var_q / var_p) + (var_p + (mu_p - mu_q) ** 2) / var_q - 1.0))


def symmetric_kl(p: np.ndarray, q: np.ndarray, floor: float = VAR_FLOOR) -> float:
    """KL(p||q) + KL(q||p) between diagonal Gaussians fitted to two sample sets."""
    mp, vp = fit_diag_gaussian(p, floor)
    mq, vq = fit_diag_gaussian(q, floor)
    return gaussian_kl(mp, vp, mq, vq) + gaussian_kl(mq, vq, mp, vp)


def standardized(features: FeatureSampleSet) -> FeatureSampleSet:
    """Divide every channel by its std over all clients and classes.

    KL is invariant to a common per-channel rescaling, so this only changes
    how the variance floor acts: it becomes relative to the channel's scale.
    Channels that are constant everywhere are left at zero.
    """
    everything = np.concatenate([features.pooled("fg"), features.pooled("bg")])
    if len(everything) == 0:
        return features
    std = everything.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return FeatureSampleSet({
        cid: ClientFeatures(cf.fg / scale, cf.bg / scale, cf.empty) for cid, cf in features.clients.items()
    })


def drift_table(
    features: FeatureSampleSet,
    floor: float = REL_VAR_FLOOR,
    standardize: bool = True,
) -> list[tuple[int, str, float]]:
    """Symmetric KL of each client's per-class distribution to the pooled one.

    By default channels are standardized first so ``floor`` is relative to
    each channel's scale; ``standardize=False, floor=VAR_FLOOR`` gives the
    plain absolute-floor estimator.
    """
    if standardize:
        features = standardized(features)
    rows = []
    for cls in CLASSES:
        pooled = features.pooled(cls)
        if len(pooled) < 2:
            continue
        for cid, cf in features.clients.items():
            if len(cf.of(cls)) >= 2:
                rows.append((cid, cls, symmetric_kl(cf.of(cls), pooled, floor)))
    return rows


def kl_feature_divergence(
    features: FeatureSampleSet,
    mode: str = "drift",
    floor: float = REL_VAR_FLOOR,
    standardize: bool = True,
) -> float:
    """``drift``: mean client-vs-global KL (lower = less drift).
    ``interclass``: KL between pooled foreground and background (higher = more separated).
    """
    if mode == "interclass":
        if standardize:
            features = standardized(features)
        return symmetric_kl(features.pooled("fg"), features.pooled("bg"), floor)
    if mode != "drift":
        raise ValueError(f"unknown KL mode {mode!r}")
    rows = drift_table(features, floor, standardize)
    if not rows:
        raise InsufficientSamplesError("no client/class pair has enough samples")
    return float(np.mean([kl for _, _, kl in rows]))
