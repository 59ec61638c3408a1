"""Training losses and the EMA target update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .segnet import ParameterSet

DICE_SMOOTH = 1.0
CE_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class DegenerateEmbeddingError(ValueError):
    """An embedding with (near) zero norm cannot be normalized."""


@dataclass(frozen=True)
class EmaConfig:
    decay: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {self.decay}")


def _check_norms(x: np.ndarray, which: str) -> None:
    norms = np.sqrt((x * x).sum(axis=-1))
    if np.any(norms < NORM_FLOOR):
        raise DegenerateEmbeddingError(f"{which} embedding has norm below {NORM_FLOOR}")


def lfe_loss(online, target) -> Tensor:
    """Squared distance between unit-normalized embeddings, ``2 - 2 cos``.

    Accepts single vectors ``(D,)`` or batches ``(N, D)`` (batch mean). The
    target is always treated as a constant.
    """
    online = ag.as_tensor(online)
    target = ag.as_tensor(target)
    if online.shape != target.shape:
        raise ShapeError(f"lfe_loss: online {online.shape} vs target {target.shape}")
    _check_norms(online.data, "online")
    _check_norms(target.data, "target")
    t = target.data / np.sqrt((target.data * target.data).sum(axis=-1, keepdims=True))
    diff = ag.sub(ag.l2_normalize(online, axis=-1), Tensor(t))
    per_sample = ag.sum(ag.mul(diff, diff), axis=-1)
    return ag.mean(per_sample)


def lfe_total_loss(v_online, v_target, vp_online, vp_target) -> Tensor:
    """Symmetric loss over views V, V': ``L(O(V), T(V')) + L(O(V'), T(V))``."""
    return ag.add(lfe_loss(v_online, vp_target), lfe_loss(vp_online, v_target))


def embedding_spread(embeddings) -> float:
    """Mean per-dimension std of L2-normalized embeddings across a batch.

    Representational collapse (every input mapped to one direction) drives
    this to 0; a spread-out batch sits near ``1/sqrt(dim)``.
    """
    z = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    z = z.reshape(len(z), -1)
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return float((z / norms).std(axis=0).mean())


def _split(probs: Tensor, mask) -> tuple[Tensor, np.ndarray]:
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if probs.ndim == mask.ndim:
        # a bare foreground-probability map
        if probs.shape != mask.shape:
            raise ShapeError(f"probs {probs.shape} vs mask {mask.shape}")
        probs = ag.reshape(probs, (1, 1) + probs.shape if probs.ndim == 2 else (probs.shape[0], 1) + probs.shape[1:])
        fg = (mask.reshape(probs.shape) > 0).astype(np.float64)
        return probs, fg
    if probs.ndim == mask.ndim + 1:
        if probs.ndim == 3:
            probs = ag.reshape(probs, (1,) + probs.shape)
            mask = mask[None]
        if probs.shape[0] != mask.shape[0] or probs.shape[2:] != mask.shape[1:]:
            raise ShapeError(f"probs {probs.shape} vs mask {mask.shape}")
        labels = mask.astype(np.int64)
        k = probs.shape[1]
        if labels.min() < 0 or labels.max() >= k:
            raise ShapeError(f"mask labels outside [0, {k})")
        onehot = (labels[:, None] == np.arange(k)[None, :, None, None]).astype(np.float64)
        return probs, onehot
    raise ShapeError(f"probs {probs.shape} incompatible with mask {mask.shape}")


def dice_loss(probs, mask, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss ``1 - (2 sum(p y) + eps) / (sum p + sum y + eps)``.

    Computed per image and per foreground class, then averaged. ``probs``
    is either class probabilities ``([N,] K, H, W)`` with an integer mask
    ``([N,] H, W)``, or a foreground map with the same shape as the mask.
    """
    probs = ag.as_tensor(probs)
    probs, onehot = _split(probs, mask)
    if onehot.shape[1] == 1:
        p, y = probs, onehot
    else:
        p = ag.slice_axis(probs, 1, onehot.shape[1], axis=1)
        y = onehot[:, 1:]
    inter = ag.sum(ag.mul(p, Tensor(y)), axis=(2, 3))
    p_sum = ag.sum(p, axis=(2, 3))
    ratio = ag.div(ag.add(ag.mul(inter, 2.0), smooth), ag.add(p_sum, y.sum(axis=(2, 3)) + smooth))
    return ag.sub(1.0, ag.mean(ratio))


def ce_loss(probs, mask, floor: float = CE_FLOOR) -> Tensor:
    """Mean pixel cross-entropy ``-log max(p_true, floor)``."""
    probs = ag.as_tensor(probs)
    probs, onehot = _split(probs, mask)
    if onehot.shape[1] == 1:
        raise ShapeError("ce_loss needs per-class probabilities")
    p_true = ag.sum(ag.mul(probs, Tensor(onehot)), axis=1)
    return ag.mul(ag.mean(ag.log(p_true, floor)), -1.0)


def supervised_loss(probs, mask) -> Tensor:
    return ag.add(dice_loss(probs, mask), ce_loss(probs, mask))


def ema_update(target: ParameterSet, online: ParameterSet, cfg: EmaConfig | float) -> None:
    """theta_t <- tau*theta_t + (1 - tau)*theta_o for every tensor in ``target``."""
    tau = cfg.decay if isinstance(cfg, EmaConfig) else float(cfg)
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {tau}")
    for name in target:
        t, o = target[name].data, online[name].data
        if t.shape != o.shape:
            raise ShapeError(f"ema_update {name}: {t.shape} vs {o.shape}")
        mixed = tau * t + (1.0 - tau) * o
        # keep the result inside [min, max] of the two operands despite rounding
        np.clip(mixed, np.minimum(t, o), np.maximum(t, o), out=mixed)
        t[...] = mixed
