"""Training objectives: token cross-entropy and the fixed-target scale loss.

The scale loss anchors the per-token scale statistic of the pre-logit
residual stream to a scalar target frozen from a warmup EMA. It is the
explicit counterpart of the implicit anchoring a final norm provides.
"""

from __future__ import annotations

import numpy as np

from .errors import CalibrationError, ContractError, DimensionError
from .norms import ema_bias_correction, rms_scale
from .tensor import Tensor, constant, exp, log, reduce_mean, reduce_sum, sqrt, take_last_axis

SCALE_STATS = ("rms-r", "ln-sigma")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token cross-entropy over unmasked positions.

    ``logits`` is [..., V]; ``targets`` holds class ids with the leading
    shape of ``logits``. ``mask`` (same leading shape) marks positions that
    count; an all-false mask is a contract error.
    """
    v = logits.shape[-1]
    n = logits.size // v
    flat = logits.reshape((n, v))
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"targets length {targets.shape[0]} != positions {n}")
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= v:
        raise ContractError("target id out of range")

    # log-sum-exp with a detached row max; the shift cancels in the loss
    row_max = constant(flat.data.max(axis=-1, keepdims=True))
    shifted = flat - row_max
    lse = log(reduce_sum(exp(shifted), axis=-1))
    picked = take_last_axis(shifted, targets)
    per_token = lse - picked

    if mask is None:
        return reduce_mean(per_token)
    keep = np.asarray(mask, dtype=bool).reshape(-1)
    if keep.shape[0] != n:
        raise DimensionError("mask length must match positions")
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy: empty mask")
    weights = constant(keep.astype(np.float32))
    return reduce_sum(per_token * weights) / np.float32(count)


def scale_stat(h: Tensor, stat: str, eps: float = 1e-6) -> Tensor:
    """Per-token scale: r(h) for "rms-r", sigma_h for "ln-sigma"."""
    if stat == "rms-r":
        return rms_scale(h, eps).reshape(h.shape[:-1])
    if stat == "ln-sigma":
        centered = h - reduce_mean(h, axis=-1, keepdims=True)
        sigma = sqrt(reduce_mean(centered * centered, axis=-1, keepdims=True) + np.float32(eps))
        return sigma.reshape(h.shape[:-1])
    raise ContractError(f"unknown scale stat {stat!r}, expected one of {SCALE_STATS}")


class AuxAnchor:
    """Fixed-target anchor for the pre-logit scale statistic.

    During warmup, ``update`` tracks an EMA of the batch-mean scale;
    ``freeze`` pins the bias-corrected value as the immutable target. After
    freezing, ``loss`` penalizes squared deviations of per-token scales
    from the target.
    """

    def __init__(self, lam: float, mu: float, stat: str = "rms-r", eps: float = 1e-6):
        if stat not in SCALE_STATS:
            raise ContractError(f"stat must be one of {SCALE_STATS}")
        if lam < 0 or not 0 < mu <= 1:
            raise ContractError("need lambda >= 0 and mu in (0, 1]")
        self.lam = float(lam)
        self.mu = float(mu)
        self.stat = stat
        self.eps = float(eps)
        self.ema_s = 0.0
        self.ema_count = 0
        self.s_tgt: float | None = None

    @classmethod
    def with_target(cls, lam: float, s_tgt: float, stat: str = "rms-r", eps: float = 1e-6) -> "AuxAnchor":
        """Anchor with an already-frozen target (verification probes)."""
        if s_tgt <= 0:
            raise ContractError("s_tgt must be positive")
        anchor = cls(lam, mu=1.0, stat=stat, eps=eps)
        anchor.s_tgt = float(s_tgt)
        return anchor

    @property
    def frozen(self) -> bool:
        return self.s_tgt is not None

    def update(self, h: Tensor | np.ndarray, mask: np.ndarray | None = None) -> None:
        """Fold one batch's mean scale into the warmup EMA."""
        if self.frozen:
            raise ContractError("aux anchor already frozen")
        data = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float32)
        tokens = data.reshape(-1, data.shape[-1])
        if mask is not None:
            keep = np.asarray(mask, dtype=bool).reshape(-1)
            tokens = tokens[keep]
        if tokens.shape[0] == 0:
            raise ContractError("aux update: no unmasked tokens")
        if self.stat == "ln-sigma":
            tokens = tokens - tokens.mean(axis=-1, keepdims=True)
        batch_mean = float(np.sqrt((tokens * tokens).mean(axis=-1) + self.eps).mean())
        self.ema_s = (1.0 - self.mu) * self.ema_s + self.mu * batch_mean
        self.ema_count += 1

    def freeze(self) -> float:
        """Pin the target to the bias-corrected EMA; immutable afterwards."""
        if self.frozen:
            raise ContractError("aux anchor already frozen")
        if self.ema_count < 1:
            raise CalibrationError("freeze() before any update()")
        self.s_tgt = self.ema_s / ema_bias_correction(self.mu, self.ema_count)
        return self.s_tgt

    def loss(self, h: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """lambda * mean over unmasked tokens of (s(h) - s_tgt)^2."""
        if not self.frozen:
            raise ContractError("aux loss requires a frozen target")
        scales = scale_stat(h, self.stat, self.eps)
        flat = scales.reshape((scales.size,))
        dev = flat - np.float32(self.s_tgt)
        sq = dev * dev
        if mask is None:
            return reduce_mean(sq) * np.float32(self.lam)
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape[0] != flat.size:
            raise DimensionError("mask length must match token count")
        count = int(keep.sum())
        if count == 0:
            raise ContractError("aux loss: empty mask")
        weights = constant(keep.astype(np.float32))
        return reduce_sum(sq * weights) * np.float32(self.lam / count)


def combined_loss(ce: Tensor, aux: Tensor | None = None) -> Tensor:
    """Total objective: cross-entropy plus the anchoring term when enabled."""
    return ce if aux is None else ce + aux
