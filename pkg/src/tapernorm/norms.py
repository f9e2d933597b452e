"""Normalization layers, their gated taper variants, and the gate schedule.

A taper layer lives through two phases. During warmup the gate is held at
1, the layer behaves exactly like its plain norm, and it accumulates EMA
statistics of its inputs. At calibration those statistics freeze into a
per-layer scalar ``c`` chosen so the sample-independent scaling branch
matches the normalized branch in least squares; the per-feature gain is
copied and stays trainable. Afterwards the gate may decay toward 0, where
the layer is a fixed linear (rms) or affine (ln) map.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ContractError, DimensionError
from .tensor import Tensor, constant, reduce_mean, rms_normalize, sqrt

WARMUP = "warmup"
CALIBRATED = "calibrated"

DEFAULT_EPS = 1e-6
CSTAR_DELTA = 1e-8  # stabilizer in the calibration ratio


# -- per-token statistic instrumentation -------------------------------------

_COUNTER: "dict[str, int] | None" = None


@contextlib.contextmanager
def count_reductions():
    """Collect per-layer counts of per-token statistic computations.

    Yields a dict mapping layer name to the number of per-token reductions
    (one per rms scale, two per layernorm mean/variance pair) performed by
    forwards executed inside the block.
    """
    global _COUNTER
    if _COUNTER is not None:
        raise ContractError("reduction counters do not nest")
    _COUNTER = {}
    try:
        yield _COUNTER
    finally:
        _COUNTER = None


def _tick(name: str, n: int) -> None:
    if _COUNTER is not None and n:
        _COUNTER[name] = _COUNTER.get(name, 0) + n


# -- calibration statistics collection ----------------------------------------

_EMA_COLLECT: "tuple[bool, np.ndarray | None]" = (False, None)


@contextlib.contextmanager
def collect_calibration_stats(mask: np.ndarray | None = None):
    """While active, warmup-phase taper layers fold their forward inputs
    into the calibration EMAs (one update per layer per forward)."""
    global _EMA_COLLECT
    if _EMA_COLLECT[0]:
        raise ContractError("calibration collection does not nest")
    _EMA_COLLECT = (True, mask)
    try:
        yield
    finally:
        _EMA_COLLECT = (False, None)


# -- functional norms ---------------------------------------------------------


def rms_scale(h: Tensor, eps: float) -> Tensor:
    """Per-token scale r(h) = sqrt(mean(h^2) + eps), kept on the graph."""
    return sqrt(reduce_mean(h * h, axis=-1, keepdims=True) + np.float32(eps))


def rmsnorm(h: Tensor, gamma: Tensor, eps: float) -> Tensor:
    return rms_normalize(h, gamma, eps)


def layernorm(h: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    centered = h - reduce_mean(h, axis=-1, keepdims=True)
    sigma = sqrt(reduce_mean(centered * centered, axis=-1, keepdims=True) + np.float32(eps))
    return (centered / sigma) * gamma + beta


def gate_value(sched: "GateSchedule", k: int) -> float:
    """Cosine gate: 1 until k_start, 0 from k_end, half-cosine between."""
    if k < 0:
        raise ContractError(f"gate_value: negative step {k}")
    if k <= sched.k_start:
        return 1.0
    if k >= sched.k_end:
        return 0.0
    frac = (k - sched.k_start) / (sched.k_end - sched.k_start)
    return 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class GateSchedule:
    """Global gate program shared by every tapered layer."""

    k_start: int
    k_end: int

    def __post_init__(self):
        if not 0 <= self.k_start < self.k_end:
            raise ContractError(f"need 0 <= k_start < k_end, got ({self.k_start}, {self.k_end})")

    def value(self, k: int) -> float:
        return gate_value(self, k)


# -- plain layers -------------------------------------------------------------


@dataclass
class NormParams:
    """Learnable per-feature scale (and bias for the layernorm family)."""

    gamma: Tensor
    beta: Tensor | None
    eps: float


class RMSNorm:
    kind = "rms"

    def __init__(self, d: int, eps: float = DEFAULT_EPS, name: str = "rmsnorm"):
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.eps = float(eps)
        self.name = name

    @property
    def d(self) -> int:
        return self.gamma.size

    def __call__(self, h: Tensor, g: float | None = None) -> Tensor:
        _tick(self.name, 1)
        return rmsnorm(h, self.gamma, self.eps)

    def named_params(self):
        return [(f"{self.name}.gamma", self.gamma)]


class LayerNorm:
    kind = "ln"

    def __init__(self, d: int, eps: float = DEFAULT_EPS, name: str = "layernorm"):
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        self.eps = float(eps)
        self.name = name

    @property
    def d(self) -> int:
        return self.gamma.size

    def __call__(self, h: Tensor, g: float | None = None) -> Tensor:
        _tick(self.name, 2)
        return layernorm(h, self.gamma, self.beta, self.eps)

    def named_params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]


# -- taper layers -------------------------------------------------------------


class TaperNorm:
    """Gated interpolation between a norm branch and a fixed scaling branch.

    Carries the full taper state: trainable gains gamma / gamma_tilde, the
    frozen scalar c, the calibration EMA accumulators, and the phase flag.
    ``variant`` selects the rms or ln flavor; the ln flavor also owns a bias
    applied outside the interpolation.
    """

    kind = "taper"

    def __init__(
        self,
        d: int,
        variant: str = "rms",
        eps: float = DEFAULT_EPS,
        mu: float = 0.01,
        name: str = "tapernorm",
    ):
        if variant not in ("rms", "ln"):
            raise ContractError(f"unknown taper variant {variant!r}")
        self.variant = variant
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.gamma_tilde: Tensor | None = None
        self.beta = (
            Tensor(np.zeros(d, dtype=np.float32), requires_grad=True) if variant == "ln" else None
        )
        self.c: float | None = None
        self.ema_num = 0.0
        self.ema_den = 0.0
        self.ema_count = 0
        self.mu = float(mu)
        self.eps = float(eps)
        self.phase = WARMUP
        self.name = name

    @property
    def d(self) -> int:
        return self.gamma.size

    def __call__(self, h: Tensor, g: float) -> Tensor:
        if self.variant == "rms":
            return tapernorm(h, self, g)
        return taperln(h, self, g)

    def named_params(self):
        out = [(f"{self.name}.gamma", self.gamma)]
        if self.beta is not None:
            out.append((f"{self.name}.beta", self.beta))
        if self.gamma_tilde is not None:
            out.append((f"{self.name}.gamma_tilde", self.gamma_tilde))
        return out


def _check_gate(layer: TaperNorm, g: float) -> None:
    if not 0.0 <= g <= 1.0:
        raise ContractError(f"gate must be in [0, 1], got {g}")
    if g < 1.0 and layer.phase != CALIBRATED:
        raise ContractError(
            f"{layer.name}: gate {g} < 1 before calibration; calibrate() must precede decay"
        )


def tapernorm(h: Tensor, s: TaperNorm, g: float) -> Tensor:
    """g * (h / r(h)) * gamma + (1 - g) * c * h * gamma_tilde.

    At g == 1 only the norm branch exists (c is not defined until
    calibration). Below 1 the layer evaluates the written interpolation,
    per-token statistics included; removing them is the exporter's job.
    """
    _check_gate(s, g)
    if _EMA_COLLECT[0] and s.phase == WARMUP:
        ema_update(s, h, _EMA_COLLECT[1])
    if g == 1.0:
        _tick(s.name, 1)
        return rmsnorm(h, s.gamma, s.eps)
    _tick(s.name, 1)
    normed = rmsnorm(h, s.gamma, s.eps) * np.float32(g)
    # gain combined with the scalar first: one full-width multiply, and at
    # g == 0 the result is bit-identical to the exported fixed scaling
    scaled = h * (s.gamma_tilde * np.float32((1.0 - g) * s.c))
    return normed + scaled


def taperln(h: Tensor, s: TaperNorm, g: float) -> Tensor:
    """beta + g * (h - mu)/sigma * gamma + (1 - g) * c * (h - mu) * gamma_tilde."""
    _check_gate(s, g)
    if _EMA_COLLECT[0] and s.phase == WARMUP:
        ema_update(s, h, _EMA_COLLECT[1])
    centered = h - reduce_mean(h, axis=-1, keepdims=True)
    _tick(s.name, 2)
    sigma = sqrt(reduce_mean(centered * centered, axis=-1, keepdims=True) + np.float32(s.eps))
    if g == 1.0:
        return (centered / sigma) * s.gamma + s.beta
    normed = (centered / sigma) * s.gamma * np.float32(g)
    scaled = centered * (s.gamma_tilde * np.float32((1.0 - g) * s.c))
    return normed + scaled + s.beta


def _branch_stats(
    layer: TaperNorm, tokens: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (||w||^2 / scale, ||w||^2) with w the gamma-weighted input."""
    gamma = layer.gamma.data
    if layer.variant == "ln":
        tokens = tokens - tokens.mean(axis=-1, keepdims=True)
    w = tokens * gamma
    energy = (w * w).sum(axis=-1)
    scale = np.sqrt((tokens * tokens).mean(axis=-1) + layer.eps)
    return energy / scale, energy


def ema_update(layer: TaperNorm, h: Tensor | np.ndarray, mask: np.ndarray | None = None) -> None:
    """Fold one batch of inputs into the calibration EMAs (warmup only).

    Statistics are batch means over non-padding tokens; the update rate mu
    is the new-sample weight, s <- (1 - mu) * s + mu * x.
    """
    if layer.phase != WARMUP:
        raise ContractError(f"{layer.name}: ema_update after calibration")
    data = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float32)
    tokens = data.reshape(-1, data.shape[-1])
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape[0] != tokens.shape[0]:
            raise DimensionError("mask length must match token count")
        tokens = tokens[keep]
    if tokens.shape[0] == 0:
        raise ContractError("ema_update with no unmasked tokens")
    num, den = _branch_stats(layer, tokens)
    mu = layer.mu
    layer.ema_num = (1.0 - mu) * layer.ema_num + mu * float(num.mean())
    layer.ema_den = (1.0 - mu) * layer.ema_den + mu * float(den.mean())
    layer.ema_count += 1


def ema_bias_correction(mu: float, n: int) -> float:
    return 1.0 - (1.0 - mu) ** n


def calibrate(layer: TaperNorm) -> None:
    """Freeze c from bias-corrected EMAs and copy gamma into gamma_tilde."""
    if layer.phase != WARMUP:
        raise ContractError(f"{layer.name}: already calibrated")
    if layer.ema_count < 1:
        raise CalibrationError(f"{layer.name}: calibrate() before any ema_update")
    corr = ema_bias_correction(layer.mu, layer.ema_count)
    num = layer.ema_num / corr
    den = layer.ema_den / corr
    layer.c = num / (den + CSTAR_DELTA)
    layer.gamma_tilde = Tensor(layer.gamma.data.copy(), requires_grad=True)
    layer.phase = CALIBRATED


def alignment_objective(layer: TaperNorm, tokens: np.ndarray, c: float) -> float:
    """Mean squared gap between the two taper branches at scalar c.

    Brute-force evaluation of the least-squares objective the calibration
    minimizes; used as an independent oracle for c*.
    """
    tokens = np.asarray(tokens, dtype=np.float64).reshape(-1, layer.d)
    gamma = layer.gamma.data.astype(np.float64)
    if layer.variant == "ln":
        tokens = tokens - tokens.mean(axis=-1, keepdims=True)
    scale = np.sqrt((tokens * tokens).mean(axis=-1, keepdims=True) + layer.eps)
    normed = tokens / scale * gamma
    scaled = c * tokens * gamma
    return float(((normed - scaled) ** 2).sum(axis=-1).mean())


# -- exported (post-taper) layers ---------------------------------------------


class FixedScale:
    """Explicit sample-independent scaling h * vec (rms taper at gate 0)."""

    kind = "fixed_scale"

    def __init__(self, vec: np.ndarray, name: str = "fixed_scale"):
        self.vec = np.asarray(vec, dtype=np.float32)
        self.name = name

    @property
    def d(self) -> int:
        return self.vec.size

    def __call__(self, h: Tensor, g: float | None = None) -> Tensor:
        return h * constant(self.vec)

    def named_params(self):
        return []


class FixedAffine:
    """Explicit fixed affine map (h - mean(h)) * vec + beta (ln taper at gate 0)."""

    kind = "fixed_affine"

    def __init__(self, vec: np.ndarray, beta: np.ndarray, name: str = "fixed_affine"):
        self.vec = np.asarray(vec, dtype=np.float32)
        self.beta = np.asarray(beta, dtype=np.float32)
        self.name = name

    @property
    def d(self) -> int:
        return self.vec.size

    def __call__(self, h: Tensor, g: float | None = None) -> Tensor:
        _tick(self.name, 1)
        centered = h - reduce_mean(h, axis=-1, keepdims=True)
        return centered * constant(self.vec) + constant(self.beta)

    def named_params(self):
        return []


class IdentityNorm:
    """Placeholder left behind once a taper layer is folded away."""

    kind = "identity"

    def __init__(self, d: int, name: str = "identity"):
        self._d = d
        self.name = name

    @property
    def d(self) -> int:
        return self._d

    def __call__(self, h: Tensor, g: float | None = None) -> Tensor:
        return h

    def named_params(self):
        return []
