"""Causal pre-norm transformer: rotary attention, gated MLP, tied embeddings.

The residual stream is normalized before each sublayer; residual adds stay
un-normalized. Norm slots hold either plain norms, taper layers driven by a
shared gate value, or the fixed/identity layers produced by export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, InputError
from .norms import (
    DEFAULT_EPS,
    FixedAffine,
    FixedScale,
    IdentityNorm,
    LayerNorm,
    RMSNorm,
    TaperNorm,
)
from .tensor import (
    Tensor,
    attention_core,
    embedding,
    matmul,
    reshape,
    rope_rotate,
    silu,
    slice_axis,
    transpose,
)

NORM_VARIANTS = ("rms", "ln")
TAPER_SCOPES = ("none", "internal", "all")

INIT_STD = 0.02
MASK_FILL = -1e9  # additive causal mask; large negative, float32 safe


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n_layers: int
    n_heads: int
    t_max: int
    vocab: int
    mlp_expansion: int = 4
    norm_variant: str = "rms"
    taper_scope: str = "none"
    eps: float = DEFAULT_EPS
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.d, self.n_layers, self.n_heads, self.t_max, self.vocab) <= 0:
            raise ContractError("all model dimensions must be positive")
        if self.d % self.n_heads:
            raise ContractError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.norm_variant not in NORM_VARIANTS:
            raise ContractError(f"norm_variant must be one of {NORM_VARIANTS}")
        if self.taper_scope not in TAPER_SCOPES:
            raise ContractError(f"taper_scope must be one of {TAPER_SCOPES}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_expansion * self.d


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until all values lie within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def _make_norm(cfg: ModelConfig, tapered: bool, mu: float, name: str):
    if tapered:
        return TaperNorm(cfg.d, variant=cfg.norm_variant, eps=cfg.eps, mu=mu, name=name)
    if cfg.norm_variant == "rms":
        return RMSNorm(cfg.d, eps=cfg.eps, name=name)
    return LayerNorm(cfg.d, eps=cfg.eps, name=name)


class Block:
    """One pre-norm residual block: attention then gated MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, index: int, mu: float):
        d, f = cfg.d, cfg.mlp_hidden
        tapered = cfg.taper_scope in ("internal", "all")
        prefix = f"block{index}"
        self.w_qkv = Tensor(trunc_normal(rng, (d, 3 * d), INIT_STD), requires_grad=True)
        self.w_attn_out = Tensor(trunc_normal(rng, (d, d), INIT_STD), requires_grad=True)
        self.w_mlp_in = Tensor(trunc_normal(rng, (d, 2 * f), INIT_STD), requires_grad=True)
        self.w_mlp_out = Tensor(trunc_normal(rng, (f, d), INIT_STD), requires_grad=True)
        # optional biases, populated only by affine weight folding
        self.b_qkv: Tensor | None = None
        self.b_mlp_in: Tensor | None = None
        self.norm_attn = _make_norm(cfg, tapered, mu, f"{prefix}.norm_attn")
        self.norm_mlp = _make_norm(cfg, tapered, mu, f"{prefix}.norm_mlp")
        self.index = index

    def named_weights(self):
        prefix = f"block{self.index}"
        out = [
            (f"{prefix}.qkv", self.w_qkv),
            (f"{prefix}.attn_out", self.w_attn_out),
            (f"{prefix}.mlp_in", self.w_mlp_in),
            (f"{prefix}.mlp_out", self.w_mlp_out),
        ]
        if self.b_qkv is not None:
            out.append((f"{prefix}.qkv_bias", self.b_qkv))
        if self.b_mlp_in is not None:
            out.append((f"{prefix}.mlp_in_bias", self.b_mlp_in))
        return out


class Model:
    """Transformer with a configurable final map and tied output weights.

    ``head`` stays None while the output projection is tied to the
    embedding transpose; export may untie it (and add ``head_bias``) when
    folding an affine final map.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, ema_mu: float = 0.01):
        self.cfg = cfg
        self.embed = Tensor(trunc_normal(rng, (cfg.vocab, cfg.d), INIT_STD), requires_grad=True)
        self.blocks = [Block(cfg, rng, i, ema_mu) for i in range(cfg.n_layers)]
        self.final_norm = _make_norm(cfg, cfg.taper_scope == "all", ema_mu, "final_norm")
        self.head: Tensor | None = None
        self.head_bias: Tensor | None = None
        self.fused = "none"
        half = cfg.head_dim // 2
        inv_freq = cfg.rope_base ** (-np.arange(half, dtype=np.float64) / half)
        angles = np.arange(cfg.t_max, dtype=np.float64)[:, None] * inv_freq[None, :]
        self._rope_cos = np.cos(angles).astype(np.float32)
        self._rope_sin = np.sin(angles).astype(np.float32)
        self._masks: dict[int, np.ndarray] = {}

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, ema_mu: float = 0.01) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return cls(cfg, rng, ema_mu)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = [("embed", self.embed)]
        for block in self.blocks:
            out.extend(block.named_weights())
            out.extend(block.norm_attn.named_params())
            out.extend(block.norm_mlp.named_params())
        out.extend(self.final_norm.named_params())
        if self.head is not None:
            out.append(("head", self.head))
        if self.head_bias is not None:
            out.append(("head_bias", self.head_bias))
        return out

    def norm_layers(self) -> list:
        out = []
        for block in self.blocks:
            out.extend([block.norm_attn, block.norm_mlp])
        out.append(self.final_norm)
        return out

    def taper_layers(self) -> list[TaperNorm]:
        return [n for n in self.norm_layers() if isinstance(n, TaperNorm)]

    # -- forward ---------------------------------------------------------------

    def _mask(self, t: int) -> np.ndarray:
        m = self._masks.get(t)
        if m is None:
            m = np.triu(np.full((t, t), MASK_FILL, dtype=np.float32), k=1)
            self._masks[t] = m
        return m

    def _rope(self, x: Tensor, t: int) -> Tensor:
        # x: [B, heads, T, head_dim]; rotate feature pairs (i, i + half)
        half = self.cfg.head_dim // 2
        cos = self._rope_cos[:t].reshape(1, 1, t, half)
        sin = self._rope_sin[:t].reshape(1, 1, t, half)
        return rope_rotate(x, cos, sin)

    def attention(self, x: Tensor, block: Block) -> Tensor:
        """Causal multi-head attention with rotary positions on q and k."""
        b, t, d = x.shape
        nh, hd = self.cfg.n_heads, self.cfg.head_dim
        qkv = matmul(reshape(x, (b * t, d)), block.w_qkv)
        if block.b_qkv is not None:
            qkv = qkv + block.b_qkv
        q, k, v = (slice_axis(qkv, 1, i * d, (i + 1) * d) for i in range(3))
        q = transpose(reshape(q, (b, t, nh, hd)), (0, 2, 1, 3))
        k = transpose(reshape(k, (b, t, nh, hd)), (0, 2, 1, 3))
        v = transpose(reshape(v, (b, t, nh, hd)), (0, 2, 1, 3))
        # head scale folded into q ahead of the score matmul: cheaper than
        # rescaling the [.., T, T] score tensor
        q = self._rope(q, t) * np.float32(1.0 / math.sqrt(hd))
        k = self._rope(k, t)
        ctx = attention_core(q, k, v, self._mask(t))
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b * t, d))
        out = matmul(ctx, block.w_attn_out)
        return reshape(out, (b, t, d))

    def mlp(self, x: Tensor, block: Block) -> Tensor:
        b, t, d = x.shape
        f = self.cfg.mlp_hidden
        h = matmul(reshape(x, (b * t, d)), block.w_mlp_in)
        if block.b_mlp_in is not None:
            h = h + block.b_mlp_in
        gate = slice_axis(h, 1, 0, f)
        up = slice_axis(h, 1, f, 2 * f)
        out = matmul(silu(gate) * up, block.w_mlp_out)
        return reshape(out, (b, t, d))

    def _validate_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be [batch, time], got shape {tokens.shape}")
        if tokens.shape[1] > self.cfg.t_max:
            raise InputError(f"sequence length {tokens.shape[1]} exceeds t_max {self.cfg.t_max}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise InputError("token id out of range")
        return tokens.astype(np.int64, copy=False)

    def pre_logit_states(self, tokens: np.ndarray, g: float = 1.0) -> Tensor:
        """Residual-stream states feeding the final map, shape [B, T, d]."""
        tokens = self._validate_tokens(tokens)
        h = embedding(self.embed, tokens)
        for block in self.blocks:
            h = h + self.attention(block.norm_attn(h, g), block)
            h = h + self.mlp(block.norm_mlp(h, g), block)
        return h

    def _project(self, h: Tensor, g: float) -> Tensor:
        b, t, d = h.shape
        hn = reshape(self.final_norm(h, g), (b * t, d))
        w_out = self.head if self.head is not None else transpose(self.embed)
        logits = matmul(hn, w_out)
        if self.head_bias is not None:
            logits = logits + self.head_bias
        return reshape(logits, (b, t, self.cfg.vocab))

    def forward(self, tokens: np.ndarray, g: float = 1.0, mode: str = "full"):
        """Logits for a token batch.

        mode "full" returns [B, T, V]; mode "last" returns [B, V] and only
        ever projects the final position.
        """
        h = self.pre_logit_states(tokens, g)
        if mode == "full":
            return self._project(h, g)
        if mode == "last":
            t = h.shape[1]
            last = slice_axis(h, 1, t - 1, t)
            return reshape(self._project(last, g), (h.shape[0], self.cfg.vocab))
        raise ContractError(f"unknown forward mode {mode!r}")

    def forward_with_states(self, tokens: np.ndarray, g: float = 1.0):
        """(full logits, pre-logit states) sharing one graph; used in training."""
        h = self.pre_logit_states(tokens, g)
        return self._project(h, g), h
