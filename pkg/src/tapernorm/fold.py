"""Weight folding: turn a gate-0 tapered model into a norm-free one.

At gate 0 an rms taper layer is the linear map h -> c * h * diag(gt) and
an ln taper layer is the affine map h -> c * (h - mean(h)) * diag(gt) + b.
Both can be absorbed into whatever linear projection consumes the layer's
output: the attention QKV input, the MLP input, and (for a tapered final
map) the output head. The unfused export instead leaves each taper layer
as an explicit fixed op.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .model import Model
from .norms import CALIBRATED, FixedAffine, FixedScale, IdentityNorm, TaperNorm
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class FoldEntry:
    layer: str
    variant: str  # rms | ln
    kind: str  # scale | affine
    targets: tuple[str, ...]


def fold_rms(c: float, gamma_tilde: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Absorb h -> c * h * diag(gt) into the following projection: diag(c*gt) @ W."""
    gamma_tilde = np.asarray(gamma_tilde, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if gamma_tilde.shape[0] != w.shape[0]:
        raise DimensionError(
            f"fold_rms: gain length {gamma_tilde.shape[0]} != input dim {w.shape[0]}"
        )
    return (np.float32(c) * gamma_tilde)[:, None] * w


def fold_ln(
    c: float,
    gamma_tilde: np.ndarray,
    beta: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Absorb the affine map h -> h A + beta, A = c (I - 11^T/d) diag(gt).

    Returns (A @ W, beta @ W + b). The centering term is applied as a
    column-mean subtraction of the gain-scaled weight, avoiding the d x d
    intermediate.
    """
    gamma_tilde = np.asarray(gamma_tilde, dtype=np.float32)
    beta = np.asarray(beta, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if gamma_tilde.shape[0] != w.shape[0] or beta.shape[0] != w.shape[0]:
        raise DimensionError("fold_ln: gain/bias length must match the projection input dim")
    dw = gamma_tilde[:, None] * w
    w_folded = np.float32(c) * (dw - dw.mean(axis=0, keepdims=True))
    b_folded = beta @ w
    if b is not None:
        b_folded = b_folded + np.asarray(b, dtype=np.float32)
    return w_folded.astype(np.float32), b_folded.astype(np.float32)


def fold_plan(model: Model) -> list[FoldEntry]:
    """One entry per tapered layer, naming the projections it folds into."""
    entries = []
    for i, block in enumerate(model.blocks):
        if isinstance(block.norm_attn, TaperNorm):
            v = block.norm_attn.variant
            entries.append(FoldEntry(
                f"block{i}.norm_attn", v, "affine" if v == "ln" else "scale",
                (f"block{i}.qkv",),
            ))
        if isinstance(block.norm_mlp, TaperNorm):
            v = block.norm_mlp.variant
            entries.append(FoldEntry(
                f"block{i}.norm_mlp", v, "affine" if v == "ln" else "scale",
                (f"block{i}.mlp_in",),
            ))
    if isinstance(model.final_norm, TaperNorm):
        v = model.final_norm.variant
        entries.append(FoldEntry(
            "final_norm", v, "affine" if v == "ln" else "scale", ("head",),
        ))
    return entries


def _require_exportable(model: Model, gate: float) -> list[TaperNorm]:
    if model.fused != "none":
        raise ContractError(f"checkpoint already fused ({model.fused}); refusing to fold twice")
    tapers = model.taper_layers()
    if not tapers:
        raise ContractError("no taper layers to export (plain-norm or already exported model)")
    if gate != 0.0:
        raise ContractError(f"export requires gate 0, checkpoint stores g={gate}")
    for layer in tapers:
        if layer.phase != CALIBRATED:
            raise ContractError(f"{layer.name} is uncalibrated; cannot export")
    return tapers


def _clone(model: Model) -> Model:
    return copy.deepcopy(model)


def _fixed_from(layer: TaperNorm):
    vec = (np.float32(layer.c) * layer.gamma_tilde.data).astype(np.float32)
    if layer.variant == "rms":
        return FixedScale(vec, name=layer.name)
    return FixedAffine(vec, layer.beta.data.copy(), name=layer.name)


def export_unfused(model: Model, gate: float = 0.0) -> Model:
    """Replace each taper layer with an explicit fixed scaling/affine op."""
    _require_exportable(model, gate)
    out = _clone(model)
    for block in out.blocks:
        if isinstance(block.norm_attn, TaperNorm):
            block.norm_attn = _fixed_from(block.norm_attn)
        if isinstance(block.norm_mlp, TaperNorm):
            block.norm_mlp = _fixed_from(block.norm_mlp)
    if isinstance(out.final_norm, TaperNorm):
        out.final_norm = _fixed_from(out.final_norm)
    return out


def export_fused(model: Model, gate: float = 0.0) -> Model:
    """Fold every taper layer into its downstream projection.

    Internal layers fold into the QKV and MLP input projections; a tapered
    final map folds into the output head, untying it from the embedding
    (and adding a head bias in the ln case).
    """
    _require_exportable(model, gate)
    out = _clone(model)

    def fold_into(layer: TaperNorm, w: Tensor, b: Tensor | None):
        if layer.variant == "rms":
            return Tensor(fold_rms(layer.c, layer.gamma_tilde.data, w.data)), b
        b_arr = None if b is None else b.data
        w_new, b_new = fold_ln(layer.c, layer.gamma_tilde.data, layer.beta.data, w.data, b_arr)
        return Tensor(w_new), Tensor(b_new)

    for block in out.blocks:
        if isinstance(block.norm_attn, TaperNorm):
            block.w_qkv, block.b_qkv = fold_into(block.norm_attn, block.w_qkv, block.b_qkv)
            block.w_qkv.requires_grad = True
            block.norm_attn = IdentityNorm(out.cfg.d, name=block.norm_attn.name)
        if isinstance(block.norm_mlp, TaperNorm):
            block.w_mlp_in, block.b_mlp_in = fold_into(block.norm_mlp, block.w_mlp_in, block.b_mlp_in)
            block.w_mlp_in.requires_grad = True
            block.norm_mlp = IdentityNorm(out.cfg.d, name=block.norm_mlp.name)

    scope = "internal"
    if isinstance(out.final_norm, TaperNorm):
        w_out = out.head if out.head is not None else Tensor(out.embed.data.T.copy())
        out.head, out.head_bias = fold_into(out.final_norm, w_out, out.head_bias)
        out.head.requires_grad = True
        out.final_norm = IdentityNorm(out.cfg.d, name=out.final_norm.name)
        scope = "all"
    out.fused = scope
    return out


def max_logit_gap(
    a: Model,
    b: Model,
    inputs: np.ndarray,
    g_a: float = 0.0,
    g_b: float = 0.0,
    mode: str = "full",
) -> float:
    """Max absolute logit difference between two models on one batch."""
    with no_grad():
        za = a.forward(inputs, g=g_a, mode=mode).data
        zb = b.forward(inputs, g=g_b, mode=mode).data
    return float(np.abs(za - zb).max())
