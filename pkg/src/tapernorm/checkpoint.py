"""Binary checkpoint format.

Layout: magic ``TPNC``, u32 version, u32 header length, canonical JSON
header, named float32 blobs (little-endian, row-major, in header manifest
order), then a little-endian u64 FNV-1a checksum of everything prior.

The header carries the model/train configuration, taper lifecycle state
(phase, per-layer c, EMA accumulators), the frozen aux target, the fold
status, the character vocabulary, and the run manifest hash, so a loaded
model reproduces the saved model's logits bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig
from .norms import CALIBRATED, FixedAffine, FixedScale, IdentityNorm, LayerNorm, RMSNorm, TaperNorm
from .tensor import Tensor

MAGIC = b"TPNC"
VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in memoryview(data):
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _norm_layer_state(layer) -> dict:
    state: dict = {"name": layer.name, "kind": layer.kind}
    if isinstance(layer, TaperNorm):
        state.update(
            variant=layer.variant,
            phase=layer.phase,
            c=layer.c,
            ema_num=layer.ema_num,
            ema_den=layer.ema_den,
            ema_count=layer.ema_count,
            mu=layer.mu,
            eps=layer.eps,
        )
    elif isinstance(layer, (RMSNorm, LayerNorm)):
        state["eps"] = layer.eps
    return state


def collect_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    """All arrays a checkpoint must persist: trainables plus fixed buffers."""
    out = [(name, p.data) for name, p in model.named_params()]
    for layer in model.norm_layers():
        if isinstance(layer, FixedScale):
            out.append((f"{layer.name}.vec", layer.vec))
        elif isinstance(layer, FixedAffine):
            out.append((f"{layer.name}.vec", layer.vec))
            out.append((f"{layer.name}.beta_fixed", layer.beta))
    return out


def save_checkpoint(
    model: Model,
    path: str,
    step: int = 0,
    gate: float = 1.0,
    train_config: dict | None = None,
    s_tgt: float | None = None,
    manifest_hash: str | None = None,
    vocab_chars: str | None = None,
) -> str:
    tensors = collect_tensors(model)
    header = {
        "version": VERSION,
        "model": dataclasses.asdict(model.cfg),
        "train": train_config,
        "step": int(step),
        "gate": float(gate),
        "s_tgt": s_tgt,
        "fused": model.fused,
        "vocab_chars": vocab_chars,
        "manifest_hash": manifest_hash,
        "norm_layers": [_norm_layer_state(n) for n in model.norm_layers()],
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    header_bytes = _canonical_json(header)
    parts = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes]
    for _, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    blob = body + struct.pack("<Q", fnv1a64(body))
    with open(path, "wb") as f:
        f.write(blob)
    return path


def read_header(path: str) -> dict:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != MAGIC:
            raise FormatError(f"{path}: not a TPNC checkpoint")
        version, header_len = struct.unpack("<II", head[4:12])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise FormatError(f"{path}: truncated header")
    return json.loads(header_bytes.decode("utf-8"))


def _rebuild_norm(state: dict, d: int, eps: float, arrays: dict[str, np.ndarray]):
    kind, name = state["kind"], state["name"]
    if kind == "rms":
        layer = RMSNorm(d, eps=state.get("eps", eps), name=name)
        layer.gamma.data[:] = arrays[f"{name}.gamma"]
        return layer
    if kind == "ln":
        layer = LayerNorm(d, eps=state.get("eps", eps), name=name)
        layer.gamma.data[:] = arrays[f"{name}.gamma"]
        layer.beta.data[:] = arrays[f"{name}.beta"]
        return layer
    if kind == "taper":
        layer = TaperNorm(d, variant=state["variant"], eps=state["eps"], mu=state["mu"], name=name)
        layer.gamma.data[:] = arrays[f"{name}.gamma"]
        if layer.beta is not None:
            layer.beta.data[:] = arrays[f"{name}.beta"]
        layer.c = state["c"]
        layer.ema_num = state["ema_num"]
        layer.ema_den = state["ema_den"]
        layer.ema_count = state["ema_count"]
        layer.phase = state["phase"]
        if state["phase"] == CALIBRATED:
            layer.gamma_tilde = Tensor(arrays[f"{name}.gamma_tilde"].copy(), requires_grad=True)
        return layer
    if kind == "fixed_scale":
        return FixedScale(arrays[f"{name}.vec"], name=name)
    if kind == "fixed_affine":
        return FixedAffine(arrays[f"{name}.vec"], arrays[f"{name}.beta_fixed"], name=name)
    if kind == "identity":
        return IdentityNorm(d, name=name)
    raise FormatError(f"unknown norm layer kind {kind!r}")


def load_checkpoint(path: str) -> tuple[Model, dict]:
    """Rebuild the model and return it with the parsed header."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a TPNC checkpoint")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != stored:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))

    arrays: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(body):
            raise FormatError(f"{path}: tensor data truncated")
        arrays[spec["name"]] = (
            np.frombuffer(body[offset:end], dtype="<f4").reshape(shape).copy()
        )
        offset = end
    if offset != len(body):
        raise FormatError(f"{path}: trailing bytes after tensor data")

    cfg = ModelConfig(**header["model"])
    model = Model.init(cfg, seed=0)
    model.fused = header.get("fused", "none")
    model.embed.data[:] = arrays["embed"]
    for i, block in enumerate(model.blocks):
        prefix = f"block{i}"
        block.w_qkv.data[:] = arrays[f"{prefix}.qkv"]
        block.w_attn_out.data[:] = arrays[f"{prefix}.attn_out"]
        block.w_mlp_in.data[:] = arrays[f"{prefix}.mlp_in"]
        block.w_mlp_out.data[:] = arrays[f"{prefix}.mlp_out"]
        if f"{prefix}.qkv_bias" in arrays:
            block.b_qkv = Tensor(arrays[f"{prefix}.qkv_bias"], requires_grad=True)
        if f"{prefix}.mlp_in_bias" in arrays:
            block.b_mlp_in = Tensor(arrays[f"{prefix}.mlp_in_bias"], requires_grad=True)
    if "head" in arrays:
        model.head = Tensor(arrays["head"], requires_grad=True)
    if "head_bias" in arrays:
        model.head_bias = Tensor(arrays["head_bias"], requires_grad=True)

    states = {s["name"]: s for s in header["norm_layers"]}
    for i, block in enumerate(model.blocks):
        block.norm_attn = _rebuild_norm(states[f"block{i}.norm_attn"], cfg.d, cfg.eps, arrays)
        block.norm_mlp = _rebuild_norm(states[f"block{i}.norm_mlp"], cfg.d, cfg.eps, arrays)
    model.final_norm = _rebuild_norm(states["final_norm"], cfg.d, cfg.eps, arrays)

    expected = {name for name, _ in collect_tensors(model)}
    actual = set(arrays)
    if expected != actual:
        missing = expected - actual
        extra = actual - expected
        raise FormatError(f"{path}: tensor set mismatch (missing={missing}, extra={extra})")
    return model, header
