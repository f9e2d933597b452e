"""Numeric verification of the scale-anchoring theory.

Three proposition checks probe single token vectors against closed forms:

1. a 0-homogeneous final map leaves no radial gradient at its input;
2. without a final norm, cross-entropy's radial component is negative
   whenever the target has positive margin (logit chasing);
3. the fixed-target scale loss exerts a radial restoring force with a
   known closed-form gradient.

Two experiment drivers reproduce the training-dynamics figures
directionally: logit-norm growth with and without anchoring, and
per-weight-type gradient-norm alignment.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, TrainingError
from .norms import layernorm, rmsnorm
from .objective import AuxAnchor, cross_entropy
from .tensor import Tape, Tensor, matmul
from .trainer import (
    METRIC_COLUMNS,
    RunMetrics,
    TrainConfig,
    TrainResult,
    build_model,
    desk_model_config,
    train,
)

PROBE_RADII = (0.5, 1.0, 2.0, 8.0)
REPORT_COLUMNS = METRIC_COLUMNS + ["radial_ratio", "margin", "bound"]


@dataclass
class RadialProbe:
    """One token-level probe: input, loss kind, gradient, radial stats."""

    h: np.ndarray
    loss_kind: str
    grad: np.ndarray
    radial: float  # <grad, h>
    ratio: float  # <grad, h> / (|grad| |h|)
    margin: float = float("nan")
    bound: float = float("nan")


def _probe_h(rng: np.random.Generator, d: int) -> np.ndarray:
    radius = rng.choice(PROBE_RADII)
    return (radius * rng.standard_normal(d)).astype(np.float32)


def _ce_grad_through(
    h_np: np.ndarray,
    w_np: np.ndarray,
    y: int,
    norm: str | None,
    gamma: np.ndarray | None = None,
    beta: np.ndarray | None = None,
    eps: float = 1e-12,
) -> np.ndarray:
    """Autodiff gradient of CE(h -> norm(h) W, y) at a single token."""
    h = Tensor(h_np.reshape(1, -1), requires_grad=True)
    w = Tensor(w_np)
    with Tape() as tape:
        if norm == "rms":
            x = rmsnorm(h, Tensor(gamma), eps)
        elif norm == "ln":
            x = layernorm(h, Tensor(gamma), Tensor(beta), eps)
        else:
            x = h
        z = matmul(x, w)
        loss = cross_entropy(z, np.array([y]))
        tape.backward(loss)
    return h.grad.reshape(-1)


def _norm_jacobian(h: np.ndarray, gamma: np.ndarray, variant: str, eps: float) -> np.ndarray:
    """Explicit J[i, j] = d out_j / d h_i in float64 (oracle path)."""
    h = h.astype(np.float64)
    gamma = gamma.astype(np.float64)
    d = h.size
    if variant == "rms":
        r = np.sqrt((h * h).mean() + eps)
        jac = np.eye(d) / r - np.outer(h, h) / (d * r**3)
        return jac * gamma[None, :]
    mu = h.mean()
    c = h - mu
    sigma = np.sqrt((c * c).mean() + eps)
    jac = (np.eye(d) - 1.0 / d) / sigma - np.outer(c, c) / (d * sigma**3)
    return jac * gamma[None, :]


def _softmax64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class Prop1Report:
    max_ratio: float
    probes: list[RadialProbe]
    jacobian_gap: float  # autograd vs explicit-Jacobian radial terms, d=4


def check_prop1(
    n_probes: int = 200,
    d: int = 16,
    v: int = 24,
    eps: float = 1e-12,
    variant: str = "rms",
    seed: int = 0,
) -> Prop1Report:
    """Worst normalized radial ratio under a (near) 0-homogeneous final map."""
    rng = np.random.default_rng(seed)
    probes = []
    worst = 0.0
    for _ in range(n_probes):
        h = _probe_h(rng, d)
        w = (rng.standard_normal((d, v)) / np.sqrt(d)).astype(np.float32)
        gamma = rng.uniform(0.5, 1.5, size=d).astype(np.float32)
        beta = rng.uniform(-0.2, 0.2, size=d).astype(np.float32)
        y = int(rng.integers(v))
        grad = _ce_grad_through(h, w, y, variant, gamma, beta, eps)
        g64, h64 = grad.astype(np.float64), h.astype(np.float64)
        radial = float(g64 @ h64)
        denom = float(np.linalg.norm(g64) * np.linalg.norm(h64)) + 1e-30
        ratio = radial / denom
        probes.append(RadialProbe(h, "cross_entropy", grad, radial, ratio))
        worst = max(worst, abs(ratio))

    # explicit-Jacobian cross-check at d=4
    gap = 0.0
    for _ in range(20):
        h = _probe_h(rng, 4)
        w = (rng.standard_normal((4, 6)) / 2.0).astype(np.float32)
        gamma = rng.uniform(0.5, 1.5, size=4).astype(np.float32)
        beta = rng.uniform(-0.2, 0.2, size=4).astype(np.float32)
        y = int(rng.integers(6))
        grad = _ce_grad_through(h, w, y, variant, gamma, beta, eps)
        auto_radial = float(grad.astype(np.float64) @ h.astype(np.float64))

        jac = _norm_jacobian(h, gamma, variant, eps)
        if variant == "rms":
            x = h.astype(np.float64) / np.sqrt((h.astype(np.float64) ** 2).mean() + eps) * gamma
        else:
            c = h.astype(np.float64) - h.astype(np.float64).mean()
            x = c / np.sqrt((c * c).mean() + eps) * gamma + beta
        z = x @ w.astype(np.float64)
        dz = _softmax64(z)
        dz[y] -= 1.0
        oracle_grad = dz @ w.astype(np.float64).T @ jac.T
        oracle_radial = float(oracle_grad @ h.astype(np.float64))
        gap = max(gap, abs(auto_radial - oracle_radial))
    return Prop1Report(max_ratio=worst, probes=probes, jacobian_gap=gap)


def prop1_eps_sweep(eps_values=(1e-12, 1e-8, 1e-4, 1e-2), **kwargs) -> dict[float, float]:
    """Max radial ratio as the norm epsilon grows (reported, not asserted)."""
    return {e: check_prop1(eps=e, **kwargs).max_ratio for e in eps_values}


@dataclass
class Prop2Report:
    identity_violations: int
    bound_violations: int
    probes: list[RadialProbe]
    norm_growth_failures: int  # descent steps that failed to grow |h|


def check_prop2(
    n_probes: int = 100,
    d: int = 16,
    v: int = 16,
    seed: int = 0,
    identity_tol: float = 1e-5,
    bound_tol: float = 1e-6,
    step_size: float = 1e-4,
) -> Prop2Report:
    """Radial push of cross-entropy without a final norm, on positive margins."""
    rng = np.random.default_rng(seed)
    probes: list[RadialProbe] = []
    id_viol = bound_viol = growth_fail = 0
    while len(probes) < n_probes:
        h = _probe_h(rng, d)
        w = (rng.standard_normal((d, v)) / np.sqrt(d)).astype(np.float32)
        y = int(rng.integers(v))
        z = h.astype(np.float64) @ w.astype(np.float64)
        margin = float(z[y] - np.max(np.delete(z, y)))
        if margin <= 0:
            continue
        p = _softmax64(z)
        dz = p.copy()
        dz[y] -= 1.0
        radial_z = float(dz @ z)
        bound = -(1.0 - p[y]) * margin

        grad = _ce_grad_through(h, w, y, norm=None)
        radial_h = float(grad.astype(np.float64) @ h.astype(np.float64))
        if abs(radial_h - radial_z) > identity_tol:
            id_viol += 1
        if radial_z > bound + bound_tol:
            bound_viol += 1
        h_next = h.astype(np.float64) - step_size * grad.astype(np.float64)
        if np.linalg.norm(h_next) <= np.linalg.norm(h.astype(np.float64)):
            growth_fail += 1
        denom = float(np.linalg.norm(grad) * np.linalg.norm(h)) + 1e-30
        probes.append(RadialProbe(h, "cross_entropy", grad, radial_h, radial_h / denom,
                                  margin=margin, bound=bound))
    return Prop2Report(id_viol, bound_viol, probes, growth_fail)


def prop2_two_logit_case() -> tuple[float, float]:
    """The z=(2,0), y=0 case: (radial inner product, bound)."""
    z = np.array([2.0, 0.0])
    p = _softmax64(z)
    dz = p.copy()
    dz[0] -= 1.0
    margin = z[0] - z[1]
    return float(dz @ z), float(-(1.0 - p[0]) * margin)


@dataclass
class Prop3Report:
    max_coord_gap: float
    sign_violations: int
    max_ln_alignment: float  # |<grad, 1>| / (|grad| sqrt(d)), ln variant
    probes: list[RadialProbe]


def check_prop3(
    lam: float = 0.1,
    s_tgt: float = 1.0,
    n_probes: int = 100,
    d: int = 16,
    seed: int = 0,
    eps: float = 1e-6,
) -> Prop3Report:
    """Closed-form agreement and restoring-force direction of the scale loss."""
    rng = np.random.default_rng(seed)
    rms_anchor = AuxAnchor.with_target(lam, s_tgt, stat="rms-r", eps=eps)
    ln_anchor = AuxAnchor.with_target(lam, s_tgt, stat="ln-sigma", eps=eps)
    max_gap = 0.0
    sign_viol = 0
    max_ln_align = 0.0
    probes: list[RadialProbe] = []
    for _ in range(n_probes):
        h_np = _probe_h(rng, d)

        h = Tensor(h_np.reshape(1, -1), requires_grad=True)
        with Tape() as tape:
            tape.backward(rms_anchor.loss(h))
        grad = h.grad.reshape(-1).astype(np.float64)

        h64 = h_np.astype(np.float64)
        r = np.sqrt((h64 * h64).mean() + eps)
        closed = 2.0 * lam * (r - s_tgt) / (d * r) * h64
        max_gap = max(max_gap, float(np.abs(grad - closed).max()))

        radial = float(grad @ h64)
        if abs(r - s_tgt) > 1e-9 and np.sign(radial) != np.sign(r - s_tgt):
            sign_viol += 1
        denom = float(np.linalg.norm(grad) * np.linalg.norm(h64)) + 1e-30
        probes.append(RadialProbe(h_np, "scale_anchor", grad.astype(np.float32),
                                  radial, radial / denom))

        hl = Tensor(h_np.reshape(1, -1), requires_grad=True)
        with Tape() as tape:
            tape.backward(ln_anchor.loss(hl))
        gln = hl.grad.reshape(-1).astype(np.float64)
        align = abs(gln.sum()) / (np.linalg.norm(gln) * np.sqrt(d) + 1e-30)
        max_ln_align = max(max_ln_align, float(align))
    return Prop3Report(max_gap, sign_viol, max_ln_align, probes)


# -- training-dynamics experiments ----------------------------------------------


@dataclass
class ChasingOutcome:
    anchored: RunMetrics
    unanchored: RunMetrics | None
    unanchored_diverged: bool
    anchored_result: TrainResult | None
    taper_start_logit_l2: float
    anchored_final_logit_l2: float
    unanchored_final_logit_l2: float
    ratio: float  # unanchored final / anchored final


def logit_chasing_experiment(
    stream: np.ndarray,
    vocab_size: int,
    train_cfg: TrainConfig,
    norm_variant: str = "rms",
) -> ChasingOutcome:
    """Train all-taper twins (with and without the scale loss) on one seed.

    Divergence of the unanchored run is recorded as an outcome; its series
    then covers the steps completed before the failure.
    """
    mcfg = desk_model_config(vocab_size, taper_scope="all", norm_variant=norm_variant)
    anchored_cfg = replace(train_cfg, aux_enabled=True)
    plain_cfg = replace(train_cfg, aux_enabled=False)

    anchored_res = train(build_model(mcfg, train_cfg.seed), anchored_cfg, stream)
    anchored = anchored_res.metrics

    diverged = False
    unanchored: RunMetrics | None = None
    try:
        unanchored = train(build_model(mcfg, train_cfg.seed), plain_cfg, stream).metrics
    except TrainingError as e:
        diverged = True
        unanchored = e.partial_metrics

    k_start = anchored_cfg.gate_schedule().k_start
    series = anchored.column("logit_l2")
    start_val = float(series[k_start - 1])
    anchored_final = float(series[-1])
    un_series = unanchored.column("logit_l2") if unanchored is not None else np.array([np.nan])
    un_final = float(un_series[-1])
    return ChasingOutcome(
        anchored=anchored,
        unanchored=unanchored,
        unanchored_diverged=diverged,
        anchored_result=anchored_res,
        taper_start_logit_l2=start_val,
        anchored_final_logit_l2=anchored_final,
        unanchored_final_logit_l2=un_final,
        ratio=un_final / anchored_final,
    )


GRAD_GROUPS = ["grad_emb", "grad_qkv", "grad_attn_out", "grad_mlp_in", "grad_mlp_out", "grad_norms"]


def grad_alignment_report(
    a: RunMetrics, b: RunMetrics, tail_frac: float = 0.1
) -> dict[str, float]:
    """Per-weight-type ratio of mean gradient norms over the final steps.

    Both runs must share the step grid; the ratio is mean(a) / mean(b) per
    group over the last ``tail_frac`` of steps.
    """
    steps_a, steps_b = a.column("step"), b.column("step")
    if steps_a.shape != steps_b.shape or not np.array_equal(steps_a, steps_b):
        raise InputError("runs have mismatched step grids")
    n_tail = max(1, int(len(steps_a) * tail_frac))
    out = {}
    for group in GRAD_GROUPS:
        ta = a.column(group)[-n_tail:].mean()
        tb = b.column(group)[-n_tail:].mean()
        out[group] = float(ta / tb) if tb > 0 else float("inf")
    return out


# -- report serialization -------------------------------------------------------


def write_probe_csv(probes: list[RadialProbe], path: str, seed: int | None = None,
                    extra_comments: list[str] | None = None) -> str:
    """Probe report in the trainer schema plus radial_ratio/margin/bound."""
    with open(path, "w", newline="") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        for line in extra_comments or []:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for i, p in enumerate(probes):
            row = {c: "" for c in REPORT_COLUMNS}
            row["step"] = i
            row["radial_ratio"] = f"{p.ratio:.9e}"
            row["margin"] = "" if np.isnan(p.margin) else f"{p.margin:.9e}"
            row["bound"] = "" if np.isnan(p.bound) else f"{p.bound:.9e}"
            writer.writerow([row[c] for c in REPORT_COLUMNS])
    return path
