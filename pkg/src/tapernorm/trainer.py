"""Training orchestration: schedule, optimizer, taper lifecycle, metrics.

The lifecycle is warmup (gate held at 1, EMAs accumulating), a single
calibration event at the taper start (per-layer c frozen, gains copied,
aux target pinned), then cosine gate decay to 0. No gate value below 1 is
ever applied before every taper layer is calibrated.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .data import sample_batch, sequential_batches, split_stream
from .errors import ContractError, InputError, NumericError, TrainingError
from .model import Model, ModelConfig
from .norms import CALIBRATED, GateSchedule, calibrate, collect_calibration_stats
from .objective import AuxAnchor, combined_loss, cross_entropy
from .tensor import Tape, no_grad

METRIC_COLUMNS = [
    "step", "g", "lr", "ce", "aux", "logit_l2",
    "grad_emb", "grad_qkv", "grad_attn_out", "grad_mlp_in", "grad_mlp_out", "grad_norms",
]

_GROUP_BY_SUFFIX = [
    (".qkv", "grad_qkv"),
    (".qkv_bias", "grad_qkv"),
    (".attn_out", "grad_attn_out"),
    (".mlp_in", "grad_mlp_in"),
    (".mlp_in_bias", "grad_mlp_in"),
    (".mlp_out", "grad_mlp_out"),
    (".gamma", "grad_norms"),
    (".gamma_tilde", "grad_norms"),
    (".beta", "grad_norms"),
]


def weight_group(name: str) -> str:
    """Metric group for a parameter name."""
    if name == "embed":
        return "grad_emb"
    for suffix, group in _GROUP_BY_SUFFIX:
        if name.endswith(suffix):
            return group
    return "grad_norms"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    seq_len: int = 128
    peak_lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    taper_start: int | None = None  # default: end of LR warmup
    taper_end: int | None = None  # default: total steps
    aux_enabled: bool = False
    aux_lambda: float = 0.1
    ema_mu: float = 0.01
    seed: int = 0
    eval_interval: int = 500
    val_frac: float = 0.1
    val_batches: int = 8

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ContractError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.steps <= 0 or self.batch_size <= 0 or self.seq_len <= 0:
            raise ContractError("steps, batch_size, seq_len must be positive")

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.steps * self.warmup_frac))

    def gate_schedule(self) -> GateSchedule:
        start = self.warmup_steps if self.taper_start is None else self.taper_start
        end = self.steps if self.taper_end is None else self.taper_end
        if start < self.warmup_steps:
            raise ContractError(
                f"taper start {start} precedes LR warmup end {self.warmup_steps}"
            )
        return GateSchedule(start, end)


def lr_at(config: TrainConfig, k: int) -> float:
    """Linear warmup to the peak, then half-cosine decay to zero."""
    if not 0 <= k <= config.steps:
        raise ContractError(f"step {k} outside [0, {config.steps}]")
    w = config.warmup_steps
    if k <= w:
        return config.peak_lr * k / w
    frac = (k - w) / (config.steps - w)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """AdamW with bias correction and global-norm clipping; weight decay 0.

    State is keyed by parameter name so parameters appearing mid-run (the
    copied gains at calibration) start with fresh moments and their own
    bias-correction step count.
    """

    def __init__(self, betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8):
        self.betas = betas
        self.eps = np.float32(eps)
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, named_params, lr: float, clip: float, step_index: int = 0) -> None:
        live = [(name, p) for name, p in named_params if p.grad is not None]
        sq = 0.0
        for name, p in live:
            g = p.grad
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {name}", step=step_index)
            sq += float(np.vdot(g, g))
        total = math.sqrt(sq)
        scale = clip / total if (clip > 0 and total > clip) else 1.0

        b1, b2 = self.betas
        for name, p in live:
            g = p.grad if scale == 1.0 else p.grad * np.float32(scale)
            m, v, t = self.state.get(name) or (
                np.zeros_like(p.data), np.zeros_like(p.data), 0,
            )
            t += 1
            m = np.float32(b1) * m + np.float32(1.0 - b1) * g
            v = np.float32(b2) * v + np.float32(1.0 - b2) * (g * g)
            m_hat = m / np.float32(1.0 - b1**t)
            v_hat = v / np.float32(1.0 - b2**t)
            p.data -= np.float32(lr) * m_hat / (np.sqrt(v_hat) + self.eps)
            self.state[name] = (m, v, t)


@dataclass
class RunMetrics:
    """Append-only per-step records in the fixed CSV schema."""

    rows: list[dict] = field(default_factory=list)

    def append(self, **values) -> None:
        self.rows.append({c: values.get(c, 0.0) for c in METRIC_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        if name not in METRIC_COLUMNS:
            raise InputError(f"unknown metric column {name!r}")
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def to_csv(self, path: str, header_comments: list[str] | None = None) -> str:
        with open(path, "w", newline="") as f:
            for line in header_comments or []:
                f.write(f"# {line}\n")
            writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)
        return path

    @classmethod
    def from_csv(cls, path: str) -> "RunMetrics":
        rows = []
        with open(path, newline="") as f:
            lines = [ln for ln in f if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        if reader.fieldnames != METRIC_COLUMNS:
            raise InputError(f"{path}: unexpected metric columns {reader.fieldnames}")
        for raw in reader:
            rows.append({c: float(raw[c]) if c != "step" else int(float(raw[c])) for c in METRIC_COLUMNS})
        return cls(rows)


@dataclass
class TrainResult:
    model: Model
    metrics: RunMetrics
    final_val_ce: float
    s_tgt: float | None
    final_gate: float
    checkpoint_path: str | None
    val_history: list[tuple[int, float]]


def evaluate_ce(
    model: Model,
    stream: np.ndarray,
    batch_size: int,
    seq_len: int,
    g: float,
    max_batches: int = 8,
) -> float:
    """Mean cross-entropy over deterministic validation windows."""
    losses, weights = [], []
    with no_grad():
        for inputs, targets in sequential_batches(stream, batch_size, seq_len, max_batches):
            logits = model.forward(inputs, g=g, mode="full")
            losses.append(cross_entropy(logits, targets).item())
            weights.append(inputs.shape[0])
    if not losses:
        raise InputError("validation stream too short for one window")
    return float(np.average(losses, weights=weights))


def eval_gate(model: Model) -> float:
    """Gate used for evaluation: 0 once every taper layer is calibrated."""
    tapers = model.taper_layers()
    if tapers and all(t.phase == CALIBRATED for t in tapers):
        return 0.0
    return 1.0


def build_model(cfg: ModelConfig, seed: int, ema_mu: float = 0.01) -> Model:
    """Seeded model whose init stream is split from the data stream.

    ``SeedSequence(seed)`` spawns two children: child 0 initializes weights
    here, child 1 drives batch sampling inside ``train``. Model structure
    therefore never perturbs the data order and vice versa.
    """
    init_ss, _ = np.random.SeedSequence(seed).spawn(2)
    return Model(cfg, np.random.default_rng(init_ss), ema_mu)


def train(
    model: Model,
    config: TrainConfig,
    stream: np.ndarray,
    out_dir: str | None = None,
    vocab_chars: str | None = None,
    manifest_hash: str | None = None,
) -> TrainResult:
    """Run the full training program on a token stream.

    Holds the gate at 1 while accumulating calibration and aux EMAs,
    calibrates every taper layer (and freezes the aux target) at the taper
    start, then decays the gate per the schedule. Metrics are recorded
    every step; checkpoints are written at eval intervals when ``out_dir``
    is given. A non-finite loss aborts with a diagnostic checkpoint.
    """
    from .tensor import tune_allocator

    tune_allocator()
    tapered = bool(model.taper_layers())
    sched = config.gate_schedule() if tapered else None
    anchor = None
    if config.aux_enabled:
        stat = "rms-r" if model.cfg.norm_variant == "rms" else "ln-sigma"
        anchor = AuxAnchor(config.aux_lambda, config.ema_mu, stat=stat, eps=model.cfg.eps)
    for layer in model.taper_layers():
        layer.mu = config.ema_mu

    train_stream, val_stream = split_stream(stream, config.val_frac)
    ss = np.random.SeedSequence(config.seed)
    _, data_ss = ss.spawn(2)  # stream 0 reserved for model init
    data_rng = np.random.default_rng(data_ss)

    opt = AdamW(config.betas)
    metrics = RunMetrics()
    val_history: list[tuple[int, float]] = []
    freeze_step = sched.k_start if sched else config.warmup_steps

    def save(step, gate, name):
        if out_dir is None:
            return None
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name)
        return ckpt.save_checkpoint(
            model, path, step=step, gate=gate,
            train_config=_config_dict(config),
            s_tgt=anchor.s_tgt if anchor else None,
            manifest_hash=manifest_hash, vocab_chars=vocab_chars,
        )

    g = 1.0
    for k in range(1, config.steps + 1):
        g = sched.value(k) if sched else 1.0
        lr = lr_at(config, k)
        inputs, targets = sample_batch(train_stream, config.batch_size, config.seq_len, data_rng)

        try:
            with Tape() as tape:
                collecting = tapered and k <= freeze_step
                if collecting:
                    with collect_calibration_stats():
                        logits, states = model.forward_with_states(inputs, g)
                else:
                    logits, states = model.forward_with_states(inputs, g)
                ce = cross_entropy(logits, targets)
                aux = None
                if anchor is not None and anchor.frozen:
                    aux = anchor.loss(states)
                loss = combined_loss(ce, aux)
        except NumericError as e:
            save(k, g, "diagnostic.tpnc")
            err = TrainingError(f"forward diverged at step {k}: {e}", step=k)
            err.partial_metrics = metrics
            raise err from e

        ce_val = ce.item()
        if not math.isfinite(ce_val) or (aux is not None and not math.isfinite(aux.item())):
            save(k, g, "diagnostic.tpnc")
            err = TrainingError(f"non-finite loss at step {k}", step=k)
            err.partial_metrics = metrics
            raise err

        if anchor is not None and not anchor.frozen:
            anchor.update(states)

        tape.backward(loss)

        group_sums: dict[str, list[float]] = {}
        for name, p in model.named_params():
            if p.grad is None:
                continue
            group_sums.setdefault(weight_group(name), []).append(
                float(np.linalg.norm(p.grad))
            )
        logit_l2 = float(
            np.linalg.norm(logits.data.reshape(-1, model.cfg.vocab), axis=1).mean()
        )
        metrics.append(
            step=k, g=g, lr=lr, ce=ce_val,
            aux=aux.item() if aux is not None else 0.0,
            logit_l2=logit_l2,
            **{grp: float(np.mean(vals)) for grp, vals in group_sums.items()},
        )

        try:
            opt.step(model.named_params(), lr, config.grad_clip, step_index=k)
        except TrainingError as err:
            save(k, g, "diagnostic.tpnc")
            err.partial_metrics = metrics
            raise
        for _, p in model.named_params():
            p.zero_grad()

        if tapered and k == sched.k_start:
            for layer in model.taper_layers():
                calibrate(layer)
            if anchor is not None:
                anchor.freeze()
        elif anchor is not None and not tapered and k == freeze_step:
            anchor.freeze()

        if config.eval_interval and k % config.eval_interval == 0 and k < config.steps:
            val_ce = evaluate_ce(
                model, val_stream, config.batch_size, config.seq_len,
                eval_gate(model), config.val_batches,
            )
            val_history.append((k, val_ce))
            save(k, g, f"step{k:06d}.tpnc")

    final_g = eval_gate(model)
    final_val = evaluate_ce(
        model, val_stream, config.batch_size, config.seq_len, final_g, config.val_batches
    )
    val_history.append((config.steps, final_val))
    path = save(config.steps, g, "final.tpnc")
    if out_dir is not None:
        metrics.to_csv(
            os.path.join(out_dir, "metrics.csv"),
            header_comments=[f"manifest {manifest_hash}"] if manifest_hash else None,
        )
    return TrainResult(
        model=model,
        metrics=metrics,
        final_val_ce=final_val,
        s_tgt=anchor.s_tgt if anchor else None,
        final_gate=g,
        checkpoint_path=path,
        val_history=val_history,
    )


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(d["betas"])
    return d


# -- desk-scale experiment defaults -------------------------------------------


def desk_model_config(vocab: int, taper_scope: str = "none", norm_variant: str = "rms") -> ModelConfig:
    """Laptop-sized architecture used by the experiment suites.

    Context capacity covers the benchmark grid (up to 512) even though
    training always uses windows of 128.
    """
    return ModelConfig(
        d=64, n_layers=2, n_heads=4, t_max=512, vocab=vocab,
        norm_variant=norm_variant, taper_scope=taper_scope,
    )


def desk_train_config(steps: int = 5000, seed: int = 0, aux_enabled: bool = False,
                      taper_start_frac: float = 0.3,
                      taper_end_frac: float = 0.6) -> TrainConfig:
    """Shared desk schedule for the experiment suites.

    LR warmup stays at 5%, but the taper window opens at 30% of the run:
    at desk step counts the 5% point is far too early for the scale
    statistics to be representative (activations are still shrinking out
    of their init), so the calibration EMAs and the aux target freeze once
    the model has matured, and the gate reaches 0 at 60% so the tail
    trains fully norm-free.
    """
    return TrainConfig(
        steps=steps, batch_size=16, seq_len=128, seed=seed,
        aux_enabled=aux_enabled,
        taper_start=int(steps * taper_start_frac),
        taper_end=int(steps * taper_end_frac),
        eval_interval=max(1, steps // 5),
        val_batches=16,
    )
