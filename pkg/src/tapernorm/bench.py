"""Inference throughput microbenchmark in last-token logits mode.

Times forward passes (no KV caching) for the baseline checkpoint and its
unfused/fused exports on a (batch, seq) grid, after verifying the variants
actually compute the same function. Throughput is reported in thousands of
tokens per second; speedups are relative to the first variant passed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .model import Model
from .norms import count_reductions
from .tensor import no_grad

EQUIVALENCE_TOL = 1e-3


@dataclass(frozen=True)
class BenchConfig:
    batch_sizes: tuple[int, ...] = (1, 4)
    seq_lens: tuple[int, ...] = (128, 256, 512)
    warmup_iters: int = 10
    timed_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters <= 0 or self.timed_iters <= 0:
            raise ContractError("iteration counts must be positive")
        if not self.batch_sizes or not self.seq_lens:
            raise ContractError("benchmark grid is empty")


@dataclass(frozen=True)
class BenchRow:
    variant: str
    batch: int
    seq: int
    latency_ms: float
    ktoks: float
    speedup: float


BENCH_COLUMNS = ["variant", "batch", "seq", "latency_ms", "ktoks", "speedup"]


def throughput_ktoks(batch: int, seq: int, iters: int, total_seconds: float) -> float:
    """batch * seq * iters tokens processed in total_seconds, in k tok/s."""
    return batch * seq * iters / total_seconds / 1e3


def _gate_for(model: Model) -> float:
    return 0.0 if model.taper_layers() else 1.0


def _sample_inputs(
    cfg, batch: int, seq: int, rng: np.random.Generator, stream: np.ndarray | None
) -> np.ndarray:
    if stream is None or len(stream) <= seq:
        return rng.integers(0, cfg.vocab, size=(batch, seq), dtype=np.int64)
    starts = rng.integers(0, len(stream) - seq, size=batch)
    return np.stack([np.asarray(stream[s : s + seq], dtype=np.int64) for s in starts])


def run_bench(
    models: dict[str, Model],
    config: BenchConfig = BenchConfig(),
    stream: np.ndarray | None = None,
) -> list[BenchRow]:
    """Benchmark each model variant over the (batch, seq) grid.

    All variants must share architecture dims and agree on last-token
    logits within ``EQUIVALENCE_TOL``; disagreement aborts, since timing
    non-equivalent models is meaningless. The first variant is the
    speedup reference.
    """
    if not models:
        raise ContractError("no models to benchmark")
    from .tensor import tune_allocator

    tune_allocator()
    names = list(models)
    dims = {(m.cfg.d, m.cfg.n_layers, m.cfg.n_heads, m.cfg.vocab) for m in models.values()}
    if len(dims) > 1:
        raise ContractError(f"model dims disagree across variants: {dims}")

    rng = np.random.default_rng(config.seed)
    rows: list[BenchRow] = []
    for batch in config.batch_sizes:
        for seq in config.seq_lens:
            inputs = _sample_inputs(models[names[0]].cfg, batch, seq, rng, stream)

            with no_grad():
                ref_logits = None
                for name in names:
                    z = models[name].forward(inputs, g=_gate_for(models[name]), mode="last").data
                    if ref_logits is None:
                        ref_logits = z
                    else:
                        gap = float(np.abs(z - ref_logits).max())
                        if gap > EQUIVALENCE_TOL:
                            raise NumericError(
                                f"variant {name!r} disagrees with {names[0]!r} by {gap:.3e} "
                                f"at B={batch}, T={seq}; models are not equivalent"
                            )

            baseline_ktoks = None
            for name in names:
                model = models[name]
                g = _gate_for(model)
                with no_grad():
                    for _ in range(config.warmup_iters):
                        model.forward(inputs, g=g, mode="last")
                    t0 = time.perf_counter()
                    for _ in range(config.timed_iters):
                        model.forward(inputs, g=g, mode="last")
                    total = time.perf_counter() - t0
                ktoks = throughput_ktoks(batch, seq, config.timed_iters, total)
                if baseline_ktoks is None:
                    baseline_ktoks = ktoks
                rows.append(BenchRow(
                    variant=name,
                    batch=batch,
                    seq=seq,
                    latency_ms=total / config.timed_iters * 1e3,
                    ktoks=ktoks,
                    speedup=ktoks / baseline_ktoks,
                ))
    return rows


def count_norm_ops(model: Model, inputs: np.ndarray) -> dict[str, int]:
    """Per-layer count of per-token statistic computations in one forward."""
    with count_reductions() as counts, no_grad():
        model.forward(inputs, g=_gate_for(model), mode="full")
    for layer in model.norm_layers():
        counts.setdefault(layer.name, 0)
    return dict(counts)


def write_bench_csv(rows: list[BenchRow], path: str, header_comments: list[str] | None = None) -> str:
    with open(path, "w", newline="") as f:
        for line in header_comments or []:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(BENCH_COLUMNS)
        for r in rows:
            writer.writerow([r.variant, r.batch, r.seq,
                             f"{r.latency_ms:.6f}", f"{r.ktoks:.3f}", f"{r.speedup:.4f}"])
    return path
