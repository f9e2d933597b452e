"""Command-line entry point: train, export, bench, verify, inspect.

Exit codes: 0 success, 2 config error, 3 input error, 4 contract
violation, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt
from .bench import BenchConfig, count_norm_ops, run_bench, write_bench_csv
from .config import ENV_OUT_DIR, load_config, write_manifest
from .data import build_default_corpus, load_corpus
from .errors import (
    CalibrationError,
    ConfigError,
    ContractError,
    FormatError,
    InputError,
    NumericError,
    TaperNormError,
    TrainingError,
)
from .fold import export_fused, export_unfused, max_logit_gap
from .model import Model
from .tensor import no_grad
from .trainer import TrainConfig, build_model, desk_train_config, train
from . import verify as V

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_CONTRACT = 4
EXIT_NUMERIC = 5


def _exit_code(err: TaperNormError) -> int:
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, (InputError, FormatError)):
        return EXIT_INPUT
    if isinstance(err, (ContractError, CalibrationError)):
        return EXIT_CONTRACT
    return EXIT_NUMERIC  # NumericError, TrainingError


def _resolve_corpus(spec: str, out_dir: str) -> str:
    if spec == "builtin":
        return build_default_corpus(os.path.join(out_dir, "corpus.txt"))
    return spec


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, seed=args.seed, out_dir=args.out)
    out_dir = cfg.out_dir()
    os.makedirs(out_dir, exist_ok=True)
    corpus_path = _resolve_corpus(cfg["data"]["corpus"], out_dir)
    stream, vocab = load_corpus(corpus_path)

    model_cfg = cfg.model_config(vocab.size)
    train_cfg = cfg.train_config()
    model = build_model(model_cfg, train_cfg.seed, ema_mu=train_cfg.ema_mu)
    mhash = cfg.manifest_hash()
    result = train(
        model, train_cfg, stream,
        out_dir=out_dir, vocab_chars=vocab.chars, manifest_hash=mhash,
    )
    manifest = write_manifest(cfg, out_dir, {
        "corpus": corpus_path,
        "checkpoint": result.checkpoint_path or "",
        "metrics": os.path.join(out_dir, "metrics.csv"),
    })
    print(f"trained {train_cfg.steps} steps; final val CE {result.final_val_ce:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"manifest:   {manifest} (hash {mhash})")
    return EXIT_OK


def _load_for_export(path: str):
    model, header = ckpt.load_checkpoint(path)
    gate = header.get("gate", 1.0)
    return model, header, gate


def cmd_export(args) -> int:
    model, header, gate = _load_for_export(args.checkpoint)
    if gate != 0.0:
        raise ContractError(f"export requires a gate-0 checkpoint; stored g={gate}")
    exporter = export_fused if args.mode == "fused" else export_unfused
    exported = exporter(model, gate=gate)

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.probes):
        tokens = rng.integers(0, model.cfg.vocab, size=(4, min(32, model.cfg.t_max)))
        worst = max(worst, max_logit_gap(model, exported, tokens))

    out = args.out or args.checkpoint.replace(".tpnc", f".{args.mode}.tpnc")
    ckpt.save_checkpoint(
        exported, out, step=header.get("step", 0), gate=0.0,
        train_config=header.get("train"), s_tgt=header.get("s_tgt"),
        manifest_hash=header.get("manifest_hash"), vocab_chars=header.get("vocab_chars"),
    )
    print(f"exported {args.mode} model: {out}")
    print(f"max logit deviation over {args.probes} probe batches: {worst:.3e}")
    return EXIT_OK


def cmd_bench(args) -> int:
    models: dict[str, Model] = {}
    header = None
    for name, path in [("baseline", args.baseline), ("unfused", args.unfused), ("fused", args.fused)]:
        if path:
            models[name], header = ckpt.load_checkpoint(path)[0], ckpt.read_header(path)
    if not models:
        raise InputError("no checkpoints given to benchmark")

    stream = None
    if args.corpus:
        stream, _ = load_corpus(args.corpus)
    bench_cfg = BenchConfig(
        batch_sizes=tuple(args.batch_sizes), seq_lens=tuple(args.seq_lens),
        warmup_iters=args.warmup_iters, timed_iters=args.timed_iters, seed=args.seed,
    )
    rows = run_bench(models, bench_cfg, stream=stream)
    comments = [f"seed={args.seed}"]
    if header and header.get("manifest_hash"):
        comments.append(f"manifest {header['manifest_hash']}")
    write_bench_csv(rows, args.out, header_comments=comments)
    for r in rows:
        print(f"{r.variant:10s} B={r.batch:<3d} T={r.seq:<5d} "
              f"{r.latency_ms:8.3f} ms  {r.ktoks:8.2f} ktok/s  x{r.speedup:.3f}")
    sample = models[next(iter(models))]
    probe = np.zeros((1, min(16, sample.cfg.t_max)), dtype=np.int64)
    for name, model in models.items():
        total = sum(count_norm_ops(model, probe).values())
        print(f"per-token reduction sites [{name}]: {total}")
    print(f"report: {args.out}")
    return EXIT_OK


def _verify_props(out_dir: str, seed: int) -> list[str]:
    failures = []
    p1 = V.check_prop1(seed=seed)
    V.write_probe_csv(p1.probes, os.path.join(out_dir, "prop1.csv"), seed=seed)
    ok1 = p1.max_ratio <= 1e-4 and p1.jacobian_gap <= 1e-6
    print(f"prop1: max radial ratio {p1.max_ratio:.2e} (<=1e-4), "
          f"jacobian gap {p1.jacobian_gap:.2e} (<=1e-6) {'PASS' if ok1 else 'FAIL'}")
    if not ok1:
        failures.append("prop1")
    sweep = V.prop1_eps_sweep(seed=seed)
    print("prop1 eps sweep (reported): " +
          ", ".join(f"eps={e:g}: {r:.2e}" for e, r in sweep.items()))

    p2 = V.check_prop2(seed=seed)
    V.write_probe_csv(p2.probes, os.path.join(out_dir, "prop2.csv"), seed=seed)
    ok2 = p2.identity_violations == 0 and p2.bound_violations == 0 and p2.norm_growth_failures == 0
    print(f"prop2: identity violations {p2.identity_violations}, bound violations "
          f"{p2.bound_violations}, growth failures {p2.norm_growth_failures} "
          f"{'PASS' if ok2 else 'FAIL'}")
    if not ok2:
        failures.append("prop2")

    p3 = V.check_prop3(seed=seed)
    V.write_probe_csv(p3.probes, os.path.join(out_dir, "prop3.csv"), seed=seed)
    ok3 = p3.max_coord_gap <= 1e-6 and p3.sign_violations == 0 and p3.max_ln_alignment <= 1e-6
    print(f"prop3: closed-form gap {p3.max_coord_gap:.2e} (<=1e-6), sign violations "
          f"{p3.sign_violations}, ln alignment {p3.max_ln_alignment:.2e} "
          f"{'PASS' if ok3 else 'FAIL'}")
    if not ok3:
        failures.append("prop3")
    return failures


def _verify_experiments(out_dir: str, seed: int, steps: int, corpus: str) -> list[str]:
    corpus_path = _resolve_corpus(corpus, out_dir)
    stream, vocab = load_corpus(corpus_path)
    tc = desk_train_config(steps=steps, seed=seed)
    outcome = V.logit_chasing_experiment(stream, vocab.size, tc)
    outcome.anchored.to_csv(os.path.join(out_dir, "chasing_anchored.csv"),
                            header_comments=[f"seed={seed}"])
    if outcome.unanchored is not None:
        outcome.unanchored.to_csv(os.path.join(out_dir, "chasing_unanchored.csv"),
                                  header_comments=[f"seed={seed}"])
    print(f"logit chasing: anchored taper-start {outcome.taper_start_logit_l2:.3f} "
          f"final {outcome.anchored_final_logit_l2:.3f}; unanchored final "
          f"{outcome.unanchored_final_logit_l2:.3f} "
          f"({'diverged, ' if outcome.unanchored_diverged else ''}ratio {outcome.ratio:.2f}x)")

    failures = []
    anchored_growth = outcome.anchored_final_logit_l2 / outcome.taper_start_logit_l2
    if not (outcome.ratio >= 2.0 and anchored_growth <= 3.0):
        failures.append("chasing")

    # gradient alignment: anchored all-taper against internal-taper(+aux)
    from .model import ModelConfig

    internal_cfg = V.desk_model_config(vocab.size, taper_scope="internal")
    internal = train(build_model(internal_cfg, seed), replace(tc, aux_enabled=True), stream)
    ratios = V.grad_alignment_report(outcome.anchored, internal.metrics)
    print("grad alignment (anchored all-taper / internal-taper): " +
          ", ".join(f"{k.removeprefix('grad_')} {v:.2f}" for k, v in ratios.items()))
    if not all(0.5 <= v <= 2.0 for v in ratios.values()):
        failures.append("gradalign")
    with open(os.path.join(out_dir, "grad_alignment.csv"), "w") as f:
        f.write(f"# seed={seed}\ngroup,ratio\n")
        for k, v in ratios.items():
            f.write(f"{k},{v:.6f}\n")
    return failures


def cmd_verify(args) -> int:
    out_dir = args.out or os.path.join(os.environ.get(ENV_OUT_DIR, "runs"), "verify")
    os.makedirs(out_dir, exist_ok=True)
    failures: list[str] = []
    if args.suite in ("props", "all"):
        failures += _verify_props(out_dir, args.seed)
    if args.suite in ("chasing", "all"):
        failures += _verify_experiments(out_dir, args.seed, args.steps, args.corpus)
    if failures:
        print(f"FAILED suites: {', '.join(failures)}")
        raise NumericError(f"verification failed: {', '.join(failures)}")
    print("all selected verification suites passed")
    return EXIT_OK


def cmd_inspect(args) -> int:
    header = ckpt.read_header(args.checkpoint)
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tapernorm",
        description="train, export, benchmark, and verify gated-norm-removal transformers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("export", help="fold a gate-0 checkpoint for norm-free inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("fused", "unfused"), required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("bench", help="throughput microbenchmark over model variants")
    p.add_argument("--baseline", required=True)
    p.add_argument("--unfused", default=None)
    p.add_argument("--fused", default=None)
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 4])
    p.add_argument("--seq-lens", type=int, nargs="+", default=[128, 256, 512])
    p.add_argument("--warmup-iters", type=int, default=10)
    p.add_argument("--timed-iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", default=None, help="sample inputs from this corpus")
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="numeric verification suites")
    p.add_argument("--suite", choices=("props", "chasing", "all"), default="props")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000,
                   help="training steps for the experiment suites")
    p.add_argument("--corpus", default="builtin")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("inspect", help="pretty-print a checkpoint header")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TaperNormError as err:
        print(f"error: {err}", file=sys.stderr)
        return _exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
