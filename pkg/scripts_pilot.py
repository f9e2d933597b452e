"""Pilot run for the desk experiments (throwaway calibration script)."""

import json
import multiprocessing as mp
import sys
import time

import numpy as np


def run_one(args):
    name, scope, aux, seed, steps = args
    from dataclasses import replace
    from tapernorm.data import load_corpus
    from tapernorm.trainer import build_model, desk_model_config, desk_train_config, train

    stream, vocab = load_corpus("/tmp/corpus2.txt")
    mcfg = desk_model_config(vocab.size, taper_scope=scope)
    tc = replace(desk_train_config(steps=steps, seed=seed, aux_enabled=aux), eval_interval=0)
    t0 = time.perf_counter()
    res = train(build_model(mcfg, seed=seed), tc, stream)
    dt = time.perf_counter() - t0
    m = res.metrics
    return {
        "name": name,
        "seconds": dt,
        "final_val_ce": res.final_val_ce,
        "ce": m.column("ce").tolist(),
        "logit_l2": m.column("logit_l2").tolist(),
        "grads": {g: m.column(g).tolist() for g in [
            "grad_emb", "grad_qkv", "grad_attn_out", "grad_mlp_in", "grad_mlp_out", "grad_norms"]},
        "s_tgt": res.s_tgt,
    }


if __name__ == "__main__":
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    jobs = [
        ("baseline", "none", False, 0, steps),
        ("internal_aux", "internal", True, 0, steps),
        ("all_aux", "all", True, 0, steps),
        ("all_noaux", "all", False, 0, steps),
    ]
    with mp.Pool(2) as pool:
        results = {r["name"]: r for r in pool.map(run_one, jobs)}

    k_start = int(steps * 0.3)
    base, internal = results["baseline"], results["internal_aux"]
    ce_b = np.array(base["ce"])[:k_start]
    ce_i = np.array(internal["ce"])[:k_start]
    parity = np.abs(ce_b - ce_i) / np.abs(ce_b)
    print(f"== criterion 6 trends (steps={steps}) ==")
    print(f"per-step parity max rel diff through k_start: {parity.max():.2e}")
    print(f"baseline final val CE: {base['final_val_ce']:.4f}")
    print(f"internal final val CE: {internal['final_val_ce']:.4f}")
    gap = abs(internal["final_val_ce"] - base["final_val_ce"]) / base["final_val_ce"]
    print(f"relative gap: {gap*100:.2f}% (need <= 5%)")

    aux_r, noaux_r = results["all_aux"], results["all_noaux"]
    la = np.array(aux_r["logit_l2"]); ln = np.array(noaux_r["logit_l2"])
    print(f"== criterion 7 trends ==")
    print(f"anchored: taper-start {la[k_start-1]:.3f} final {la[-1]:.3f} ratio {la[-1]/la[k_start-1]:.2f} (need <= 3)")
    print(f"unanchored final {ln[-1]:.3f}; separation {ln[-1]/la[-1]:.2f}x (need >= 2)")

    print(f"== criterion 8 trends ==")
    tail = max(1, steps // 10)
    for g in aux_r["grads"]:
        ra = np.mean(aux_r["grads"][g][-tail:])
        ri = np.mean(internal["grads"][g][-tail:])
        rn = np.mean(noaux_r["grads"][g][-tail:])
        print(f"{g:14s} allaux/internal {ra/ri:6.3f} (need [0.5,2])   noaux/internal {rn/ri:6.3f}")

    print(f"== timing: " + ", ".join(f"{k} {v['seconds']:.0f}s" for k, v in results.items()))
    with open("/tmp/pilot.json", "w") as f:
        json.dump({k: {kk: vv for kk, vv in v.items() if kk in ('final_val_ce', 'seconds', 's_tgt')} for k, v in results.items()}, f)
