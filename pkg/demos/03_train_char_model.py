"""Train a small char-level model with internal norm tapering.

A shortened version of the full desk recipe (a few hundred steps): the
model matches a plain-norm baseline bit for bit through the taper start,
then decays the gate to zero and keeps training norm-free internally.

Run:  python demos/03_train_char_model.py
"""

import os
import tempfile

import numpy as np

from tapernorm import build_default_corpus, load_corpus
from tapernorm.trainer import TrainConfig, build_model, desk_model_config, train

out_dir = os.path.join(tempfile.gettempdir(), "tapernorm_demo_train")
corpus = build_default_corpus(os.path.join(out_dir, "corpus.txt"), n_bytes=200_000)
stream, vocab = load_corpus(corpus)
print(f"corpus: {len(stream)} chars, vocabulary {vocab.size}")

steps = 600
tc = TrainConfig(
    steps=steps, batch_size=16, seq_len=128, seed=0,
    aux_enabled=True, taper_start=30, taper_end=360, eval_interval=200,
)

print("\ntraining the plain-rmsnorm baseline...")
base = train(build_model(desk_model_config(vocab.size, "none"), 0), tc, stream)

print("training the internal-taper twin (same seed)...")
taper = train(build_model(desk_model_config(vocab.size, "internal"), 0), tc, stream)

ce_b = base.metrics.column("ce")
ce_t = taper.metrics.column("ce")
parity = np.abs(ce_b[:30] - ce_t[:30]) / ce_b[:30]
print(f"\nper-step loss parity through taper start: max rel diff {parity.max():.2e}")
print(f"gate reached {taper.final_gate}; aux target s_tgt = {taper.s_tgt:.4f}")
print(f"baseline final val CE (g irrelevant): {base.final_val_ce:.4f}")
print(f"tapered  final val CE (gate 0)     : {taper.final_val_ce:.4f}")
print(f"initial CE was ln(V) = {np.log(vocab.size):.4f}")

print("\nmetrics tail (step, g, ce):")
for row in taper.metrics.rows[-5:]:
    print(f"  {row['step']:4d}  g={row['g']:.3f}  ce={row['ce']:.4f}")
