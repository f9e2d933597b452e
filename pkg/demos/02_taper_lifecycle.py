"""The gated norm-removal lifecycle on one layer, end to end.

Warmup at gate 1 (exact rmsnorm) accumulates EMA statistics, calibration
freezes the alignment scalar c and copies the gain, then the gate decays
and the layer becomes a fixed scaling. A brute-force grid scan confirms
the calibrated c minimizes the branch mismatch.

Run:  python demos/02_taper_lifecycle.py
"""

import numpy as np

from tapernorm import GateSchedule, TaperNorm, calibrate, ema_update, gate_value, rmsnorm
from tapernorm.norms import alignment_objective
from tapernorm.tensor import Tensor, no_grad

rng = np.random.default_rng(7)
d = 16
layer = TaperNorm(d, variant="rms", mu=0.05, name="demo")
layer.gamma.data[:] = rng.uniform(0.7, 1.3, d).astype(np.float32)

print("warmup: gate held at 1, layer behaves exactly like rmsnorm")
batches = []
for step in range(40):
    h = (1.8 * rng.standard_normal((8, 12, d))).astype(np.float32)
    batches.append(h)
    with no_grad():
        out_taper = layer(Tensor(h), g=1.0).data
        out_plain = rmsnorm(Tensor(h), layer.gamma, layer.eps).data
    assert np.array_equal(out_taper, out_plain)
    ema_update(layer, h)
print(f"  {layer.ema_count} EMA updates accumulated; phase = {layer.phase}")

calibrate(layer)
print(f"calibrated: c* = {layer.c:.6f}, gain copied byte-for-byte "
      f"({layer.gamma_tilde.data.tobytes() == layer.gamma.data.tobytes()})")

pooled = np.concatenate([b.reshape(-1, d) for b in batches])
grid = layer.c * (1.0 + 0.01 * np.arange(-50, 51))
j = [alignment_objective(layer, pooled, c) for c in grid]
j_star = alignment_objective(layer, pooled, layer.c)
print(f"branch mismatch J(c*) = {j_star:.6f}; grid minimum = {min(j):.6f} "
      f"(within {100 * (j_star / min(j) - 1):.2f}%)")

print()
print("gate schedule: cosine decay between k_start and k_end")
sched = GateSchedule(k_start=100, k_end=200)
for k in (0, 100, 125, 150, 175, 200, 500):
    print(f"  g({k:3d}) = {gate_value(sched, k):.4f}")

print()
print("at gate 0 the layer is a pure linear map")
h = rng.standard_normal((2, d)).astype(np.float32)
with no_grad():
    out = layer(Tensor(h), g=0.0).data
expected = layer.c * h * layer.gamma_tilde.data
print(f"  max |taper(h; 0) - c * h * gain| = {np.abs(out - expected).max():.2e}")
