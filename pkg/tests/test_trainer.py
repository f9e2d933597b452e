"""Schedule, optimizer, metrics, and the training lifecycle."""

import math
import os
from dataclasses import replace

import numpy as np
import pytest

from tapernorm.errors import ContractError, InputError, TrainingError
from tapernorm.model import Model, ModelConfig
from tapernorm.tensor import Tensor
from tapernorm.trainer import (
    METRIC_COLUMNS,
    AdamW,
    RunMetrics,
    TrainConfig,
    build_model,
    evaluate_ce,
    lr_at,
    train,
    weight_group,
)


def tiny_cfg(vocab, **overrides):
    base = dict(d=16, n_layers=2, n_heads=2, t_max=16, vocab=vocab)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train(**overrides):
    base = dict(
        steps=40, batch_size=4, seq_len=12, peak_lr=1e-3, warmup_frac=0.25,
        eval_interval=0, val_frac=0.2, val_batches=2, seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestLRSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(steps=1000, warmup_frac=0.05, peak_lr=3e-4)
        assert lr_at(cfg, 0) == 0.0
        assert lr_at(cfg, cfg.warmup_steps) == pytest.approx(3e-4)
        assert abs(lr_at(cfg, 1000)) <= 1e-12

    def test_linear_warmup(self):
        cfg = TrainConfig(steps=1000, warmup_frac=0.1, peak_lr=1e-3)
        assert lr_at(cfg, 50) == pytest.approx(5e-4)

    def test_cosine_midpoint(self):
        cfg = TrainConfig(steps=1100, warmup_frac=100 / 1100, peak_lr=1e-3)
        assert lr_at(cfg, 600) == pytest.approx(5e-4, rel=1e-6)

    def test_out_of_range(self):
        cfg = TrainConfig(steps=100)
        with pytest.raises(ContractError):
            lr_at(cfg, 101)


class TestAdamW:
    def test_hand_unrolled_two_steps(self):
        # scalar parameter, textbook recurrence replayed in float32
        lr, b1, b2, eps = 0.1, 0.9, 0.95, 1e-8
        grads = [np.float32(0.3), np.float32(-0.2)]
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = AdamW(betas=(b1, b2), eps=eps)

        theta = np.float32(1.0)
        m = np.float32(0.0)
        v = np.float32(0.0)
        for t, g in enumerate(grads, start=1):
            p.grad = np.array([g], dtype=np.float32)
            opt.step([("p", p)], lr=lr, clip=0.0, step_index=t)
            m = np.float32(b1) * m + np.float32(1 - b1) * g
            v = np.float32(b2) * v + np.float32(1 - b2) * (g * g)
            m_hat = m / np.float32(1 - b1**t)
            v_hat = v / np.float32(1 - b2**t)
            theta = theta - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps))
        assert abs(float(p.data[0]) - float(theta)) <= 1e-10

    def test_zero_grads_leave_params(self):
        p = Tensor(np.array([2.0, -1.0], dtype=np.float32), requires_grad=True)
        p.grad = np.zeros(2, dtype=np.float32)
        AdamW().step([("p", p)], lr=1e-2, clip=1.0)
        np.testing.assert_array_equal(p.data, [2.0, -1.0])

    def test_clip_equals_prescaled_gradients(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal(8).astype(np.float32)
        g *= 10.0 / np.linalg.norm(g)  # global norm exactly 10

        pa = Tensor(np.ones(8, dtype=np.float32), requires_grad=True)
        pa.grad = g.copy()
        AdamW().step([("p", pa)], lr=1e-2, clip=1.0)

        pb = Tensor(np.ones(8, dtype=np.float32), requires_grad=True)
        pb.grad = g * np.float32(0.1)
        AdamW().step([("p", pb)], lr=1e-2, clip=0.0)  # clip disabled

        np.testing.assert_allclose(pa.data, pb.data, atol=1e-7)

    def test_nonfinite_grad_raises_with_step(self):
        p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        p.grad = np.array([1.0, np.nan], dtype=np.float32)
        with pytest.raises(TrainingError) as info:
            AdamW().step([("p", p)], lr=1e-2, clip=1.0, step_index=17)
        assert info.value.step == 17

    def test_late_params_get_fresh_state(self):
        opt = AdamW()
        p = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        p.grad = np.ones(1, dtype=np.float32)
        opt.step([("a", p)], lr=1e-3, clip=0.0)
        q = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        q.grad = np.ones(1, dtype=np.float32)
        opt.step([("a", p), ("b", q)], lr=1e-3, clip=0.0)
        assert opt.state["a"][2] == 2
        assert opt.state["b"][2] == 1


class TestWeightGroups:
    def test_mapping(self):
        assert weight_group("embed") == "grad_emb"
        assert weight_group("block0.qkv") == "grad_qkv"
        assert weight_group("block1.attn_out") == "grad_attn_out"
        assert weight_group("block0.mlp_in") == "grad_mlp_in"
        assert weight_group("block1.mlp_out") == "grad_mlp_out"
        assert weight_group("block0.norm_attn.gamma") == "grad_norms"
        assert weight_group("final_norm.gamma_tilde") == "grad_norms"


class TestRunMetrics:
    def test_csv_round_trip(self, tmp_path):
        m = RunMetrics()
        m.append(step=1, g=1.0, lr=1e-4, ce=2.5, aux=0.0, logit_l2=3.0,
                 grad_emb=0.1, grad_qkv=0.2, grad_attn_out=0.3,
                 grad_mlp_in=0.4, grad_mlp_out=0.5, grad_norms=0.6)
        m.append(step=2, g=0.5, lr=2e-4, ce=2.4, aux=0.01, logit_l2=3.1,
                 grad_emb=0.1, grad_qkv=0.2, grad_attn_out=0.3,
                 grad_mlp_in=0.4, grad_mlp_out=0.5, grad_norms=0.6)
        path = str(tmp_path / "metrics.csv")
        m.to_csv(path, header_comments=["manifest cafebabe"])
        first = open(path).readline()
        assert first == "# manifest cafebabe\n"
        second = open(path).readlines()[1].strip()
        assert second == ",".join(METRIC_COLUMNS)
        back = RunMetrics.from_csv(path)
        assert back.column("ce").tolist() == [2.5, 2.4]
        assert back.column("step").tolist() == [1, 2]

    def test_unknown_column(self):
        with pytest.raises(InputError):
            RunMetrics().column("latency")


class TestTrainLoop:
    def test_deterministic_across_runs(self, small_stream):
        cfg = tiny_cfg(vocab=7)
        results = []
        for _ in range(2):
            res = train(build_model(cfg, seed=5), tiny_train(steps=50, seed=5), small_stream)
            results.append(res)
        a, b = results
        assert a.metrics.column("ce").tolist() == b.metrics.column("ce").tolist()
        assert a.final_val_ce == b.final_val_ce

    def test_gate_reaches_zero_and_stays(self, small_stream):
        cfg = tiny_cfg(vocab=7, taper_scope="internal")
        tc = tiny_train(steps=40, taper_start=10, taper_end=25)
        res = train(build_model(cfg, seed=2), tc, small_stream)
        g = res.metrics.column("g")
        steps = res.metrics.column("step")
        assert np.all(g[steps <= 10] == 1.0)
        assert np.all(g[steps >= 25] == 0.0)
        assert res.final_gate == 0.0

    def test_lifecycle_ordering(self, small_stream):
        # no gate below 1 before every layer is calibrated and s_tgt frozen
        cfg = tiny_cfg(vocab=7, taper_scope="all")
        tc = tiny_train(steps=30, taper_start=12, taper_end=24, aux_enabled=True)
        model = build_model(cfg, seed=3)
        res = train(model, tc, small_stream)
        g = res.metrics.column("g")
        aux = res.metrics.column("aux")
        steps = res.metrics.column("step")
        assert np.all(g[steps <= 12] == 1.0)
        assert np.all(aux[steps <= 12] == 0.0)
        assert np.all(aux[(steps > 12) & (steps <= 24)] > 0.0)
        assert res.s_tgt is not None and res.s_tgt > 0
        for layer in model.taper_layers():
            assert layer.phase == "calibrated"
            assert layer.ema_count == 12

    def test_loss_identical_to_baseline_until_taper_start(self, small_stream):
        cfg_plain = tiny_cfg(vocab=7, taper_scope="none")
        cfg_taper = tiny_cfg(vocab=7, taper_scope="internal")
        tc_plain = tiny_train(steps=30, seed=9)
        tc_taper = tiny_train(steps=30, seed=9, taper_start=15, taper_end=28, aux_enabled=True)
        base = train(build_model(cfg_plain, seed=9), tc_plain, small_stream)
        tapered = train(build_model(cfg_taper, seed=9), tc_taper, small_stream)
        ce_a = base.metrics.column("ce")[:15]
        ce_b = tapered.metrics.column("ce")[:15]
        rel = np.abs(ce_a - ce_b) / np.abs(ce_a)
        assert rel.max() <= 1e-5
        # and they diverge afterwards (aux loss + gate decay kick in)
        assert np.abs(base.metrics.column("ce")[20:] - tapered.metrics.column("ce")[20:]).max() > 0

    def test_taper_start_before_warmup_rejected(self, small_stream):
        cfg = tiny_cfg(vocab=7, taper_scope="internal")
        tc = tiny_train(steps=40, taper_start=2)  # warmup end is 10
        with pytest.raises(ContractError):
            train(build_model(cfg, seed=0), tc, small_stream)

    def test_nan_abort_writes_diagnostic(self, small_stream, tmp_path):
        cfg = tiny_cfg(vocab=7)
        model = build_model(cfg, seed=0)
        model.embed.data[:] = 1e30  # force an overflow in the first forward
        out = str(tmp_path / "run")
        with pytest.raises(TrainingError) as info:
            train(model, tiny_train(steps=5), small_stream, out_dir=out)
        assert info.value.step == 1
        assert os.path.exists(os.path.join(out, "diagnostic.tpnc"))

    def test_metrics_written_with_checkpoints(self, small_stream, tmp_path):
        cfg = tiny_cfg(vocab=7)
        out = str(tmp_path / "run")
        res = train(
            build_model(cfg, seed=1),
            tiny_train(steps=20, eval_interval=10),
            small_stream,
            out_dir=out,
            manifest_hash="beef",
        )
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        assert os.path.exists(os.path.join(out, "step000010.tpnc"))
        assert os.path.exists(os.path.join(out, "final.tpnc"))
        assert res.checkpoint_path.endswith("final.tpnc")
        from tapernorm.checkpoint import read_header

        assert read_header(res.checkpoint_path)["manifest_hash"] == "beef"

    def test_training_reduces_loss(self, small_stream):
        cfg = tiny_cfg(vocab=7)
        res = train(build_model(cfg, seed=4), tiny_train(steps=200, peak_lr=3e-3), small_stream)
        ce = res.metrics.column("ce")
        assert ce[-10:].mean() < ce[0] * 0.8

    def test_evaluate_ce_uniform_model_near_log_v(self, small_stream):
        model = build_model(tiny_cfg(vocab=7), seed=6)
        val = evaluate_ce(model, small_stream[:400], 2, 12, g=1.0, max_batches=2)
        assert val == pytest.approx(math.log(7), rel=0.1)
