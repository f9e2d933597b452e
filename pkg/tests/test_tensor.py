"""Tensor core: op semantics, broadcasting, autodiff, and the FD oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tapernorm.tensor as tt
from tapernorm.errors import ContractError, DimensionError, DomainError, NumericError
from tapernorm.tensor import Tape, Tensor, grad_check, no_grad


def scalar_sum(f):
    return lambda x: f(x).sum()


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        out = eye @ eye
        np.testing.assert_array_equal(out.data, np.eye(2, dtype=np.float32))

    def test_hand_case(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal((a @ b).data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_backward_vs_fd(self):
        # positive operands keep every gradient coordinate away from zero,
        # where the relative-error formula loses meaning
        rng = np.random.default_rng(7)
        a0 = rng.uniform(0.3, 0.6, size=(2, 3)).astype(np.float32)
        b0 = rng.uniform(0.3, 0.6, size=(3, 2)).astype(np.float32)
        err_a = grad_check(lambda a: tt.matmul(a, Tensor(b0)).sum(), Tensor(a0))
        err_b = grad_check(lambda b: tt.matmul(Tensor(a0), b).sum(), Tensor(b0))
        assert err_a <= 1e-3
        assert err_b <= 1e-3

    def test_batched_backward(self):
        rng = np.random.default_rng(3)
        a0 = rng.uniform(0.3, 0.6, size=(2, 2, 3)).astype(np.float32)
        b0 = rng.uniform(0.3, 0.6, size=(2, 3, 2)).astype(np.float32)
        err = grad_check(lambda a: tt.matmul(a, Tensor(b0)).sum(), Tensor(a0))
        assert err <= 1e-3


class TestElementwise:
    def test_add_zero_and_mul_one(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        np.testing.assert_array_equal((x + 0.0).data, x.data)
        np.testing.assert_array_equal((x * 1.0).data, x.data)

    def test_broadcast_row_vector(self):
        x = Tensor(np.ones((2, 4, 3)))
        row = Tensor(np.arange(3, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            out = (x * row).sum()
            tape.backward(out)
        np.testing.assert_array_equal(row.grad, np.full(3, 8.0, dtype=np.float32))

    def test_incompatible_broadcast(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))

    def test_sqrt_negative_domain(self):
        with pytest.raises(DomainError):
            tt.sqrt(Tensor([-1.0]))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            tt.log(Tensor([0.0]))

    def test_div_by_zero_surfaces(self):
        with pytest.raises(NumericError):
            Tensor([1.0]) / Tensor([0.0])

    def test_silu_backward_vs_fd(self):
        rng = np.random.default_rng(11)
        # probe both sides of zero but stay off the flat spot near -1.28
        pos = rng.uniform(0.8, 1.5, size=4).astype(np.float32)
        neg = rng.uniform(-3.5, -2.5, size=4).astype(np.float32)
        assert grad_check(scalar_sum(tt.silu), Tensor(pos)) <= 1e-3
        assert grad_check(scalar_sum(tt.silu), Tensor(neg)) <= 1e-3

    def test_div_backward_vs_fd(self):
        rng = np.random.default_rng(5)
        a0 = rng.uniform(0.5, 1.0, size=4).astype(np.float32)
        b0 = rng.uniform(0.8, 1.25, size=4).astype(np.float32)
        assert grad_check(lambda a: (a / Tensor(b0)).sum(), Tensor(a0)) <= 1e-3
        assert grad_check(lambda b: (Tensor(a0) / b).sum(), Tensor(b0)) <= 1e-3


class TestReduce:
    def test_mean_last_axis(self):
        out = Tensor([[2.0, 4.0]]).mean(axis=-1)
        assert out.data.shape == (1,)
        assert out.item() == pytest.approx(3.0)

    def test_mean_of_identical_values(self):
        v = 0.731
        out = Tensor(np.full(9, v, dtype=np.float32)).mean()
        assert out.item() == pytest.approx(v, abs=1e-7)

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))).sum(axis=5)

    def test_variance_backward_vs_fd(self):
        rng = np.random.default_rng(13)
        x0 = rng.uniform(0.0, 0.25, size=(3, 4)).astype(np.float32)

        def variance_plus_tilt(x):
            # the linear term keeps gradients off zero at coords near the mean
            centered = x - x.mean(axis=-1, keepdims=True)
            return (centered * centered).mean(axis=-1).sum() + x.sum()

        assert grad_check(variance_plus_tilt, Tensor(x0)) <= 1e-3

    def test_sum_keepdims_backward(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            out = (x.sum(axis=1, keepdims=True) * Tensor([[2.0], [3.0]])).sum()
            tape.backward(out)
        np.testing.assert_array_equal(x.grad, [[2.0] * 3, [3.0] * 3])


class TestSoftmax:
    def test_symmetry(self):
        out = tt.softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)

    def test_two_logit_value(self):
        # direct evaluation: e^2 / (e^2 + 1)
        out = tt.softmax_rows(Tensor([[2.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.8808086, 0.1191913]], atol=1e-4)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((5, 7)).astype(np.float32)
        base = tt.softmax_rows(Tensor(z)).data
        shifted = tt.softmax_rows(Tensor(z + 3.7)).data
        np.testing.assert_allclose(base, shifted, atol=1e-6)

    def test_backward_vs_fd(self):
        rng = np.random.default_rng(17)
        z0 = rng.uniform(-0.2, 0.2, size=(1, 3)).astype(np.float32)
        # spread-out weights keep p_j * (w_j - E[w]) away from zero
        w = np.array([[0.5, 0.5, 6.0]], dtype=np.float32)
        err = grad_check(lambda z: (tt.softmax_rows(z) * Tensor(w)).sum(), Tensor(z0))
        assert err <= 1e-3

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.lists(st.floats(-30, 30, width=32), min_size=2, max_size=8),
            min_size=1,
            max_size=4,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    def test_rows_sum_to_one(self, rows):
        out = tt.softmax_rows(Tensor(np.array(rows, dtype=np.float32))).data
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            tape.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones(4, dtype=np.float32))

    def test_half_norm_squared_gives_x(self):
        x0 = np.array([1.5, -2.0, 0.25], dtype=np.float32)
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            tape.backward(((x * x).sum() * 0.5))
        np.testing.assert_allclose(x.grad, x0, atol=1e-7)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
            tape.backward(loss)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0, dtype=np.float32))

    def test_backward_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x.sum()).backward()

    def test_shared_node_fanout(self):
        # y is consumed twice; grads must not alias each other
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            y = x * 3.0
            loss = (y + y).sum()
            tape.backward(loss)
        assert x.grad[0] == pytest.approx(6.0)

    def test_no_grad_disables_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                y = x * 2.0
            assert len(tape) == 0
            assert not y.requires_grad

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(ContractError):
                Tape().__enter__()


class TestShapes:
    def test_slice_concat_roundtrip_backward(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
        with Tape() as tape:
            left = tt.slice_axis(x, 1, 0, 2)
            right = tt.slice_axis(x, 1, 2, 4)
            out = tt.concat([left * 2.0, right], axis=1).sum()
            tape.backward(out)
        expected = np.array([[2, 2, 1, 1]] * 3, dtype=np.float32)
        np.testing.assert_array_equal(x.grad, expected)

    def test_transpose_backward(self):
        x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        with Tape() as tape:
            out = (x.transpose(2, 0, 1) * 3.0).sum()
            tape.backward(out)
        np.testing.assert_array_equal(x.grad, np.full((2, 3, 4), 3.0, dtype=np.float32))

    def test_embedding_scatter(self):
        table = Tensor(np.eye(4, 3), requires_grad=True)
        ids = np.array([[0, 2, 0]])
        with Tape() as tape:
            out = tt.embedding(table, ids).sum()
            tape.backward(out)
        expected = np.zeros((4, 3), dtype=np.float32)
        expected[0] = 2.0
        expected[2] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_take_last_axis(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        idx = np.array([2, 0])
        with Tape() as tape:
            picked = tt.take_last_axis(x, idx)
            tape.backward(picked.sum())
        assert picked.data.tolist() == [2.0, 3.0]
        expected = np.array([[0, 0, 1], [1, 0, 0]], dtype=np.float32)
        np.testing.assert_array_equal(x.grad, expected)


class TestFusedKernels:
    """The fused hot-path kernels must match their composed equivalents,
    gradients included; that is a stronger check than finite differences."""

    def setup_method(self):
        rng = np.random.default_rng(1)
        self.q = rng.uniform(0.2, 0.8, (1, 2, 3, 4)).astype(np.float32)
        self.k = rng.uniform(0.2, 0.8, (1, 2, 3, 4)).astype(np.float32)
        self.v = rng.uniform(0.5, 1.5, (1, 2, 3, 4)).astype(np.float32)
        self.mask = np.triu(np.full((3, 3), -1e9, np.float32), k=1)
        self.wts = rng.uniform(1.0, 2.0, (1, 2, 3, 4)).astype(np.float32)

    def _attention_grads(self, fused: bool):
        q = Tensor(self.q, requires_grad=True)
        k = Tensor(self.k, requires_grad=True)
        v = Tensor(self.v, requires_grad=True)
        with Tape() as tape:
            if fused:
                ctx = tt.attention_core(q, k, v, self.mask)
            else:
                scores = tt.matmul(q, tt.transpose(k, (0, 1, 3, 2)))
                probs = tt.softmax_rows(scores, additive_mask=self.mask)
                ctx = tt.matmul(probs, v)
            tape.backward((ctx * Tensor(self.wts)).sum())
        return ctx.data, q.grad, k.grad, v.grad

    def test_attention_core_matches_composed(self):
        f_out, fq, fk, fv = self._attention_grads(fused=True)
        c_out, cq, ck, cv = self._attention_grads(fused=False)
        np.testing.assert_allclose(f_out, c_out, atol=1e-6)
        np.testing.assert_allclose(fq, cq, atol=1e-6)
        np.testing.assert_allclose(fk, ck, atol=1e-6)
        np.testing.assert_allclose(fv, cv, atol=1e-6)

    def test_attention_rows_are_causal(self):
        out, *_ = self._attention_grads(fused=True)
        # first position can only see itself: output equals v at position 0
        np.testing.assert_allclose(out[:, :, 0], self.v[:, :, 0], atol=1e-6)

    def test_rope_rotate_matches_closed_form(self):
        cos = np.cos(np.linspace(0.2, 1.0, 8)).reshape(1, 1, 4, 2).astype(np.float32)
        sin = np.sin(np.linspace(0.2, 1.0, 8)).reshape(1, 1, 4, 2).astype(np.float32)
        x0 = (np.arange(1, 17, dtype=np.float32).reshape(1, 1, 4, 4)) / 32.0
        w = ((np.arange(16).reshape(1, 1, 4, 4) % 3) * 0.5 + 1.0).astype(np.float32)
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            out = tt.rope_rotate(x, cos, sin)
            tape.backward((out * Tensor(w)).sum())
        c64, s64 = cos.astype(np.float64), sin.astype(np.float64)
        x64 = x0.astype(np.float64)
        x1, x2 = x64[..., :2], x64[..., 2:]
        expected_out = np.concatenate([x1 * c64 - x2 * s64, x1 * s64 + x2 * c64], axis=-1)
        np.testing.assert_allclose(out.data, expected_out, atol=1e-6)
        g1, g2 = w.astype(np.float64)[..., :2], w.astype(np.float64)[..., 2:]
        expected_grad = np.concatenate([g1 * c64 + g2 * s64, g2 * c64 - g1 * s64], axis=-1)
        np.testing.assert_allclose(x.grad, expected_grad, atol=1e-6)

    def test_rope_norm_preserving(self):
        # a rotation cannot change the norm of a (pair-partitioned) vector
        rng = np.random.default_rng(5)
        cos_a = np.cos(rng.uniform(0, 2, (1, 1, 6, 4))).astype(np.float32)
        sin_a = np.sin(np.arccos(cos_a))
        x = rng.standard_normal((2, 3, 6, 8)).astype(np.float32)
        out = tt.rope_rotate(Tensor(x), cos_a, sin_a).data
        np.testing.assert_allclose(
            np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-5
        )

    def test_rms_normalize_matches_composed(self):
        rng = np.random.default_rng(7)
        h0 = rng.standard_normal((3, 8)).astype(np.float32)
        g0 = rng.uniform(0.5, 1.5, 8).astype(np.float32)
        w0 = rng.uniform(1.0, 2.0, (3, 8)).astype(np.float32)

        def grads(fused):
            h = Tensor(h0, requires_grad=True)
            gamma = Tensor(g0, requires_grad=True)
            with Tape() as tape:
                if fused:
                    out = tt.rms_normalize(h, gamma, 1e-6)
                else:
                    ms = (h * h).mean(axis=-1, keepdims=True) + np.float32(1e-6)
                    out = (h / tt.sqrt(ms)) * gamma
                tape.backward((out * Tensor(w0)).sum())
            return out.data, h.grad, gamma.grad

        f_out, fh, fg = grads(True)
        c_out, ch, cg = grads(False)
        np.testing.assert_allclose(f_out, c_out, atol=1e-6)
        np.testing.assert_allclose(fh, ch, atol=1e-6)
        np.testing.assert_allclose(fg, cg, atol=1e-5)

    def test_rms_normalize_fd(self):
        h0 = np.array([[1.2, -0.6, 0.8, -1.1], [0.7, 1.3, -0.9, 0.5]], dtype=np.float32)
        g0 = np.array([0.8, 1.2, 0.9, 1.1], dtype=np.float32)
        w0 = np.array([[2.0, 2.5, 3.0, 2.2], [2.8, 2.1, 2.4, 2.6]], dtype=np.float32)
        err = grad_check(
            lambda h: (tt.rms_normalize(h, Tensor(g0), 1e-6) * Tensor(w0)).sum(), Tensor(h0)
        )
        assert err <= 1e-3


class TestGradCheck:
    def test_sum_exact(self):
        # dyadic values and a dyadic step keep every float32 sum exact, so
        # the central difference reproduces the gradient to the bit
        x = Tensor((np.arange(8) - 4).astype(np.float32) / 8.0)
        assert grad_check(lambda t: t.sum(), x, step=2.0**-10) <= 1e-6

    def test_half_norm_squared(self):
        # random coarse-dyadic values: squares and sums stay exact in float32
        rng = np.random.default_rng(23)
        x = Tensor(rng.integers(16, 40, size=8).astype(np.float32) / 32.0)
        assert grad_check(lambda t: (t * t).sum() * 0.5, x, step=2.0**-10) <= 1e-4

    def test_cross_entropy_of_random_logits(self):
        from tapernorm.objective import cross_entropy

        rng = np.random.default_rng(29)
        z0 = rng.uniform(0.2, 1.0, size=(1, 3)).astype(np.float32)
        targets = rng.integers(0, 3, size=1)
        err = grad_check(lambda z: cross_entropy(z, targets), Tensor(z0))
        assert err <= 1e-3

    def test_step_must_be_positive(self):
        with pytest.raises(ContractError):
            grad_check(lambda t: t.sum(), Tensor(np.ones(2)), step=0.0)


class TestDeterminismAndFinite:
    def test_forward_determinism(self):
        rng = np.random.default_rng(31)
        a = Tensor(rng.standard_normal((16, 16)).astype(np.float32))
        b = Tensor(rng.standard_normal((16, 16)).astype(np.float32))
        first = (tt.softmax_rows(a @ b) * a).sum().item()
        second = (tt.softmax_rows(a @ b) * a).sum().item()
        assert first == second

    def test_overflow_surfaces(self):
        with pytest.raises(NumericError):
            tt.exp(Tensor([1000.0]))

    def test_all_values_finite_after_ops(self):
        x = Tensor(np.full(4, 3e38, dtype=np.float32))
        with pytest.raises(NumericError):
            x * 10.0
