import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check_gradients
from gridcl import numcore as nc
from gridcl.numcore import GradTape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = nc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[3], [4]])

    def test_scalar(self):
        assert nc.matmul(Tensor([[2]]), Tensor([[3]])).data[0, 0] == 6

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        out = nc.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(out - naive_matmul(a, b))) <= 1e-6

    def test_shape_error_names_both(self):
        with pytest.raises(nc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_backward_formula(self, f64):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        tape = GradTape()
        with tape:
            out = a @ b
            loss = (out * Tensor(np.arange(6.0).reshape(3, 2))).sum()
        nc.backward(loss, tape)
        g = np.arange(6.0).reshape(3, 2)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(nc.softmax_t(Tensor([0.0, 0.0]), 1.0).data, [0.5, 0.5])

    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.3, 1e4])
    @pytest.mark.parametrize("T", [0.1, 1.0, 7.0])
    def test_shift_invariance(self, c, T):
        np.testing.assert_allclose(nc.softmax_t(Tensor([c, c, c]), T).data, [1 / 3] * 3, atol=1e-7)

    def test_against_float64_formula(self):
        z = np.array([1.0, 2.0, 3.0])
        e = np.exp(z / 2.0)
        expected = e / e.sum()
        assert np.max(np.abs(nc.softmax_t(Tensor(z), 2.0).data - expected)) <= 1e-6

    @pytest.mark.parametrize("T", [0.0, -1.0])
    def test_rejects_bad_temperature(self, T):
        with pytest.raises(nc.ParameterError):
            nc.softmax_t(Tensor([1.0, 2.0]), T)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e4, 1e4)),
        st.floats(0.05, 50.0),
    )
    def test_probability_vector(self, z, T):
        p = nc.softmax_t(Tensor(z.astype(np.float32)), T).data.astype(np.float64)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-6

    def test_log_softmax_matches_log_of_softmax(self, f64):
        z = Tensor(np.array([[0.3, -1.2, 2.0], [5.0, 5.0, -5.0]]))
        np.testing.assert_allclose(nc.log_softmax_t(z, 1.7).data, np.log(nc.softmax_t(z, 1.7).data), atol=1e-12)


class TestKl:
    def test_identical(self):
        assert nc.kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_point_mass_vs_uniform(self):
        assert nc.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(nc.DimensionError):
            nc.kl_divergence([1.0], [0.5, 0.5])

    def test_zero_q_is_clamped(self):
        assert np.isfinite(nc.kl_divergence([0.5, 0.5], [1.0, 0.0]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 8).flatmap(lambda n: st.tuples(
        arrays(np.float64, n, elements=st.floats(0, 1)), arrays(np.float64, n, elements=st.floats(1e-6, 1))
    )))
    def test_gibbs(self, pq):
        p, q = pq
        if p.sum() == 0:
            p = np.ones_like(p)
        p, q = p / p.sum(), q / q.sum()
        assert nc.kl_divergence(p, q) >= -1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
        tape = GradTape()
        with tape:
            loss = x.sum()
        nc.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_squared_norm(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tape = GradTape()
        with tape:
            loss = nc.sq_norm(x)
        nc.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_rejects_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tape = GradTape()
        with tape:
            y = x * 2.0
        with pytest.raises(nc.UsageError):
            nc.backward(y, tape)

    def test_accumulation_order_independent(self, f64):
        rng = np.random.default_rng(5)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        x = rng.standard_normal((2, 4))

        def l1():
            return nc.sum_all(nc.tanh(Tensor(x) @ w))

        def l2():
            return nc.sq_norm(w)

        tape = GradTape()
        with tape:
            both = l1() + l2()
        nc.backward(both, tape)
        joint = w.grad.copy()
        w.grad = None
        for fn in (l1, l2):
            tape = GradTape()
            with tape:
                loss = fn()
            nc.backward(loss, tape)
        assert np.max(np.abs(joint - w.grad)) <= 1e-6

    def test_reused_input(self, f64):
        x = Tensor([3.0], requires_grad=True)
        tape = GradTape()
        with tape:
            loss = (x * x * x).sum()
        nc.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [27.0])

    def test_non_finite_forward_raises(self):
        with pytest.raises(FloatingPointError):
            nc.exp(Tensor([1e5], dtype=np.float32))

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        tape = GradTape()
        with tape:
            with nc.no_grad():
                nc.exp(x)
        assert len(tape) == 0


class TestGradientChecks:
    """Every differentiable op against central differences (float64)."""

    rng = np.random.default_rng(11)

    def _t(self, *shape, positive=False):
        v = self.rng.standard_normal(shape)
        if positive:
            v = np.abs(v) + 0.5
        return Tensor(v, requires_grad=True)

    def test_elementwise_chain(self, f64):
        a, b = self._t(3, 4), self._t(3, 4)
        check_gradients(lambda: nc.sum_all(nc.sigmoid(a) * nc.tanh(b) - nc.exp(nc.scale(a, 0.3)) + nc.square(b)), [a, b])

    def test_matmul_and_broadcast_add(self, f64):
        a, b, c = self._t(2, 3), self._t(3, 4), self._t(4)
        check_gradients(lambda: nc.sum_all(nc.tanh(a @ b + c)), [a, b, c])

    def test_softmax_family(self, f64):
        z = self._t(3, 5)
        w = Tensor(self.rng.standard_normal((3, 5)))
        check_gradients(lambda: nc.sum_all(nc.softmax_t(z, 1.7) * w), [z])
        check_gradients(lambda: nc.sum_all(nc.log_softmax_t(z, 0.6) * w), [z])

    def test_indexing_concat_rows(self, f64):
        a, b = self._t(4, 3), self._t(4, 2)

        def f():
            c = nc.concat([a, b], axis=1)
            picked = c[np.array([0, 2, 2]), np.array([1, 4, 0])]
            return nc.sum_all(nc.square(picked)) + nc.mean_all(nc.sum_rows(c[:, :3]))

        check_gradients(f, [a, b])

    def test_row_norm(self, f64):
        a = self._t(5, 3)
        check_gradients(lambda: nc.sum_all(nc.exp(-nc.row_norm(a))), [a])

    def test_dropout_mask_is_fixed_linear_map(self, f64):
        a = self._t(3, 6)
        seed = 4

        def f():
            return nc.sum_all(nc.square(nc.dropout(a, 0.3, np.random.default_rng(seed))))

        check_gradients(f, [a])

    def test_gru_op(self, f64):
        x = self._t(2, 3, 4)
        w, u, b = self._t(4, 6), self._t(2, 6), self._t(6)
        for reverse in (False, True):
            check_gradients(lambda: nc.sum_all(nc.tanh(nc.gru_last_state(x, w, u, b, reverse=reverse))), [x, w, u, b])


def gru_by_primitives(x, w, u, b, reverse=False):
    """Same recurrence composed from generic ops (independent of the fused kernel)."""
    B, W, F = x.shape
    H = u.shape[0]
    h = Tensor(np.zeros((B, H)))
    steps = range(W - 1, -1, -1) if reverse else range(W)
    for t in steps:
        xt = x[:, t, :]
        gx = xt @ w + b
        gh = h @ u
        z = nc.sigmoid(gx[:, :H] + gh[:, :H])
        r = nc.sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
        n = nc.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
        h = n + z * (h - n)
    return h


class TestGru:
    def test_hand_evaluated_two_unit_cell(self, f64):
        x = np.array([[[0.5, -1.0]]])  # B=1, W=1, F=2
        w = np.array([[0.1, -0.2, 0.3, 0.0, 0.5, -0.4], [0.2, 0.1, -0.1, 0.3, 0.2, 0.6]])
        u = np.arange(12.0).reshape(2, 6) / 10
        b = np.array([0.0, 0.1, -0.1, 0.2, 0.05, -0.05])
        # h0 = 0, so U h = 0 and the cell reduces to x-driven gates
        sig = lambda v: 1 / (1 + math.exp(-v))
        expected = []
        for j in range(2):
            gx = [sum(x[0, 0, k] * w[k, c] for k in range(2)) + b[c] for c in range(6)]
            upd = sig(gx[j])
            cand = math.tanh(gx[4 + j] + sig(gx[2 + j]) * 0.0)
            expected.append((1 - upd) * cand + upd * 0.0)
        out = nc.gru_last_state(Tensor(x), Tensor(w), Tensor(u), Tensor(b))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_two_steps_hand_evaluated(self, f64):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 3))
        w, u, b = rng.standard_normal((3, 6)), rng.standard_normal((2, 6)), rng.standard_normal(6)
        sig = lambda v: 1 / (1 + np.exp(-v))
        h = np.zeros(2)
        for t in range(2):
            gx = x[0, t] @ w + b
            gh = h @ u
            upd = sig(gx[:2] + gh[:2])
            rst = sig(gx[2:4] + gh[2:4])
            cand = np.tanh(gx[4:] + rst * gh[4:])
            h = (1 - upd) * cand + upd * h
        out = nc.gru_last_state(Tensor(x), Tensor(w), Tensor(u), Tensor(b))
        np.testing.assert_allclose(out.data[0], h, atol=1e-12)

    @pytest.mark.parametrize("reverse", [False, True])
    def test_fused_matches_primitive_composition(self, f64, reverse):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True)
        params = [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True) for s in ((4, 9), (3, 9), (9,))]
        grads = []
        for fn in (nc.gru_last_state, gru_by_primitives):
            for p in [x, *params]:
                p.grad = None
            tape = GradTape()
            with tape:
                h = fn(x, *params, reverse=reverse)
                loss = nc.sum_all(nc.square(h))
            nc.backward(loss, tape)
            grads.append([h.data.copy()] + [p.grad.copy() for p in [x, *params]])
        for a, b in zip(*grads):
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_shape_checks(self):
        with pytest.raises(nc.DimensionError):
            nc.gru_last_state(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((4, 6))), Tensor(np.zeros((2, 6))), Tensor(np.zeros(6)))

    def test_bidirectional_matches_two_single_passes(self, f64):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True)
        fwd = [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True) for s in ((4, 9), (3, 9), (9,))]
        bwd = [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True) for s in ((4, 9), (3, 9), (9,))]
        weights = rng.standard_normal((3, 6))

        def separate():
            h = nc.concat([nc.gru_last_state(x, *fwd), nc.gru_last_state(x, *bwd, reverse=True)], axis=1)
            return h

        def fused():
            return nc.bigru_last_states(x, tuple(fwd), tuple(bwd))

        outs = []
        for fn in (separate, fused):
            for p in [x, *fwd, *bwd]:
                p.grad = None
            tape = GradTape()
            with tape:
                h = fn()
                loss = nc.sum_all(nc.square(h) * Tensor(weights))
            nc.backward(loss, tape)
            outs.append([h.data.copy()] + [p.grad.copy() for p in [x, *fwd, *bwd]])
        for a, b in zip(*outs):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_bidirectional_gradcheck(self, f64):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
        ps = [Tensor(rng.standard_normal(s) * 0.5, requires_grad=True) for s in ((2, 6), (2, 6), (6,)) * 2]
        check_gradients(lambda: nc.sum_all(nc.tanh(nc.bigru_last_states(x, tuple(ps[:3]), tuple(ps[3:])))), [x, *ps])
