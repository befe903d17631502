"""Engine-level contracts: op semantics, stability, and gradient correctness
against the central finite-difference oracle."""

import numpy as np
import pytest

from gramdiff import diffcore as dc
from gramdiff.diffcore import Tensor

from conftest import assert_grad_close


def weighted_scalar(op_output, weights):
    """Mix output entries with fixed weights so constant-sum outputs (softmax)
    still produce informative gradients."""
    return dc.sum_all(dc.matmul(op_output, Tensor(weights)))


class TestMatmul:
    def test_one_hot_row_selects_matrix_row(self):
        out = dc.matmul(Tensor([[1.0, 0.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0]])

    def test_identity(self):
        b = np.array([[1.5, -2.0], [0.25, 9.0]])
        out = dc.matmul(Tensor(np.eye(2)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(dc.DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            dc.matmul(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        w = rng.normal(size=(2, 1))

        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        loss = weighted_scalar(dc.matmul(a, b), w)
        dc.backward(loss)

        def f_a(x):
            return (x @ b0 @ w).sum()

        def f_b(x):
            return (a0 @ x @ w).sum()

        assert_grad_close(a.grad, f_a, a0)
        assert_grad_close(b.grad, f_b, b0)


class TestSoftmax:
    def test_symmetry(self):
        out = dc.softmax(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = dc.softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)

    def test_normalization_and_positivity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.normal(scale=5.0, size=(1, 6))
            s = dc.softmax(Tensor(x)).data
            assert abs(s.sum() - 1.0) <= 1e-9
            assert np.all(s > 0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(1, 6))
        w = rng.normal(size=(6, 1))
        x = Tensor(x0, requires_grad=True)
        dc.backward(weighted_scalar(dc.softmax(x), w))
        assert_grad_close(x.grad, lambda v: (dc.softmax_rows(v) @ w).sum(), x0)


class TestGumbelSoftmax:
    def test_zero_noise_reduces_to_softmax(self):
        out = dc.gumbel_softmax(Tensor([[0.0, 0.0]]), 1.0, noise=np.zeros(2))
        np.testing.assert_array_equal(out.data, [[0.5, 0.5]])

    def test_zero_noise_equals_tempered_softmax_bitwise(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 6))
        for tau in (1.0, 0.5, 3.0):
            g = dc.gumbel_softmax(Tensor(x), tau, noise=np.zeros(6)).data
            s = dc.softmax_rows(x / tau)
            np.testing.assert_array_equal(g, s)

    def test_output_normalized(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            out = dc.gumbel_softmax(Tensor(rng.normal(size=(1, 5))), 0.7, rng=rng)
            assert abs(out.data.sum() - 1.0) <= 1e-9
            assert np.all(out.data > 0)

    def test_non_positive_temperature_rejected(self):
        for tau in (0.0, -1.0):
            with pytest.raises(dc.ParameterError):
                dc.gumbel_softmax(Tensor([[0.0, 1.0]]), tau, noise=np.zeros(2))

    def test_argmax_frequency_matches_gumbel_max_sampling(self):
        # Gumbel-max: P(argmax = i) = softmax(logits)_i, independent of tau
        logits = Tensor([[np.log(0.5), np.log(0.5)]])
        rng = np.random.default_rng(123)
        wins = np.zeros(2)
        for _ in range(10_000):
            out = dc.gumbel_softmax(logits, 0.5, rng=rng)
            wins[np.argmax(out.data)] += 1
        freq = wins / wins.sum()
        assert abs(freq[0] - 0.5) <= 0.02
        assert abs(freq[1] - 0.5) <= 0.02

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        x0 = rng.normal(size=(1, 5))
        noise = dc.gumbel_noise(rng, (1, 5))
        w = rng.normal(size=(5, 1))
        tau = 0.8
        x = Tensor(x0, requires_grad=True)
        dc.backward(weighted_scalar(dc.gumbel_softmax(x, tau, noise=noise), w))
        assert_grad_close(x.grad, lambda v: (dc.softmax_rows((v + noise) / tau) @ w).sum(), x0)


class TestBce:
    def test_perfect_prediction_is_clipped_epsilon_loss(self):
        loss = dc.bce(Tensor([[1.0, 0.0]]), [1.0, 0.0])
        np.testing.assert_allclose(loss.item(), -2.0 * np.log(1.0 - dc.EPS), rtol=1e-12)
        assert loss.item() == pytest.approx(2e-7, rel=1e-3)

    def test_half_prediction_is_log2(self):
        loss = dc.bce(Tensor([[0.5]]), [1.0])
        assert loss.item() == pytest.approx(np.log(2.0), rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(dc.DimensionError):
            dc.bce(Tensor([[0.5, 0.5]]), [1.0, 0.0, 0.0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        p0 = rng.uniform(0.05, 0.95, size=(1, 8))
        z = rng.integers(0, 2, size=8).astype(float)
        p = Tensor(p0, requires_grad=True)
        dc.backward(dc.bce(p, z))
        assert_grad_close(p.grad, lambda v: dc.bce_rows(v, z).sum(), p0)

    def test_soft_targets(self):
        z = np.array([0.25, 0.75])
        p = np.array([[0.4, 0.6]])
        expected = -(z * np.log(p) + (1 - z) * np.log(1 - p)).sum()
        assert dc.bce(Tensor(p), z).item() == pytest.approx(expected, rel=1e-12)


class TestSigmoid:
    def test_values_and_stability(self):
        out = dc.sigmoid(Tensor([[0.0, 50.0, -50.0, 800.0, -800.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] == 0.5
        assert out.data[0, 1] > 0.999999
        assert out.data[0, 2] < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(29)
        x0 = rng.normal(scale=2.0, size=(2, 4))
        w = rng.normal(size=(4, 1))
        x = Tensor(x0, requires_grad=True)
        dc.backward(weighted_scalar(dc.sigmoid(x), w))
        assert_grad_close(x.grad, lambda v: (dc.sigmoid_values(v) @ w).sum(), x0)


class TestStructuralOps:
    def test_repeat_rows_layout_and_gradient(self):
        x0 = np.array([[1.0, 2.0], [3.0, 4.0]])
        x = Tensor(x0, requires_grad=True)
        out = dc.repeat_rows(x, 3)
        np.testing.assert_array_equal(out.data[0:3], np.tile(x0[0], (3, 1)))
        dc.backward(weighted_scalar(out, np.ones((2, 1))))
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))

    def test_gather_rows_gradient_accumulates_duplicates(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = dc.gather_rows(x, [1, 1, 2])
        dc.backward(weighted_scalar(out, np.ones((2, 1))))
        np.testing.assert_array_equal(x.grad, [[0, 0], [2, 2], [1, 1]])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        dc.backward(dc.sum_all(x))
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0, 1.0]])

    def test_composed_bce_softmax_gradient(self):
        rng = np.random.default_rng(31)
        x0 = rng.normal(size=(1, 5))
        z = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
        x = Tensor(x0, requires_grad=True)
        dc.backward(dc.bce(dc.softmax(x), z))
        assert_grad_close(x.grad, lambda v: dc.bce_rows(dc.softmax_rows(v), z).sum(),
                          x0, rtol=1e-4)

    def test_disconnected_parameter_has_zero_gradient(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        unused = Tensor([[5.0]], requires_grad=True)
        dc.backward(dc.sum_all(x))
        np.testing.assert_array_equal(dc.grad_or_zeros(unused), [[0.0]])
        assert unused.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(dc.DimensionError):
            dc.backward(dc.sigmoid(x))

    def test_double_backward_rejected(self):
        x = Tensor([[1.0]], requires_grad=True)
        loss = dc.sum_all(x)
        dc.backward(loss)
        with pytest.raises(dc.GraphError):
            dc.backward(loss)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([[2.0]], requires_grad=True)
        loss = dc.add(dc.sum_all(x), dc.sum_all(x))
        dc.backward(loss)
        np.testing.assert_array_equal(x.grad, [[2.0]])

    def test_gradient_map_covers_reachable_nodes(self):
        x = Tensor([[0.3, -0.1]], requires_grad=True)
        mid = dc.sigmoid(x)
        loss = dc.sum_all(mid)
        grads = dc.backward(loss)
        assert x in grads and mid in grads and loss in grads
        assert grads[x].shape == x.shape and grads[mid].shape == mid.shape


class TestDeterminism:
    def test_same_seed_same_forward_and_grad(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(np.linspace(-1, 1, 6).reshape(1, 6), requires_grad=True)
            out = dc.gumbel_softmax(x, 0.5, rng=rng)
            loss = dc.bce(out, np.array([1, 0, 0, 0, 0, 0.0]))
            dc.backward(loss)
            return out.data.copy(), loss.item(), x.grad.copy()

        o1, l1, g1 = run()
        o2, l2, g2 = run()
        np.testing.assert_array_equal(o1, o2)
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestFiniteDifferenceSweep:
    """Every differentiable op at 10 random points, rel error < 1e-4."""

    @pytest.mark.parametrize("point", range(10))
    def test_all_ops(self, point):
        rng = np.random.default_rng(1000 + point)
        w6, w3 = rng.normal(size=(6, 1)), rng.normal(size=(3, 1))

        x0 = rng.normal(size=(1, 6))
        x = Tensor(x0, requires_grad=True)
        dc.backward(weighted_scalar(dc.softmax(x), w6))
        assert_grad_close(x.grad, lambda v: (dc.softmax_rows(v) @ w6).sum(), x0, rtol=1e-4)

        a0, b0 = rng.normal(size=(2, 3)), rng.normal(size=(3, 6))
        a = Tensor(a0, requires_grad=True)
        dc.backward(dc.sum_all(dc.matmul(dc.matmul(a, Tensor(b0)), w6)))
        assert_grad_close(a.grad, lambda v: (v @ b0 @ w6).sum(), a0, rtol=1e-4)

        noise = dc.gumbel_noise(rng, (1, 6))
        x1 = rng.normal(size=(1, 6))
        xt = Tensor(x1, requires_grad=True)
        dc.backward(weighted_scalar(dc.gumbel_softmax(xt, 0.6, noise=noise), w6))
        assert_grad_close(xt.grad, lambda v: (dc.softmax_rows((v + noise) / 0.6) @ w6).sum(),
                          x1, rtol=1e-4)

        p0 = rng.uniform(0.05, 0.95, size=(1, 3))
        z = rng.integers(0, 2, size=3).astype(float)
        pt = Tensor(p0, requires_grad=True)
        dc.backward(dc.bce(pt, z))
        assert_grad_close(pt.grad, lambda v: dc.bce_rows(v, z).sum(), p0, rtol=1e-4)

        s0 = rng.normal(size=(1, 3))
        st = Tensor(s0, requires_grad=True)
        dc.backward(weighted_scalar(dc.sigmoid(st), w3))
        assert_grad_close(st.grad, lambda v: (dc.sigmoid_values(v) @ w3).sum(), s0, rtol=1e-4)
