"""Tensor engine: forward oracles, backward oracles, gradient checks."""

import numpy as np
import pytest

from soi.errors import DomainError, NumericFault, ShapeError, ZeroNormError
from soi.tensor import (
    Tensor,
    conv2d,
    cosine_similarity,
    grad_check,
    l2_normalize,
    matmul,
    set_debug_numerics,
    topo_order,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestForwardOracles:
    def test_conv_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)).astype(np.float32))
        k = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        np.testing.assert_allclose(conv2d(x, k, 1, 0).data, x.data)

    def test_conv_zero_input(self):
        x = Tensor(np.zeros((2, 3, 5, 5), dtype=np.float32))
        k = Tensor(np.random.default_rng(1).normal(size=(4, 3, 3, 3)).astype(np.float32))
        assert np.all(conv2d(x, k, 1, 1).data == 0)

    def test_conv_hand_case(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        k = Tensor(np.ones((1, 1, 2, 2)))
        assert conv2d(x, k, 1, 0).data.reshape(()) == pytest.approx(10.0)

    def test_conv_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ShapeError):
            conv2d(x, Tensor(np.zeros((1, 3, 2, 2))), 1, 0)  # channel mismatch
        with pytest.raises(ShapeError):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), 2, 0)  # (4-3)/2 not integral

    def test_relu_signs(self):
        out = Tensor(np.array([-1.0, 0.0, 2.0])).relu()
        np.testing.assert_allclose(out.data, [0.0, 0.0, 2.0])

    def test_softmax_constant_vector(self):
        out = Tensor(np.full(5, 3.7)).softmax(axis=-1)
        np.testing.assert_allclose(out.data, np.full(5, 0.2), atol=1e-7)

    def test_matmul_identity(self):
        rng = np.random.default_rng(2)
        b = Tensor(rng.normal(size=(2, 7)))
        out = matmul(Tensor(np.eye(2)), b)
        np.testing.assert_allclose(out.data, b.data)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            Tensor(np.array([1.0, -1.0])).log()

    def test_l2_normalize(self):
        out = l2_normalize(Tensor(np.array([3.0, 4.0])))
        np.testing.assert_allclose(out.data, [0.6, 0.8])
        unit = np.array([0.0, 1.0])
        np.testing.assert_allclose(l2_normalize(Tensor(unit)).data, unit)
        with pytest.raises(ZeroNormError):
            l2_normalize(Tensor(np.zeros(3)))

    def test_cosine_similarity(self):
        a = np.array([1.0, 0.0])
        assert cosine_similarity(Tensor(a), Tensor(a)).item() == pytest.approx(1.0)
        assert cosine_similarity(Tensor(a), Tensor(np.array([0.0, 1.0]))).item() == pytest.approx(0.0)
        got = cosine_similarity(Tensor(a), Tensor(np.array([1.0, 1.0]))).item()
        assert got == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-12)
        with pytest.raises(ZeroNormError):
            cosine_similarity(Tensor(np.zeros(2)), Tensor(a))


class TestBackward:
    def test_sum_gradient_all_ones(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 4)), grad=True)
        x.sum().backward()
        np.testing.assert_allclose(x.grad, np.ones((3, 4)))

    def test_mean_of_squares_hand_oracle(self):
        # d/dx mean(x*x) = 2x/n; for x = (1, -2), n = 2 -> (1, -2)
        x = t64([1.0, -2.0], grad=True)
        (x * x).mean().backward()
        np.testing.assert_allclose(x.grad, [1.0, -2.0])

    def test_gradient_blocked_leaf_gets_none(self):
        x = t64([1.0, 2.0], grad=True)
        blocked = t64([3.0, 4.0], grad=False)
        ((x * blocked).sum()).backward()
        assert blocked.grad is None
        np.testing.assert_allclose(x.grad, [3.0, 4.0])

    def test_unreachable_leaf_stays_none(self):
        x = t64([1.0], grad=True)
        y = t64([2.0], grad=True)
        (x * 2.0).sum().backward()
        assert y.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            t64([1.0, 2.0], grad=True).backward()

    def test_backward_linearity(self):
        rng = np.random.default_rng(3)
        val = rng.normal(size=(4,))

        def g1(x):
            return (x * x).sum()

        def g2(x):
            return (x.exp() * 0.5).sum()

        a, b = 2.0, -3.0
        x1 = t64(val, grad=True)
        (g1(x1) * a + g2(x1) * b).backward()
        x2 = t64(val, grad=True)
        g1(x2).backward()
        ga = x2.grad.copy()
        x3 = t64(val, grad=True)
        g2(x3).backward()
        gb = x3.grad.copy()
        np.testing.assert_allclose(x1.grad, a * ga + b * gb, rtol=1e-12)

    def test_topo_order_inputs_precede(self):
        x = t64([1.0, 2.0], grad=True)
        y = (x * 3.0 + 1.0).exp().sum()
        order = topo_order(y)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]


class TestGradChecks:
    def test_linear_is_exact(self):
        x = t64(np.random.default_rng(0).normal(size=(5,)), grad=True)
        assert grad_check(lambda t: (t * 3.5).sum(), x) < 1e-10

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(20,))
        vals[np.abs(vals) < 1e-2] += 0.5  # keep a margin from the kink
        x = t64(vals, grad=True)
        assert grad_check(lambda t: t.relu().sum(), x) < 1e-6

    def test_conv_mean_composite(self):
        rng = np.random.default_rng(2)
        x = t64(rng.normal(size=(1, 2, 5, 5)), grad=True)
        w = t64(rng.normal(size=(3, 2, 3, 3)), grad=True)
        err = grad_check(lambda a, b: conv2d(a, b, 1, 1).mean(), x, w, eps=1e-5)
        assert err < 1e-4

    @pytest.mark.parametrize("op_name", ["mul", "div", "exp", "log", "pow", "softmax",
                                         "mean_axis", "matmul", "maxpool", "avgpool",
                                         "l2n", "reshape_T"])
    def test_primitive_gradients(self, op_name):
        rng = np.random.default_rng(hash(op_name) % 2**32)
        proj = t64(rng.normal(size=(3, 4)))
        const = t64(rng.normal(size=(3, 4)))
        pos = t64(rng.uniform(0.5, 2.0, size=(3, 4)), grad=True)
        x = t64(rng.normal(size=(3, 4)), grad=True)
        x.data[np.abs(x.data) < 1e-3] += 0.01
        ops = {
            "mul": lambda t: ((t * const) * t).sum(),
            "div": lambda t: (t / (const.detach() + 3.0)).sum(),
            "exp": lambda t: (t.exp() * proj).sum(),
            "log": lambda t: (t.log() * proj).sum(),
            "pow": lambda t: (t ** 3.0).sum(),
            "softmax": lambda t: (t.softmax(axis=1) * proj).sum(),
            "mean_axis": lambda t: (t.mean(axis=0) * proj.mean(axis=0)).sum(),
            "matmul": lambda t: (matmul(t, proj.T) * const.detach().mean()).sum(),
            "maxpool": lambda t: t.reshape(1, 1, 3, 4).max_pool2d(1, 1).sum(),
            "avgpool": lambda t: t.reshape(1, 1, 3, 4).avg_pool2d(1, 1).sum(),
            "l2n": lambda t: (l2_normalize(t, axis=1) * proj).sum(),
            "reshape_T": lambda t: (t.reshape(4, 3).T * const).sum(),
        }
        target = pos if op_name == "log" else x
        assert grad_check(ops[op_name], target) < 1e-4

    def test_grad_check_rejects_float32(self):
        x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(DomainError):
            grad_check(lambda t: t.sum(), x)


class TestInvariants:
    def test_softmax_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 9)).astype(np.float32)
        y = Tensor(x).softmax(axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
        y2 = Tensor(x + 7.3).softmax(axis=1).data
        np.testing.assert_allclose(y, y2, atol=1e-6)

    def test_l2_normalize_unit_norm(self):
        rng = np.random.default_rng(5)
        v = Tensor(rng.normal(size=(10, 7)).astype(np.float32))
        norms = np.linalg.norm(l2_normalize(v, axis=1).data, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_debug_numerics_catches_nan(self):
        set_debug_numerics(True)
        try:
            with pytest.raises(NumericFault), np.errstate(invalid="ignore", divide="ignore"):
                Tensor(np.array([1.0, 0.0])) / Tensor(np.array([1.0, 0.0]))
        finally:
            set_debug_numerics(False)

    def test_broadcasting_gradients(self):
        rng = np.random.default_rng(6)
        a = t64(rng.normal(size=(4, 3)), grad=True)
        bias = t64(rng.normal(size=(3,)), grad=True)
        ((a + bias) * (a * bias)).sum().backward()
        assert a.grad.shape == (4, 3)
        assert bias.grad.shape == (3,)
        err = grad_check(lambda t, b: ((t + b) * (t * b)).sum(), a, bias)
        assert err < 1e-4
