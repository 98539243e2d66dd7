"""Gradient and tape-behavior tests: every differentiable op against central
finite differences in f64, plus accumulation/zero-grad semantics."""

import numpy as np
import pytest

import oracles
from sepseg import nn
from sepseg import tensor as T
from sepseg.rng import SplitMix64
from sepseg.tensor import ShapeError, Tape, Tensor

RTOL = 1e-5
STEP = 1e-5


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def fd_check(inputs, forward, rtol=RTOL):
    """Analytic grads of forward(*inputs).sum-style scalar vs central differences."""
    with Tape():
        loss = forward()
        loss.backward()
    analytic = [t.grad.copy() for t in inputs]
    for t, a in zip(inputs, analytic):
        num = oracles.central_diff_grad(lambda: forward().item(), t.data, STEP)
        err = oracles.max_rel_err(a, num)
        assert err <= rtol, f"rel err {err:.3e}"


def scalarize(out, seed=0):
    """Fixed random projection to a scalar so FD sees every output element."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return (out * w).sum()


class TestClosedFormGradients:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(0)
        x = leaf(rng, 3, 4)
        with Tape():
            ((x * x).sum()).backward()
        assert np.allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_softmax_cross_entropy_composite(self):
        rng = np.random.default_rng(1)
        x = leaf(rng, 5)
        y = np.zeros(5)
        y[2] = 1.0
        with Tape():
            lp = T.log_softmax(x, axis=0)
            loss = -(lp * Tensor(y, dtype=np.float64)).sum()
            loss.backward()
        p = np.exp(lp.data)
        assert np.allclose(x.grad, p - y, atol=1e-10)

    def test_fanout_accumulates(self):
        rng = np.random.default_rng(2)
        x = leaf(rng, 4)
        with Tape():
            ((x + x).sum()).backward()
        assert np.allclose(x.grad, 2.0, atol=0)

    def test_off_path_leaf_gets_zero_grad(self):
        rng = np.random.default_rng(3)
        a, b = leaf(rng, 3), leaf(rng, 3)
        with Tape():
            _touched = a * 2.0
            ((b * b).sum()).backward()
        assert np.array_equal(a.grad, np.zeros(3))
        assert a.grad is not None

    def test_detached_branch_contributes_nothing(self):
        rng = np.random.default_rng(4)
        x = leaf(rng, 3)
        with Tape():
            (x.detach() * 2.0).sum().backward()
        assert x.grad is None

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True, dtype=np.float64)
        with Tape():
            y = x * 1.0
            with pytest.raises(ShapeError, match="backward"):
                y.backward()

    def test_backward_without_tape_rejected(self):
        x = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        loss = (x * x).sum()
        with pytest.raises(RuntimeError, match="Tape"):
            loss.backward()

    def test_tape_cleared_between_steps(self):
        rng = np.random.default_rng(5)
        x = leaf(rng, 4)
        with Tape():
            ((x * x).sum()).backward()
            g1 = x.grad.copy()
            x.grad = None
            ((x * x).sum()).backward()
        assert np.array_equal(x.grad, g1)


class TestElementwiseGradients:
    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
    def test_binary_broadcasting(self, name):
        rng = np.random.default_rng(hash(name) % 1000)
        a = leaf(rng, 3, 4)
        b = Tensor(rng.standard_normal((1, 4)) + 2.0, requires_grad=True, dtype=np.float64)
        op = getattr(T, name)
        fd_check([a, b], lambda: scalarize(op(a, b)))

    def test_unary_chain(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.random((3, 3)) + 0.5, requires_grad=True, dtype=np.float64)
        fd_check([x], lambda: scalarize(T.tlog(T.texp(T.tsqrt(x)))))

    @pytest.mark.parametrize("fn", [T.gelu, T.sigmoid, T.ttanh, T.softplus])
    def test_activations(self, fn):
        rng = np.random.default_rng(7)
        x = leaf(rng, 4, 5)
        fd_check([x], lambda: scalarize(fn(x)))

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((4, 4)) + np.sign(rng.standard_normal((4, 4))) * 0.5,
                   requires_grad=True, dtype=np.float64)
        x.data[np.abs(x.data) < 0.1] = 0.5
        fd_check([x], lambda: scalarize(T.relu(x)))

    def test_power(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.random((3, 3)) + 0.5, requires_grad=True, dtype=np.float64)
        fd_check([x], lambda: scalarize(T.power(x, -0.5)))


class TestReductionAndShapeGradients:
    def test_mean_axes(self):
        rng = np.random.default_rng(10)
        x = leaf(rng, 2, 3, 4)
        fd_check([x], lambda: scalarize(T.tmean(x, axis=(0, 2), keepdims=True)))

    def test_sum_all(self):
        rng = np.random.default_rng(11)
        x = leaf(rng, 2, 5)
        fd_check([x], lambda: x.sum())

    def test_reshape_transpose(self):
        rng = np.random.default_rng(12)
        x = leaf(rng, 2, 3, 4)
        fd_check([x], lambda: scalarize(x.reshape((3, 8)).transpose((1, 0))))

    def test_concat(self):
        rng = np.random.default_rng(13)
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
        fd_check([a, b], lambda: scalarize(T.concat([a, b], axis=1)))

    def test_broadcast_to(self):
        rng = np.random.default_rng(14)
        x = leaf(rng, 1, 3)
        fd_check([x], lambda: scalarize(T.broadcast_to(x, (4, 3))))

    def test_pixel_shuffle_roundtrip(self):
        rng = np.random.default_rng(15)
        x = leaf(rng, 1, 8, 2, 3)
        fd_check([x], lambda: scalarize(T.pixel_shuffle(x, 2)))


class TestLinearAlgebraGradients:
    def test_matmul_2d(self):
        rng = np.random.default_rng(16)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        fd_check([a, b], lambda: scalarize(T.matmul(a, b)))

    def test_matmul_batched(self):
        rng = np.random.default_rng(17)
        a, b = leaf(rng, 2, 2, 3), leaf(rng, 2, 3, 2)
        fd_check([a, b], lambda: scalarize(T.matmul(a, b)))


class TestNormalizationGradients:
    def test_softmax(self):
        rng = np.random.default_rng(18)
        x = leaf(rng, 3, 5)
        fd_check([x], lambda: scalarize(T.softmax(x, axis=1)))

    def test_log_softmax(self):
        rng = np.random.default_rng(19)
        x = leaf(rng, 4, 3)
        fd_check([x], lambda: scalarize(T.log_softmax(x, axis=0)))

    def test_layer_norm(self):
        rng = np.random.default_rng(20)
        x = leaf(rng, 2, 3, 6)
        gamma = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        beta = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        fd_check([x, gamma, beta], lambda: scalarize(T.layer_norm(x, gamma, beta, 1e-5)))

    def test_l2_normalize(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.standard_normal((3, 4)) + 0.3, requires_grad=True, dtype=np.float64)
        fd_check([x], lambda: scalarize(T.l2_normalize(x, axis=-1)))

    def test_batchnorm_training_mode(self):
        rng = np.random.default_rng(22)
        bn = nn.BatchNorm2d(3).to_dtype(np.float64)
        x = leaf(rng, 2, 3, 2, 2)
        params = [bn.gamma, bn.beta, x]
        fd_check(params, lambda: scalarize(bn(x)))


class TestSpatialGradients:
    @pytest.mark.parametrize("cfg", [
        (1, 2, 3, 5, 5, 3, 1, 1, 1),
        (1, 4, 4, 4, 4, 2, 2, 0, 4),
        (1, 4, 6, 5, 5, 3, 2, 1, 2),
        (1, 2, 3, 4, 4, 1, 1, 0, 1),
    ])
    def test_conv2d(self, cfg):
        B, Cin, Cout, H, W, k, s, p, g = cfg
        rng = np.random.default_rng(sum(cfg))
        x = leaf(rng, B, Cin, H, W)
        w = leaf(rng, Cout, Cin // g, k, k)
        b = leaf(rng, Cout)
        fd_check([x, w, b], lambda: scalarize(T.conv2d(x, w, b, stride=s, padding=p, groups=g)))

    @pytest.mark.parametrize("size", [(6, 7), (2, 3)])
    def test_bilinear_resize(self, size):
        rng = np.random.default_rng(23)
        x = leaf(rng, 1, 2, 4, 4)
        fd_check([x], lambda: scalarize(T.bilinear_resize(x, *size)))

    def test_saf_apply(self):
        rng = np.random.default_rng(24)
        x = leaf(rng, 1, 4, 3, 3)
        raw = leaf(rng, 1, 2, 4, 9, 3, 3)
        fd_check([x, raw], lambda: scalarize(T.saf_apply(x, T.softmax(raw, axis=3))))

    def test_global_avg_pool(self):
        rng = np.random.default_rng(25)
        x = leaf(rng, 2, 3, 3, 3)
        fd_check([x], lambda: scalarize(T.global_avg_pool(x)))


class TestLayerGradients:
    def test_linear(self):
        rng = np.random.default_rng(26)
        lin = nn.Linear(4, 3, SplitMix64(1)).to_dtype(np.float64)
        x = leaf(rng, 2, 5, 4)
        fd_check([lin.weight, lin.bias, x], lambda: scalarize(lin(x)))

    def test_zero_lr_equivalence_of_grads_across_dtype_cast(self):
        # casting to f64 must preserve parameter values exactly (f32 -> f64 is exact)
        lin = nn.Linear(3, 3, SplitMix64(2))
        before = lin.weight.data.copy()
        lin.to_dtype(np.float64)
        assert np.array_equal(lin.weight.data.astype(np.float32), before)
