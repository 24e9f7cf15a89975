import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adept.nnet import (DenseNet, Layer, OptimState, clip_inf, load_net, net_forward,
                        net_reverse_grad, save_net, sigmoid)

from ._oracles import net_fd_error


def _loss_fn(net, X, Y):
    def f(theta):
        n = net.with_flat(theta)
        out, cache = net_forward(n, X)
        r = out - Y
        return float(np.sum(r * r)), net_reverse_grad(n, 2 * r, cache)
    return f


class TestForward:
    def test_matches_manual_arithmetic(self, rng):
        net = DenseNet.init([4, 6, 3], ["relu", "sigmoid"], rng)
        X = rng.standard_normal((5, 4))
        l1, l2 = net.layers
        h = np.maximum(X @ l1.W.T + l1.b, 0)
        expect = 1 / (1 + np.exp(-(h @ l2.W.T + l2.b)))
        np.testing.assert_allclose(net(X), expect, atol=1e-12)

    def test_sigmoid_stable(self):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_width_mismatch(self, rng):
        net = DenseNet.init([3, 2], ["identity"], rng)
        with pytest.raises(ValueError):
            net(np.zeros((1, 4)))
        with pytest.raises(ValueError):
            DenseNet([Layer(np.zeros((2, 3)), np.zeros(2)), Layer(np.zeros((2, 3)), np.zeros(2))])

    def test_flat_round_trip(self, rng):
        net = DenseNet.init([3, 4, 2], ["relu", "identity"], rng)
        theta = rng.standard_normal(net.n_params)
        np.testing.assert_array_equal(net.with_flat(theta).flat, theta)
        with pytest.raises(ValueError):
            net.with_flat(theta[:-1])


class TestReverseMode:
    def test_linear_least_squares_closed_form(self, rng):
        W = rng.standard_normal((2, 3))
        net = DenseNet([Layer(W, np.zeros(2), "identity")])
        x, y = rng.standard_normal(3), rng.standard_normal(2)
        out, cache = net_forward(net, x)
        g = net_reverse_grad(net, 2 * (out - y), cache)
        np.testing.assert_allclose(g[:6].reshape(2, 3), 2 * np.outer(W @ x - y, x), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=2, max_size=4),
           st.lists(st.sampled_from(["relu", "sigmoid", "identity"]), min_size=3, max_size=3),
           st.integers(0, 10_000))
    def test_finite_differences(self, widths, acts, seed):
        rng = np.random.default_rng(seed)
        net = DenseNet.init(widths, acts[:len(widths) - 1], rng)
        X = rng.standard_normal((4, widths[0]))
        Y = rng.standard_normal((4, widths[-1]))
        theta = net.flat + 0.3 * rng.standard_normal(net.n_params)
        assert net_fd_error(_loss_fn(net, X, Y), theta, rng) < 1e-4

    def test_input_gradient(self, rng):
        net = DenseNet.init([3, 5, 2], ["sigmoid", "identity"], rng)
        x = rng.standard_normal(3)
        out, cache = net_forward(net, x)
        _, gx = net_reverse_grad(net, np.ones(2), cache, return_input_grad=True)
        h = 1e-6
        fd = [(net(x + h * e).sum() - net(x - h * e).sum()) / (2 * h) for e in np.eye(3)]
        np.testing.assert_allclose(gx, fd, rtol=1e-6)

    def test_stale_cache(self, rng):
        net = DenseNet.init([2, 2], ["identity"], rng)
        _, cache = net_forward(net, np.ones(2))
        with pytest.raises(ValueError, match="stale"):
            net_reverse_grad(net.with_flat(net.flat), np.ones(2), cache)


class TestOptimizers:
    def test_momentum_unrolled(self):
        opt = OptimState("momentum", beta=0.9)
        t = opt.step(np.array([1.0]), np.array([1.0]), 0.1)
        t = opt.step(t, np.array([1.0]), 0.1)
        assert t[0] == pytest.approx(1 - 0.1 - 0.19)

    def test_sgd(self):
        np.testing.assert_allclose(OptimState().step(np.ones(2), np.ones(2), 0.5), [0.5, 0.5])

    def test_adam_first_step_is_lr_sign(self):
        opt = OptimState("adam")
        out = opt.step(np.zeros(3), np.array([2.0, -3.0, 0.5]), 0.01)
        np.testing.assert_allclose(out, [-0.01, 0.01, -0.01], rtol=1e-6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            OptimState("rmsprop")
        with pytest.raises(ValueError):
            OptimState().step(np.ones(1), np.ones(1), 0.0)

    def test_clip(self):
        np.testing.assert_array_equal(clip_inf(np.array([-5.0, 0.2, 3.0]), 1.0), [-1, 0.2, 1])
        with pytest.raises(ValueError):
            clip_inf(np.ones(1), 0)


class TestPersistence:
    def test_save_load_round_trip(self, rng, tmp_path):
        net = DenseNet.init([4, 3, 4], ["relu", "sigmoid"], rng)
        save_net(tmp_path / "net.bin", net)
        back = load_net(tmp_path / "net.bin")
        assert back.shapes == net.shapes
        np.testing.assert_array_equal(back.flat, net.flat)

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_net(tmp_path / "x")
