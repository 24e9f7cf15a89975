import numpy as np
import pytest

from adept.datagen import PcaGenConfig, gen_pca_data
from adept.manifold import StiefelPoint, sample_stiefel_uniform, stiefel_distance
from adept.pca import (PcaClientData, check_convergence_bound, check_sufficient_decrease,
                       initial_state, pca_data_loss, pca_loss, pca_theory,
                       reconstruction_error_ratio, run_adept_pca, run_global_pca, w_inverse,
                       w_logdet)
from adept.prior import PriorState

from ._oracles import dense_pca_data_loss, pca_fd_errors


def _instance(rng, d=6, r=2, n=15, sigma_eps=0.5):
    u_true = sample_stiefel_uniform(d, r, rng)
    X = rng.standard_normal((n, r)) @ u_true.mat.T + sigma_eps * rng.standard_normal((n, d))
    return PcaClientData.from_samples(X, sigma_eps)


class TestClosedForm:
    def test_logdet_example(self):
        assert w_logdet(3, 1, 1.0) == pytest.approx(np.log(2))

    def test_inverse_matches_dense(self, rng):
        u = sample_stiefel_uniform(7, 3, rng).mat
        W = u @ u.T + 0.3 ** 2 * np.eye(7)
        np.testing.assert_allclose(w_inverse(u, 0.3), np.linalg.inv(W), atol=1e-8)

    def test_loss_matches_dense(self, rng):
        for _ in range(10):
            data = _instance(rng)
            u = sample_stiefel_uniform(6, 2, rng).mat
            assert pca_data_loss(u, data) == pytest.approx(
                dense_pca_data_loss(u, data.S, data.n, data.sigma_eps), abs=1e-8, rel=1e-10)

    def test_aggregate_loss(self, rng):
        data = [_instance(rng) for _ in range(3)]
        us = [sample_stiefel_uniform(6, 2, rng) for _ in range(3)]
        v = sample_stiefel_uniform(6, 2, rng)
        prior = PriorState(v.mat, 0.8, 0.1, 12)
        naive = np.mean([dense_pca_data_loss(u.mat, d.S, d.n, d.sigma_eps)
                         + (0.2 + stiefel_distance(v, u) ** 2) / (2 * 0.64)
                         for u, d in zip(us, data)]) + 12 * np.log(0.8)
        assert pca_loss(us, v, prior, data) == pytest.approx(naive, rel=1e-10)

    def test_client_data_validation(self):
        with pytest.raises(ValueError):
            PcaClientData(np.ones((2, 3)), 5, 0.1)
        with pytest.raises(ValueError):
            PcaClientData(np.array([[1.0, 2.0], [0.0, 1.0]]), 5, 0.1)
        with pytest.raises(ValueError):
            PcaClientData(np.eye(2), 5, 0.0)


class TestGradients:
    def test_finite_differences(self, rng):
        for _ in range(20):
            data = _instance(rng, d=5, r=2)
            u = sample_stiefel_uniform(5, 2, rng).mat
            v = sample_stiefel_uniform(5, 2, rng).mat
            assert pca_fd_errors(u, v, rng.uniform(0.5, 2), rng.uniform(0.01, 1), data, rng) < 1e-5

    def test_theory_constant_example(self, rng):
        data = [_instance(rng, d=4, r=1)]
        assert pca_theory(data, 1, 0.5, 1.0).L_V == pytest.approx(192)


class TestAlgorithm:
    def test_single_client_descent(self, rng):
        data = [_instance(rng, d=5, r=2, n=30)]
        state = initial_state(5, 2, 1, rng, sigma0=1e4, xi=1e-8, init="independent")
        th = pca_theory(data, 2, 0.5, 1.0)
        eta1 = th.step_sizes()[0]
        _, trace = run_adept_pca(state, data, (eta1, eta1, 0.0), 30)
        loss = trace.column("loss")
        assert np.all(np.diff(loss) <= 1e-9)

    def test_homogeneous_beats_local(self):
        gen = PcaGenConfig(d=20, r=3, m=5, n=10, sigma_star=0.0, sigma_eps=0.5, seed=3)
        _, us, Xs, Xe = gen_pca_data(gen, n_eval=200)
        data = [PcaClientData.from_samples(X, 0.5) for X in Xs]
        state = initial_state(20, 3, 5, np.random.default_rng(0), 0.05, 0.05, "spectral", data)
        final, _ = run_adept_pca(state, data, (1e-3, 1e-3, 1e-7), 200)
        local, _ = run_adept_pca(state, data, (1e-3, 1e-3, 0.0), 200, use_prior=False)
        ours = reconstruction_error_ratio(final.locals, us, Xe)
        theirs = reconstruction_error_ratio(local.locals, us, Xe)
        assert ours <= theirs
        start = np.mean([stiefel_distance(u, StiefelPoint(state.locals[i].mat))
                         for i, u in enumerate(us)])
        end = stiefel_distance(final.global_v, us[0])
        assert end <= start

    def test_monitor_accepts_theorem_steps(self, rng):
        data = [_instance(rng, d=4, r=1) for _ in range(3)]
        xi = 8.0
        th = pca_theory(data, 1, 0.5, xi)
        etas = th.step_sizes()
        state = initial_state(4, 1, 3, rng, 2.0, xi, "independent")
        _, trace = run_adept_pca(state, data, etas, 20, monitor_theory=True)
        assert check_sufficient_decrease(trace, etas)
        assert check_convergence_bound(trace, etas)

    def test_monitor_rejects_bad_sigma_step(self, rng):
        data = [_instance(rng, d=4, r=1)]
        state = initial_state(4, 1, 1, rng, 1.0, 0.1, "independent")
        with pytest.raises(ValueError, match="eta3"):
            run_adept_pca(state, data, (1e-3, 1e-3, 1.0), 5, monitor_theory=True)

    def test_global_pca_descends(self, rng):
        data = [_instance(rng) for _ in range(3)]
        v0 = sample_stiefel_uniform(6, 2, rng)
        _, trace = run_global_pca(v0, data, 1e-3, 50)
        loss = trace.column("loss")
        assert loss[-1] < loss[0]

    def test_deterministic_across_workers(self, rng):
        data = [_instance(rng) for _ in range(4)]
        state = initial_state(6, 2, 4, rng, 0.5, 0.1, "independent")
        a, ta = run_adept_pca(state, data, (1e-3, 1e-3, 1e-5), 20, seed=1, workers=1)
        b, tb = run_adept_pca(state, data, (1e-3, 1e-3, 1e-5), 20, seed=1, workers=3)
        assert ta.to_csv() == tb.to_csv()
        for x, y in zip(a.locals, b.locals):
            np.testing.assert_array_equal(x.mat, y.mat)


class TestRatio:
    def test_true_models_give_one(self):
        gen = PcaGenConfig(d=10, r=2, m=3, n=5, sigma_star=0.1, seed=0)
        _, us, _, Xe = gen_pca_data(gen, n_eval=50)
        assert reconstruction_error_ratio(us, us, Xe) == pytest.approx(1.0)

    def test_random_models_much_worse(self, rng):
        gen = PcaGenConfig(d=50, r=2, m=3, n=5, sigma_star=0.1, sigma_eps=0.1, seed=0)
        _, us, _, Xe = gen_pca_data(gen, n_eval=200)
        rand = [sample_stiefel_uniform(50, 2, rng) for _ in us]
        assert reconstruction_error_ratio(rand, us, Xe) > 5

    def test_rotation_invariance(self, rng):
        gen = PcaGenConfig(d=10, r=3, m=2, n=5, sigma_star=0.1, seed=0)
        _, us, _, Xe = gen_pca_data(gen, n_eval=50)
        models = [sample_stiefel_uniform(10, 3, rng) for _ in us]
        q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        rotated = [StiefelPoint(m.mat @ q) for m in models]
        assert reconstruction_error_ratio(rotated, us, Xe) == pytest.approx(
            reconstruction_error_ratio(models, us, Xe), rel=1e-12)
