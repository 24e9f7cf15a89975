import numpy as np
import pytest
from sklearn.base import clone

from adept.datagen import AeGenConfig, PcaGenConfig, gen_ae_data, gen_pca_data
from adept.estimators import (AdeptAutoencoder, AdeptDenoiser, AdeptPCA,
                              PersonalizedGaussianDiffusion, check_client_data, check_etas,
                              check_strategy)


@pytest.fixture(scope="module")
def pca_clients():
    _, _, Xs = gen_pca_data(PcaGenConfig(d=12, r=2, m=4, n=15, sigma_star=0.1, sigma_eps=0.2))
    return Xs


class TestValidation:
    def test_list_and_groups_agree(self, rng):
        Xs = [rng.standard_normal((3, 2)), rng.standard_normal((4, 2))]
        X = np.vstack(Xs)
        groups = np.array([0] * 3 + [1] * 4)
        for a, b in zip(check_client_data(Xs), check_client_data(X, groups)):
            np.testing.assert_array_equal(a, b)

    def test_rejects_bare_matrix(self, rng):
        with pytest.raises(ValueError, match="groups"):
            check_client_data(rng.standard_normal((4, 2)))

    def test_rejects_mismatched_widths(self, rng):
        with pytest.raises(ValueError, match="features"):
            check_client_data([np.zeros((2, 2)), np.zeros((2, 3))])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            check_client_data([np.array([[np.nan, 1.0]])])

    def test_rejects_bad_groups(self, rng):
        with pytest.raises(ValueError):
            check_client_data(rng.standard_normal((4, 2)), groups=[0, 1])

    def test_strategy_and_etas(self):
        check_strategy("global")
        with pytest.raises(ValueError):
            check_strategy("ditto")
        assert check_etas([1, 2, 3]) == (1.0, 2.0, 3.0)
        with pytest.raises(ValueError):
            check_etas((1, -1, 0))


class TestAdeptPCA:
    @pytest.mark.parametrize("strategy", ["adept", "local", "global", "fedavg_finetune"])
    def test_fit_transform(self, pca_clients, strategy):
        est = AdeptPCA(n_components=2, sigma_eps=0.2, strategy=strategy, n_iter=20,
                       etas=(1e-3, 1e-3, 1e-6), finetune_rounds=3).fit(pca_clients)
        assert len(est.components_) == 4
        u = est.components_[1]
        np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-10)
        Z = est.transform(pca_clients[1], client=1)
        assert Z.shape == (15, 2)
        assert est.inverse_transform(Z, client=1).shape == (15, 12)
        assert est.score(pca_clients[1], client=1) == -est.reconstruction_error(pca_clients[1], 1)

    def test_clone_and_params(self):
        est = AdeptPCA(n_components=3, xi=0.1)
        c = clone(est)
        assert c.get_params()["xi"] == 0.1 and c.n_components == 3

    def test_invalid_components(self, pca_clients):
        with pytest.raises(ValueError):
            AdeptPCA(n_components=20).fit(pca_clients)

    def test_client_index(self, pca_clients):
        est = AdeptPCA(sigma_eps=0.2, n_iter=2).fit(pca_clients)
        with pytest.raises(IndexError):
            est.transform(pca_clients[0], client=9)

    def test_unfitted(self, pca_clients):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            AdeptPCA().transform(pca_clients[0])


@pytest.fixture(scope="module")
def ae_clients():
    return gen_ae_data(AeGenConfig(out_dim=8, m=3, n=6))[1]


class TestNetworkEstimators:
    @pytest.mark.parametrize("strategy", ["adept", "local", "global", "fedavg_finetune"])
    def test_autoencoder(self, ae_clients, strategy):
        est = AdeptAutoencoder(latent_dim=2, strategy=strategy, n_iter=6, tau=2,
                               finetune_rounds=1).fit(ae_clients)
        assert est.transform(ae_clients[0]).shape == (6, 2)
        assert est.reconstruct(ae_clients[0]).shape == (6, 8)
        assert est.score(ae_clients[0]) <= 100

    def test_autoencoder_options_dict(self, ae_clients):
        est = AdeptAutoencoder(latent_dim=2, n_iter=2, options={"clip_model": 0.5}).fit(ae_clients)
        assert est._options().clip_model == 0.5

    def test_denoiser(self, rng):
        Xs = [rng.standard_normal((8, 2)) + i for i in range(3)]
        est = AdeptDenoiser(hidden=8, gamma=4, n_iter=5, lr_decay_round=3).fit(Xs)
        assert est._options().lr_decay_round == 3
        assert est.denoise(Xs[0], 0.5, client=0).shape == (8, 2)
        assert np.isfinite(est.score(Xs[0]))
        with pytest.raises(ValueError):
            AdeptDenoiser(gamma=0).fit(Xs)


class TestGaussianDiffusion:
    def test_auto_xi_and_shrinkage(self, rng):
        Xs = [rng.standard_normal((10, 2)) + rng.standard_normal(2) * 0.3 for _ in range(50)]
        est = PersonalizedGaussianDiffusion().fit(Xs)
        assert est.xi_ == pytest.approx(0.3)
        means = np.stack([X.mean(axis=0) for X in Xs])
        spread_local = np.var(means)
        assert np.var(est.means_) < spread_local
        assert est.sample(5, client=3, random_state=0).shape == (5, 2)

    def test_unequal_sample_counts(self, rng):
        with pytest.raises(ValueError):
            PersonalizedGaussianDiffusion().fit([np.zeros((3, 2)), np.zeros((4, 2))])
