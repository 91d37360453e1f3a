import numpy as np
import pytest

import standgp as sg
from standgp.covariance import SiteSet
from standgp.errors import DataError, DomainError
from standgp.model import ParamState
from standgp.predict import (
    PredictionRequest,
    conditional_w,
    predictive_counts,
    summarize_predictive,
)
from standgp.sampler import ChainStore, ParamLayout

from oracles import brute_force_conditional


def spatial_draw(seed=0, n=3, q=2, m=2):
    ds, truth = sg.simulate(sg.SimConfig(n=n, q=q, m=m, p=1, seed=seed))
    return ds, truth


def fake_chains(layout, draws):
    n_draws = draws.shape[0]
    store = ChainStore(
        layout=layout,
        names=layout.names(),
        draws=draws,
        log_joint=np.zeros(n_draws),
        iterations=np.arange(1, n_draws + 1, dtype=np.int64),
        acceptance=np.zeros((0, 0), dtype=np.int64),
        block_labels=[],
        batch_size=1,
        chain_id=1,
        total_iters=n_draws,
        burnin=0,
        thin=1,
    )
    return [store]


class TestConditionalW:
    def test_exact_interpolation_at_observed_sites(self):
        ds, truth = spatial_draw(seed=1, n=4, q=2, m=3)
        q = ds.q
        for k in range(ds.n):
            out = conditional_w(ds.sites.coords[k], truth, ds.sites)
            for j in range(ds.m):
                want = truth.w[j][k * q : (k + 1) * q]
                np.testing.assert_allclose(out.mean[j], want, atol=1e-8)
                assert np.all(np.abs(out.cov[j]) <= 1e-8)

    def test_scalar_simple_kriging_identity(self):
        coords = np.array([[0.0, 0.0]])
        phi, d, w1 = 1.3, 0.8, 0.9
        draw = ParamState(
            beta=np.zeros((1, 1, 1)),
            A=np.ones((1, 1, 1)),
            phi=np.full((1, 1), phi),
            w=np.full((1, 1), w1),
        )
        out = conditional_w(np.array([d, 0.0]), draw, SiteSet(coords))
        rho = np.exp(-phi * d)
        assert out.mean[0, 0] == pytest.approx(rho * w1, rel=1e-12)
        assert out.cov[0, 0, 0] == pytest.approx(1.0 - rho**2, rel=1e-12)

    def test_matches_brute_force_conditioning(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            ds, truth = spatial_draw(seed=seed, n=3, q=2, m=2)
            s0 = rng.uniform(0, 2, size=2)
            out = conditional_w(s0, truth, ds.sites)
            want_mean, want_cov = brute_force_conditional(s0, truth, ds.sites.coords)
            np.testing.assert_allclose(out.mean, want_mean, atol=1e-8)
            np.testing.assert_allclose(out.cov, want_cov, atol=1e-8)

    def test_class_accumulation_identity(self):
        # the cumulative conditional mean equals the sum of single-class
        # increment predictions
        ds, truth = spatial_draw(seed=3, n=4, q=2, m=3)
        s0 = np.array([0.7, 1.1])
        out = conditional_w(s0, truth, ds.sites)
        acc = np.zeros(ds.q)
        prev = np.zeros(ds.n * ds.q)
        for l in range(ds.m):
            sub = ParamState(
                beta=truth.beta[:, :1, :],
                A=truth.A[l : l + 1],
                phi=truth.phi[l : l + 1],
                w=(truth.w[l] - prev)[None, :],
            )
            acc = acc + conditional_w(s0, sub, ds.sites).mean[0]
            prev = truth.w[l]
            np.testing.assert_allclose(out.mean[l], acc, atol=1e-10)

    def test_monotone_information(self):
        # conditioning on all sites never increases the predictive variance
        # relative to conditioning on a subset
        rng = np.random.default_rng(4)
        for seed in range(4):
            ds, truth = spatial_draw(seed=10 + seed, n=5, q=2, m=2)
            s0 = rng.uniform(0, 2, size=2)
            full = conditional_w(s0, truth, ds.sites)
            keep = sorted(rng.choice(ds.n, size=3, replace=False))
            idx = np.concatenate([[k * ds.q + i for i in range(ds.q)] for k in keep])
            sub_sites = SiteSet(ds.sites.coords[keep])
            sub = ParamState(
                beta=truth.beta,
                A=truth.A,
                phi=truth.phi,
                w=truth.w[:, idx],
            )
            part = conditional_w(s0, sub, sub_sites)
            for j in range(ds.m):
                assert np.all(
                    np.diag(full.cov[j]) <= np.diag(part.cov[j]) + 1e-10
                )

    def test_upto_class_and_sampling(self):
        ds, truth = spatial_draw(seed=5, n=3, q=2, m=3)
        out = conditional_w(np.array([0.5, 0.5]), truth, ds.sites, upto_class=2,
                            rng=np.random.default_rng(6))
        assert out.mean.shape == (2, 2)
        assert out.sample is not None and out.sample.shape == (2, 2)
        with pytest.raises(DomainError):
            conditional_w(np.array([0.5, 0.5]), truth, ds.sites, upto_class=9)

    def test_nonspatial_draw_rejected(self):
        draw = ParamState(beta=np.zeros((1, 1, 1)))
        with pytest.raises(DomainError):
            conditional_w(np.zeros(2), draw, SiteSet(np.zeros((1, 2))))


class TestPredictiveCounts:
    def test_unit_intensity_monte_carlo(self):
        # beta fixed at zero, no field: counts are Poisson(1)
        layout = ParamLayout(q=1, m=1, n=1, p=1, dynamics="flat",
                             shared_sigma_eta=True, spatial=False)
        chains = fake_chains(layout, np.zeros((1000, layout.size)))
        sites = SiteSet(np.array([[0.0, 0.0]]))
        ds = sg.Dataset(sites=sites, counts=np.zeros((1, 1, 1), dtype=int),
                        covariates=np.ones((1, 1, 1, 1)))
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="flat")
        new_sites = SiteSet(np.random.default_rng(7).uniform(0, 1, size=(100, 2)))
        request = PredictionRequest(new_sites=new_sites)
        draws = predictive_counts(request, chains, ds, spec, np.random.default_rng(8))
        assert draws.counts.shape == (100, 1, 1, 1000)
        mean = draws.counts.mean()
        assert 0.99 <= mean <= 1.01
        np.testing.assert_allclose(draws.intensities, 1.0)

    def test_poisson_two_zero_probability(self):
        # a single posterior draw with log-intensity log 2
        layout = ParamLayout(q=1, m=1, n=1, p=1, dynamics="flat",
                             shared_sigma_eta=True, spatial=False)
        chains = fake_chains(layout, np.full((1, layout.size), np.log(2.0)))
        sites = SiteSet(np.array([[0.0, 0.0]]))
        ds = sg.Dataset(sites=sites, counts=np.zeros((1, 1, 1), dtype=int),
                        covariates=np.ones((1, 1, 1, 1)))
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="flat")
        new_sites = SiteSet(np.random.default_rng(9).uniform(0, 1, size=(20000, 2)))
        request = PredictionRequest(new_sites=new_sites)
        draws = predictive_counts(request, chains, ds, spec, np.random.default_rng(10))
        p_zero = float(np.mean(draws.counts == 0))
        assert p_zero == pytest.approx(np.exp(-2.0), abs=0.01)

    def test_covariate_mismatch_rejected(self):
        spec = sg.ModelSpec()  # spatial_covariates, markov
        ds, _ = sg.simulate(sg.SimConfig(n=3, q=2, m=2, p=2, seed=12))
        layout = ParamLayout.from_model(ds, spec)
        chains = fake_chains(layout, np.zeros((2, layout.size)))
        # the model carries covariates (p=2) but none are supplied for the
        # new sites
        with pytest.raises(DataError):
            predictive_counts(
                PredictionRequest(new_sites=ds.sites), chains, ds, spec,
                np.random.default_rng(0),
            )
        # wrong covariate arity is also rejected
        bad = np.ones((ds.q, ds.m, ds.n, 5))
        with pytest.raises(DataError):
            predictive_counts(
                PredictionRequest(new_sites=ds.sites, covariates=bad), chains, ds, spec,
                np.random.default_rng(0),
            )

    def test_empty_chains_rejected(self):
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="flat")
        layout = ParamLayout(q=1, m=1, n=1, p=1, dynamics="flat",
                             shared_sigma_eta=True, spatial=False)
        chains = fake_chains(layout, np.zeros((0, layout.size)))
        sites = SiteSet(np.array([[0.0, 0.0]]))
        ds = sg.Dataset(sites=sites, counts=np.zeros((1, 1, 1), dtype=int),
                        covariates=np.ones((1, 1, 1, 1)))
        with pytest.raises(DomainError):
            predictive_counts(
                PredictionRequest(new_sites=sites), chains, ds, spec,
                np.random.default_rng(0),
            )

    def test_draw_subsampling(self):
        layout = ParamLayout(q=1, m=1, n=1, p=1, dynamics="flat",
                             shared_sigma_eta=True, spatial=False)
        chains = fake_chains(layout, np.zeros((100, layout.size)))
        sites = SiteSet(np.array([[0.0, 0.0]]))
        ds = sg.Dataset(sites=sites, counts=np.zeros((1, 1, 1), dtype=int),
                        covariates=np.ones((1, 1, 1, 1)))
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="flat")
        request = PredictionRequest(new_sites=sites, draws=7)
        out = predictive_counts(request, chains, ds, spec, np.random.default_rng(1))
        assert out.n_draws == 7


class TestSummarizePredictive:
    def _draws(self, values):
        values = np.asarray(values)
        counts = values.reshape(1, 1, 1, -1)
        from standgp.predict import PredictiveDraws

        return PredictiveDraws(counts=counts.astype(np.int64), intensities=counts.astype(float))

    def test_constant_draws(self):
        s = summarize_predictive(self._draws([4] * 17))
        assert s.median[0, 0, 0] == 4
        assert s.range95[0, 0, 0] == 0

    def test_rank_arithmetic_1_to_100(self):
        s = summarize_predictive(self._draws(np.arange(1, 101)))
        assert s.median[0, 0, 0] == 50  # lower nearest-rank
        assert s.lower95[0, 0, 0] == 3
        assert s.upper95[0, 0, 0] == 98
        assert s.range95[0, 0, 0] == 95

    def test_poisson5_median(self):
        draws = np.random.default_rng(13).poisson(5.0, size=100_000)
        s = summarize_predictive(self._draws(draws))
        assert s.median[0, 0, 0] == 5

    def test_area_rescaling(self):
        s = summarize_predictive(self._draws(np.arange(1, 101)), area_factor=2.5)
        assert s.median[0, 0, 0] == pytest.approx(125.0)
