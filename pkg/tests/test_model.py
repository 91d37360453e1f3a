import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import invgamma

import standgp as sg
from standgp.model import (
    IDENTITY,
    LOG,
    LogitTransform,
    ParamState,
    cholesky_map_log_jacobian,
    inverse_wishart_logpdf_chol,
    log_beta_prior,
    log_hyper_priors,
    log_joint,
    log_poisson_term,
)
from standgp.covariance import SiteSet
from standgp.errors import DomainError

from oracles import monolithic_log_joint, random_dataset, random_state


def one_cell_dataset(y, x_row=(1.0,)):
    sites = SiteSet(np.array([[0.0, 0.0]]))
    counts = np.array(y).reshape(1, 1, 1)
    covs = np.array(x_row, dtype=float).reshape(1, 1, 1, len(x_row))
    return sg.Dataset(sites=sites, counts=counts, covariates=covs)


class TestLogPoissonTerm:
    def test_unit_intensity_zero_count(self):
        ds = one_cell_dataset(0)
        state = ParamState(beta=np.zeros((1, 1, 1)))
        assert log_poisson_term(ds, state) == pytest.approx(-1.0, rel=1e-12)

    def test_kernel_at_mode(self):
        ds = one_cell_dataset(3)
        state = ParamState(beta=np.array(math.log(3.0)).reshape(1, 1, 1))
        assert log_poisson_term(ds, state) == pytest.approx(3 * math.log(3.0) - 3, rel=1e-10)
        assert log_poisson_term(ds, state) == pytest.approx(0.295837, abs=1e-6)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            ds = random_dataset(rng, n=4, q=2, m=3, p=2)
            spec = sg.ModelSpec(variant="spatial_covariates")
            state = random_state(ds, spec, rng)
            want = 0.0
            for i in range(2):
                for j in range(3):
                    for k in range(4):
                        eta = float(ds.covariates[i, j, k] @ state.beta[i, j])
                        eta += state.w[j][k * 2 + i]
                        want += ds.counts[i, j, k] * eta - math.exp(eta)
            assert log_poisson_term(ds, state) == pytest.approx(want, abs=1e-10)

    def test_overflow_is_reject_signal(self):
        ds = one_cell_dataset(1)
        state = ParamState(beta=np.array(800.0).reshape(1, 1, 1))
        assert log_poisson_term(ds, state) == -math.inf


class TestLogBetaPrior:
    def test_flat_is_zero(self):
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="flat")
        state = ParamState(beta=np.random.default_rng(0).standard_normal((2, 3, 2)))
        assert log_beta_prior(state, spec) == 0.0

    def test_two_centered_normals(self):
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="markov")
        state = ParamState(
            beta=np.zeros((1, 1, 1)), beta0=np.zeros((1, 1)), V=np.eye(1)
        )
        want = -0.5 * math.log(2 * math.pi * 1000.0) - 0.5 * math.log(2 * math.pi)
        assert log_beta_prior(state, spec) == pytest.approx(want, rel=1e-12)

    def test_matches_sequential_oracle(self):
        from scipy.stats import norm

        rng = np.random.default_rng(11)
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="markov")
        b0 = rng.standard_normal((1, 1))
        b = rng.standard_normal((1, 3, 1))
        sd = 0.7
        state = ParamState(beta=b, beta0=b0, V=np.array([[sd]]))
        want = norm.logpdf(b0[0, 0], 0.0, math.sqrt(1000.0))
        prev = b0[0, 0]
        for j in range(3):
            want += norm.logpdf(b[0, j, 0], prev, sd)
            prev = b[0, j, 0]
        assert log_beta_prior(state, spec) == pytest.approx(float(want), abs=1e-10)

    def test_independent_centers_at_zero(self):
        from scipy.stats import norm

        rng = np.random.default_rng(12)
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="independent")
        b = rng.standard_normal((2, 2, 1))
        state = ParamState(beta=b, V=np.array([[0.5]]))
        want = float(np.sum(norm.logpdf(b.ravel(), 0.0, 0.5)))
        assert log_beta_prior(state, spec) == pytest.approx(want, abs=1e-10)


class TestLogHyperPriors:
    def test_phi_at_bound_is_minus_inf(self):
        spec = sg.ModelSpec()
        rng = np.random.default_rng(13)
        ds = random_dataset(rng, n=2, q=1, m=1, p=1)
        state = random_state(ds, spec, rng)
        state.phi[0, 0] = 0.1  # exactly at the lower bound
        assert log_hyper_priors(state, spec) == -math.inf

    def test_scalar_inverse_gamma_form(self):
        # q=1: the density of Gamma = a^2 under IW(r, v I) plus the map
        # Jacobian log(2a) equals the inverse-gamma form directly.
        r, v = 3, 0.01
        for a in (0.2, 0.7, 1.9):
            L = np.array([[a]])
            got = inverse_wishart_logpdf_chol(L, r, v) + cholesky_map_log_jacobian(L)
            want = invgamma.logpdf(a * a, r / 2.0, scale=v / 2.0) + math.log(2 * a)
            assert got == pytest.approx(float(want), abs=1e-10)

    def test_scalar_density_integrates_to_one(self):
        # numeric quadrature over the factor parameterization, q=1
        r, v = 2, 0.01

        def density(a):
            L = np.array([[a]])
            return math.exp(
                inverse_wishart_logpdf_chol(L, r, v) + cholesky_map_log_jacobian(L)
            )

        total, err = quad(density, 0.0, np.inf, limit=200)
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_q2_finite_and_matches_scipy(self):
        from scipy.stats import invwishart

        rng = np.random.default_rng(14)
        for _ in range(5):
            L = np.tril(0.4 * rng.standard_normal((2, 2)))
            np.fill_diagonal(L, rng.uniform(0.2, 1.0, 2))
            got = inverse_wishart_logpdf_chol(L, 3, 0.01)
            want = invwishart.logpdf(L @ L.T, df=3, scale=0.01 * np.eye(2))
            assert math.isfinite(got)
            assert got == pytest.approx(float(want), abs=1e-10)


class TestLogJoint:
    def test_nonspatial_flat_equals_poisson_term(self):
        rng = np.random.default_rng(15)
        ds = random_dataset(rng, n=3, q=2, m=2, p=2)
        spec = sg.ModelSpec(variant="nonspatial_covariates", beta_dynamics="flat")
        state = ParamState(beta=0.3 * rng.standard_normal((2, 2, 2)))
        assert log_joint(ds, state, spec) == pytest.approx(
            log_poisson_term(ds, state), rel=1e-12
        )

    def test_minimal_full_model_matches_monolithic(self):
        rng = np.random.default_rng(16)
        ds = random_dataset(rng, n=2, q=1, m=1, p=2)
        spec = sg.ModelSpec(variant="spatial_covariates", beta_dynamics="markov")
        state = random_state(ds, spec, rng)
        got = log_joint(ds, state, spec)
        want = monolithic_log_joint(ds, state, spec)
        assert got == pytest.approx(want, abs=1e-8)

    def test_blocked_vs_dense_small_instances(self):
        rng = np.random.default_rng(17)
        for trial in range(6):
            n = int(rng.integers(2, 5))
            q = int(rng.integers(1, 3))
            m = int(rng.integers(1, 4))
            ds = random_dataset(rng, n=n, q=q, m=m, p=2)
            spec = sg.ModelSpec(
                variant="spatial_covariates",
                beta_dynamics=("markov", "independent", "flat")[trial % 3],
                shared_sigma_eta=bool(trial % 2),
            )
            state = random_state(ds, spec, rng)
            assert log_joint(ds, state, spec) == pytest.approx(
                monolithic_log_joint(ds, state, spec), abs=1e-8
            )

    def test_shifting_one_class_w_changes_value(self):
        rng = np.random.default_rng(18)
        ds = random_dataset(rng, n=3, q=1, m=2, p=1)
        spec = sg.ModelSpec(variant="spatial_nocovariates")
        state = random_state(ds, spec, rng)
        base = log_joint(ds, state, spec)
        shifted = state.copy()
        shifted.w[1] = shifted.w[1] + 0.37
        assert log_joint(ds, shifted, spec) != base

    @pytest.mark.parametrize(
        "variant", ["nonspatial_covariates", "spatial_nocovariates", "spatial_covariates"]
    )
    def test_intensity_grid_maximized_at_observed_count(self, variant):
        # flat coefficient prior, one observation: the joint over a grid of
        # intensities peaks where the intensity equals the count
        y = 3
        sites = SiteSet(np.array([[0.0, 0.0]]))
        counts = np.array(y).reshape(1, 1, 1)
        covs = np.ones((1, 1, 1, 1))
        ds = sg.Dataset(sites=sites, counts=counts, covariates=covs)
        spec = sg.ModelSpec(variant=variant, beta_dynamics="flat")
        lam_grid = np.linspace(0.5, 8.0, 76)
        values = []
        for lam in lam_grid:
            if spec.spatial:
                state = ParamState(
                    beta=np.array(math.log(lam)).reshape(1, 1, 1),
                    A=np.full((1, 1, 1), 0.5),
                    phi=np.full((1, 1), 3.0),
                    w=np.zeros((1, 1)),
                )
            else:
                state = ParamState(beta=np.array(math.log(lam)).reshape(1, 1, 1))
            values.append(log_joint(ds, state, spec))
        best = lam_grid[int(np.argmax(values))]
        assert best == pytest.approx(float(y), abs=0.11)


class TestTransforms:
    def test_logit_midpoint(self):
        tr = LogitTransform(0.1, 6.0)
        assert tr.forward(3.05) == pytest.approx(0.0, abs=1e-12)
        assert tr.log_jacobian(0.0) == pytest.approx(math.log((6.0 - 0.1) / 4.0), rel=1e-12)

    def test_log_kind(self):
        assert LOG.forward(1.0) == 0.0
        assert LOG.log_jacobian(0.0) == 0.0
        assert LOG.inverse(LOG.forward(2.7)) == pytest.approx(2.7, rel=1e-15)

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(19)
        kinds = [IDENTITY, LOG, LogitTransform(0.1, 6.0), LogitTransform(-2.0, 5.0)]
        supports = [(-50, 50), (1e-6, 50), (0.1 + 1e-9, 6.0 - 1e-9), (-2.0 + 1e-9, 5.0 - 1e-9)]
        for kind, (lo, hi) in zip(kinds, supports):
            for _ in range(25):
                c = rng.uniform(lo, hi)
                back = kind.inverse(kind.forward(c))
                assert back == pytest.approx(c, rel=1e-12, abs=1e-12)

    def test_out_of_support_errors(self):
        with pytest.raises(DomainError):
            LOG.forward(-1.0)
        with pytest.raises(DomainError):
            LogitTransform(0.1, 6.0).forward(6.0)
        with pytest.raises(DomainError):
            LogitTransform(0.1, 6.0).forward(0.05)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(20)
        kinds = [IDENTITY, LOG, LogitTransform(0.1, 6.0), LogitTransform(-1.0, 2.0)]
        checked = 0
        for kind in kinds:
            for _ in range(25):
                u = rng.normal(0.0, 2.0)
                h = 1e-5 * max(1.0, abs(u))
                fd = (kind.inverse(u + h) - kind.inverse(u - h)) / (2 * h)
                got = math.exp(kind.log_jacobian(u))
                assert got == pytest.approx(fd, rel=1e-6)
                checked += 1
        assert checked == 100
