"""Posterior-predictive inference at new locations.

For each retained posterior draw, the field value at a new site accumulates
per-class conditional-Gaussian increments: class l contributes a kriging
mean ``K_l' Sigma_l^{-1} (w_l - w_{l-1})`` and covariance
``C_l(s0, s0) - K_l' Sigma_l^{-1} K_l``, where ``K_l`` stacks the
cross-covariances between the new site and each observed site.  Intensities
follow from the draw's coefficients, and one Poisson count is sampled per
draw per cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .covariance import SiteSet
from .errors import DataError, DomainError, NumericError, SingularCovarianceError
from .model import ETA_MAX, Dataset, ModelSpec, ParamState
from .sampler import ChainStore, ParamLayout, _block_matrix
from .util import nearest_rank_quantile


@dataclass(frozen=True)
class PredictionRequest:
    """New sites, their covariates, and the posterior-draw budget.

    covariates
        ``(q, m, n0, p)`` design vectors at the new sites, with the leading
        intercept column; may be None for intercept-only models.
    draws
        Optional cap on the number of posterior draws used; draws are
        subsampled evenly across the pooled chains.
    """

    new_sites: SiteSet
    covariates: np.ndarray | None = None
    draws: int | None = None

    def __post_init__(self):
        if self.covariates is not None:
            covs = np.asarray(self.covariates, dtype=float)
            if covs.ndim != 4 or covs.shape[2] != self.new_sites.n:
                raise DomainError(
                    f"covariates must be (q, m, n0, p) with n0={self.new_sites.n}, got {covs.shape}"
                )
            if not np.all(np.isfinite(covs)):
                raise DomainError("prediction covariates must be finite")
            if not np.all(covs[..., 0] == 1.0):
                raise DomainError("prediction covariates must carry a leading intercept of 1")
            object.__setattr__(self, "covariates", covs)
        if self.draws is not None and self.draws < 1:
            raise DomainError("draw subsample size must be at least 1")


@dataclass
class PredictiveDraws:
    """Sampled counts and intensities per (new site, group, class, draw)."""

    counts: np.ndarray  # (n0, q, m, D) integers
    intensities: np.ndarray  # (n0, q, m, D)

    def __post_init__(self):
        if self.counts.shape != self.intensities.shape:
            raise DomainError("counts and intensities must have matching shapes")
        if np.any(self.counts < 0):
            raise DomainError("sampled counts must be nonnegative")

    @property
    def n_draws(self) -> int:
        return self.counts.shape[3]

    def cell(self, site: int, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """(counts, intensities) across draws for one prediction cell."""
        return self.counts[site, i, j], self.intensities[site, i, j]


@dataclass
class ConditionalField:
    """Cumulative conditional moments (and optional sample) of w(s0) by class."""

    mean: np.ndarray  # (m_used, q)
    cov: np.ndarray  # (m_used, q, q)
    sample: np.ndarray | None  # (m_used, q)


def _class_increment(
    dist_obs: np.ndarray,
    d0: np.ndarray,
    A: np.ndarray,
    phi: np.ndarray,
    w_diff: np.ndarray,
    class_label: int,
):
    """Kriging mean/cov of one class's field increment at a batch of new sites.

    d0 is (n0, n) distances from new sites to observed sites; returns mean
    (n0, q) and covariance (n0, q, q).
    """
    n = dist_obs.shape[0]
    q = A.shape[0]
    mat = _block_matrix(dist_obs, A, phi)
    try:
        L = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(
            f"spatial covariance for class {class_label} is not positive definite"
        ) from None
    # K stacks C(s0, s_k) blocks site-major: shape (n0, nq, q).
    R0 = np.exp(-phi[:, None, None] * d0[None, :, :])  # (q, n0, n)
    outers = np.einsum("ai,bi->iab", A, A)  # (q, q, q)
    K = np.einsum("isk,iab->skab", R0, outers).reshape(d0.shape[0], n * q, q)

    alpha = solve_triangular(L, w_diff, lower=True, check_finite=False)
    alpha = solve_triangular(L.T, alpha, lower=False, check_finite=False)  # Sigma^{-1} diff
    mean = K.transpose(0, 2, 1) @ alpha  # (n0, q)

    flatK = K.transpose(1, 0, 2).reshape(n * q, -1)  # (nq, n0*q)
    SK = solve_triangular(L, flatK, lower=True, check_finite=False)
    SK = SK.reshape(n * q, d0.shape[0], q).transpose(1, 0, 2)  # (n0, nq, q)
    c00 = A @ A.T
    cov = c00[None, :, :] - np.einsum("ska,skb->sab", SK, SK)
    return mean, cov


def _sample_gaussian(mean: np.ndarray, cov: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Draw from batched small normals via eigen square roots.

    Conditional covariances at (or numerically at) observed sites can be
    singular to rounding; eigenvalues are clipped at zero.
    """
    vals, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]
    return mean + np.einsum("sab,sb->sa", root, z)


def conditional_w(
    s0,
    draw: ParamState,
    sites: SiteSet,
    upto_class: int | None = None,
    rng=None,
) -> ConditionalField:
    """Conditional distribution of the field at one new site, class by class.

    Returns cumulative means ``(m_used, q)`` and covariances ``(m_used, q, q)``
    for classes 1..upto_class; when ``rng`` is given, a coherent sample path
    is drawn by sampling each class's increment once and accumulating.
    """
    if draw.A is None or draw.w is None:
        raise DomainError("the posterior draw carries no spatial parameters")
    m, q = draw.phi.shape
    upto = m if upto_class is None else upto_class
    if not 1 <= upto <= m:
        raise DomainError(f"upto_class must be in 1..{m}")
    s0 = np.asarray(s0, dtype=float).reshape(2)
    dist_obs = sites.pairwise_distances()
    d0 = sites.distances_to(s0)[None, :]  # (1, n)

    mean = np.zeros((upto, q))
    cov = np.zeros((upto, q, q))
    sample = np.zeros((upto, q)) if rng is not None else None
    acc_mean = np.zeros(q)
    acc_cov = np.zeros((q, q))
    acc_sample = np.zeros(q)
    prev = np.zeros(sites.n * q)
    for l in range(upto):
        inc_mean, inc_cov = _class_increment(
            dist_obs, d0, draw.A[l], draw.phi[l], draw.w[l] - prev, l + 1
        )
        acc_mean = acc_mean + inc_mean[0]
        acc_cov = acc_cov + inc_cov[0]
        mean[l] = acc_mean
        cov[l] = acc_cov
        if rng is not None:
            z = rng.standard_normal(q)
            acc_sample = acc_sample + _sample_gaussian(inc_mean, inc_cov, z[None, :])[0]
            sample[l] = acc_sample
        prev = draw.w[l]
    return ConditionalField(mean=mean, cov=cov, sample=sample)


def _pool_draws(chains: list[ChainStore], limit: int | None) -> tuple[ParamLayout, np.ndarray]:
    if not chains:
        raise DomainError("at least one fitted chain is required")
    layout = chains[0].layout
    rows = np.concatenate([c.draws for c in chains], axis=0)
    if rows.shape[0] == 0:
        raise DomainError("the fitted chains contain no retained draws")
    if limit is not None and limit < rows.shape[0]:
        idx = np.round(np.linspace(0, rows.shape[0] - 1, num=limit)).astype(int)
        rows = rows[idx]
    return layout, rows


def predictive_counts(
    request: PredictionRequest,
    chains: list[ChainStore],
    dataset: Dataset,
    spec: ModelSpec,
    rng,
) -> PredictiveDraws:
    """One sampled count (and intensity) per posterior draw per prediction cell.

    Per draw: sample the field at the new sites class by class, form the
    log-intensities with the draw's coefficients, then draw Poisson counts.
    """
    layout, rows = _pool_draws(chains, request.draws)
    q, m, n = layout.q, layout.m, layout.n
    p = layout.p
    n0 = request.new_sites.n

    if request.covariates is not None:
        x0 = request.covariates
        if x0.shape != (q, m, n0, p):
            raise DataError(
                f"prediction covariates must have shape {(q, m, n0, p)}, got {x0.shape}"
            )
    else:
        if p > 1:
            raise DataError(
                "the fitted model uses covariates; provide them for the new sites"
            )
        x0 = np.ones((q, m, n0, 1))

    dist_obs = dataset.sites.pairwise_distances() if spec.spatial else None
    d0 = (
        cdist(request.new_sites.coords, dataset.sites.coords) if spec.spatial else None
    )

    n_draws = rows.shape[0]
    counts = np.empty((n0, q, m, n_draws), dtype=np.int64)
    intensities = np.empty((n0, q, m, n_draws))
    for d in range(n_draws):
        state = layout.unflatten(rows[d])
        if spec.spatial:
            w0 = np.empty((m, n0, q))
            acc = np.zeros((n0, q))
            prev = np.zeros(n * q)
            for l in range(m):
                inc_mean, inc_cov = _class_increment(
                    dist_obs, d0, state.A[l], state.phi[l], state.w[l] - prev, l + 1
                )
                z = rng.standard_normal((n0, q))
                acc = acc + _sample_gaussian(inc_mean, inc_cov, z)
                w0[l] = acc
                prev = state.w[l]
            eta0 = np.einsum("ijsc,ijc->ijs", x0, state.beta) + w0.transpose(2, 0, 1)
        else:
            eta0 = np.einsum("ijsc,ijc->ijs", x0, state.beta)
        if np.any(eta0 > ETA_MAX):
            raise NumericError("posterior draw produces an overflowing predictive intensity")
        lam = np.exp(eta0)  # (q, m, n0)
        counts[:, :, :, d] = rng.poisson(lam).transpose(2, 0, 1)
        intensities[:, :, :, d] = lam.transpose(2, 0, 1)
    return PredictiveDraws(counts=counts, intensities=intensities)


@dataclass
class PredictiveSummary:
    """Per-cell predictive summaries, each of shape (n0, q, m)."""

    median: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    range95: np.ndarray


def summarize_predictive(draws: PredictiveDraws, area_factor: float = 1.0) -> PredictiveSummary:
    """Nearest-rank median and equal-tailed 95% interval of the sampled counts.

    ``area_factor`` rescales the summaries (not the underlying counts) to a
    per-area reporting unit.
    """
    if draws.n_draws == 0:
        raise DomainError("cannot summarize an empty set of predictive draws")
    c = draws.counts
    med = nearest_rank_quantile(c, 0.5, axis=-1).astype(float)
    lo = nearest_rank_quantile(c, 0.025, axis=-1).astype(float)
    hi = nearest_rank_quantile(c, 0.975, axis=-1).astype(float)
    return PredictiveSummary(
        median=med * area_factor,
        lower95=lo * area_factor,
        upper95=hi * area_factor,
        range95=(hi - lo) * area_factor,
    )
