"""Domain types, priors, parameter transforms, and the joint log-posterior.

The observation model is a Poisson count per (species group i, size class j,
site k) with log-intensity ``x_ijk' beta_ij + w_ij(s_k)``.  Regression
coefficients follow a random walk across size classes (optionally independent
or flat), and the spatial effects accumulate independent coregionalized
Gaussian-field increments class by class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit, multigammaln

from .covariance import LOG_2PI, CoregParams, SiteSet, assemble_block, mvn_logdensity
from .errors import DomainError, SingularCovarianceError

VARIANTS = ("nonspatial_covariates", "spatial_nocovariates", "spatial_covariates")
DYNAMICS = ("markov", "independent", "flat")

# Linear predictors above this make exp() overflow; the evaluators treat such
# states as having log-density -inf so samplers reject the move.
ETA_MAX = 700.0


# ---------------------------------------------------------------------------
# Data and specification types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Observed counts and covariates over a fixed site set.

    counts
        ``(q, m, n)`` nonnegative integers: species group i, size class j,
        site k.
    covariates
        ``(q, m, n, p)`` design vectors with a leading column of ones.
    area_factor
        Multiplier taking per-plot counts to the reporting unit (e.g. per
        hectare).  The likelihood always acts on the raw integer counts;
        this factor is applied only when summaries are rescaled.
    """

    sites: SiteSet
    counts: np.ndarray
    covariates: np.ndarray
    area_factor: float = 1.0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        covs = np.asarray(self.covariates, dtype=float)
        if counts.ndim != 3:
            raise DomainError(f"counts must be (q, m, n), got shape {counts.shape}")
        q, m, n = counts.shape
        if n != self.sites.n:
            raise DomainError("counts site axis does not match the site set")
        if covs.shape[:3] != (q, m, n) or covs.ndim != 4:
            raise DomainError(
                f"covariates must be (q, m, n, p) matching counts, got {covs.shape}"
            )
        if not np.all(np.isfinite(covs)):
            raise DomainError("covariates must be finite")
        if not np.all(covs[..., 0] == 1.0):
            raise DomainError("covariate vectors must start with an intercept of 1")
        if np.any(counts < 0) or not np.issubdtype(counts.dtype, np.integer):
            if not np.issubdtype(counts.dtype, np.integer):
                if not np.all(counts == np.floor(counts)):
                    raise DomainError("counts must be integers")
            if np.any(counts < 0):
                raise DomainError("counts must be nonnegative")
        if self.area_factor <= 0:
            raise DomainError("area_factor must be positive")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "covariates", covs)

    @property
    def q(self) -> int:
        return self.counts.shape[0]

    @property
    def m(self) -> int:
        return self.counts.shape[1]

    @property
    def n(self) -> int:
        return self.counts.shape[2]

    @property
    def p(self) -> int:
        return self.covariates.shape[3]


@dataclass(frozen=True)
class ModelSpec:
    """Model variant flags and prior hyper-constants.

    ``r_eta`` and ``r_gamma`` default (when None) to ``p + 1`` and ``q + 1``
    for the effective regression dimension p and group count q.  ``phi_bounds``
    is a global ``(lo, hi)`` pair or a per-element ``(m, q, 2)`` array.
    """

    variant: str = "spatial_covariates"
    beta_dynamics: str = "markov"
    shared_sigma_eta: bool = True
    m0: float = 0.0
    sigma0_diag: float = 1000.0
    r_eta: int | None = None
    upsilon_eta_scale: float = 0.01
    r_gamma: int | None = None
    upsilon_gamma_scale: float = 0.01
    phi_bounds: tuple = (0.1, 6.0)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.beta_dynamics not in DYNAMICS:
            raise DomainError(
                f"unknown beta_dynamics {self.beta_dynamics!r}; choose from {DYNAMICS}"
            )
        if self.sigma0_diag <= 0:
            raise DomainError("sigma0_diag must be positive")
        if self.upsilon_eta_scale <= 0 or self.upsilon_gamma_scale <= 0:
            raise DomainError("inverse-Wishart scale factors must be positive")
        pb = np.asarray(self.phi_bounds, dtype=float)
        if pb.shape[-1] != 2:
            raise DomainError("phi_bounds must end in a (lo, hi) pair")
        lo, hi = pb[..., 0], pb[..., 1]
        if np.any(lo <= 0) or np.any(lo >= hi):
            raise DomainError("phi bounds must satisfy 0 < lo < hi")

    @property
    def spatial(self) -> bool:
        return self.variant != "nonspatial_covariates"

    @property
    def uses_covariates(self) -> bool:
        return self.variant != "spatial_nocovariates"

    def effective_p(self, dataset: Dataset) -> int:
        return dataset.p if self.uses_covariates else 1

    def phi_bounds_array(self, m: int, q: int) -> np.ndarray:
        """Bounds broadcast to shape (m, q, 2)."""
        pb = np.asarray(self.phi_bounds, dtype=float)
        return np.broadcast_to(pb, (m, q, 2)).copy()

    def r_eta_value(self, p: int) -> int:
        r = self.r_eta if self.r_eta is not None else p + 1
        if r < p + 1:
            raise DomainError(f"r_eta must be at least p + 1 = {p + 1}, got {r}")
        return r

    def r_gamma_value(self, q: int) -> int:
        r = self.r_gamma if self.r_gamma is not None else q + 1
        if r < q + 1:
            raise DomainError(f"r_gamma must be at least q + 1 = {q + 1}, got {r}")
        return r


@dataclass
class ParamState:
    """One complete draw of the model parameters.

    beta0
        ``(q, p)`` anchor coefficients, present only under markov dynamics.
    beta
        ``(q, m, p)`` per-class coefficients.
    V
        Lower-triangular Cholesky factor(s) of the coefficient innovation
        covariance: ``(p, p)`` when shared across classes, else ``(m, p, p)``.
        None under flat dynamics.
    A, phi
        ``(m, q, q)`` loading matrices and ``(m, q)`` decay rates; None for
        the nonspatial variant.
    w
        ``(m, n*q)`` spatial effect levels, site-major within each class;
        None for the nonspatial variant (treated as identically zero).
    """

    beta: np.ndarray
    beta0: np.ndarray | None = None
    V: np.ndarray | None = None
    A: np.ndarray | None = None
    phi: np.ndarray | None = None
    w: np.ndarray | None = None

    def copy(self) -> "ParamState":
        def c(a):
            return None if a is None else np.array(a, copy=True)

        return ParamState(
            beta=np.array(self.beta, copy=True),
            beta0=c(self.beta0),
            V=c(self.V),
            A=c(self.A),
            phi=c(self.phi),
            w=c(self.w),
        )

    def theta(self, j: int) -> CoregParams:
        if self.A is None or self.phi is None:
            raise DomainError("state has no spatial parameters")
        return CoregParams(self.A[j], self.phi[j])

    def validate(self, dataset: Dataset, spec: ModelSpec) -> None:
        q, m, n = dataset.q, dataset.m, dataset.n
        p = spec.effective_p(dataset)
        if self.beta.shape != (q, m, p):
            raise DomainError(f"beta must have shape {(q, m, p)}, got {self.beta.shape}")
        if not np.all(np.isfinite(self.beta)):
            raise DomainError("beta must be finite")
        if spec.beta_dynamics == "markov":
            if self.beta0 is None or self.beta0.shape != (q, p):
                raise DomainError(f"markov dynamics require beta0 of shape {(q, p)}")
            if not np.all(np.isfinite(self.beta0)):
                raise DomainError("beta0 must be finite")
        if spec.beta_dynamics != "flat":
            expect = (p, p) if spec.shared_sigma_eta else (m, p, p)
            if self.V is None or self.V.shape != expect:
                raise DomainError(f"V must have shape {expect}")
            Vs = self.V[None] if spec.shared_sigma_eta else self.V
            for L in Vs:
                if np.any(np.triu(L, 1) != 0.0) or np.any(np.diag(L) <= 0.0):
                    raise DomainError("V factors must be lower-triangular with positive diagonal")
        if spec.spatial:
            if self.A is None or self.A.shape != (m, q, q):
                raise DomainError(f"A must have shape {(m, q, q)}")
            if self.phi is None or self.phi.shape != (m, q):
                raise DomainError(f"phi must have shape {(m, q)}")
            bounds = spec.phi_bounds_array(m, q)
            if np.any(self.phi <= bounds[..., 0]) or np.any(self.phi >= bounds[..., 1]):
                raise DomainError("phi must lie strictly inside its prior bounds")
            for j in range(m):
                CoregParams(self.A[j], self.phi[j])  # shape/positivity checks
            if self.w is None or self.w.shape != (m, n * q):
                raise DomainError(f"w must have shape {(m, n * q)}")
            if not np.all(np.isfinite(self.w)):
                raise DomainError("w must be finite")
        else:
            if self.A is not None or self.phi is not None:
                raise DomainError("nonspatial variant must not carry coregionalization parameters")
            if self.w is not None and np.any(self.w != 0.0):
                raise DomainError("nonspatial variant requires w identically zero")


# ---------------------------------------------------------------------------
# Parameter transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdentityTransform:
    def forward(self, c: float) -> float:
        return float(c)

    def inverse(self, u: float) -> float:
        return float(u)

    def log_jacobian(self, u: float) -> float:
        return 0.0


@dataclass(frozen=True)
class LogTransform:
    def forward(self, c: float) -> float:
        if c <= 0.0:
            raise DomainError(f"log transform requires a positive value, got {c}")
        return math.log(c)

    def inverse(self, u: float) -> float:
        return math.exp(u)

    def log_jacobian(self, u: float) -> float:
        return float(u)


@dataclass(frozen=True)
class LogitTransform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DomainError("logit transform needs lo < hi")

    def forward(self, c: float) -> float:
        if not self.lo < c < self.hi:
            raise DomainError(f"value {c} outside open interval ({self.lo}, {self.hi})")
        z = (c - self.lo) / (self.hi - self.lo)
        return math.log(z / (1.0 - z))

    def inverse(self, u: float) -> float:
        return self.lo + (self.hi - self.lo) * float(expit(u))

    def log_jacobian(self, u: float) -> float:
        # d(constrained)/du = (hi - lo) * sigmoid(u) * (1 - sigmoid(u))
        return math.log(self.hi - self.lo) + float(log_expit(u)) + float(log_expit(-u))


IDENTITY = IdentityTransform()
LOG = LogTransform()


@dataclass(frozen=True)
class TransformedParam:
    """A parameter value carried on the unconstrained proposal scale."""

    value: float
    kind: object

    def constrained(self) -> float:
        return self.kind.inverse(self.value)


def transform(value: float, kind) -> float:
    """Map a constrained value to the unconstrained proposal scale."""
    return kind.forward(value)


def inverse_transform(value: float, kind) -> float:
    """Map an unconstrained value back to the constrained support."""
    return kind.inverse(value)


def log_jacobian(value: float, kind) -> float:
    """``log |d(constrained)/d(unconstrained)|`` at an unconstrained value."""
    return kind.log_jacobian(value)


# ---------------------------------------------------------------------------
# Density building blocks
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _iw_norm_const(df: int, d: int, scale_diag: float) -> float:
    """Log normalizing constant of an inverse-Wishart with scale c*I."""
    logdet_scale = d * math.log(scale_diag)
    return 0.5 * df * logdet_scale - 0.5 * df * d * math.log(2.0) - float(
        multigammaln(0.5 * df, d)
    )


def inverse_wishart_logpdf_chol(L: np.ndarray, df: int, scale_diag: float) -> float:
    """Inverse-Wishart log-density at ``X = L L'`` for scale matrix ``c I``."""
    d = L.shape[0]
    diag = np.diag(L)
    logdet_x = 2.0 * float(np.sum(np.log(diag)))
    inv_l = solve_triangular(L, np.eye(d), lower=True, check_finite=False)
    trace_term = scale_diag * float(np.sum(inv_l * inv_l))
    return (
        _iw_norm_const(df, d, scale_diag)
        - 0.5 * (df + d + 1) * logdet_x
        - 0.5 * trace_term
    )


def cholesky_map_log_jacobian(L: np.ndarray) -> float:
    """``log |d(L L')/dL|`` for lower-triangular L with positive diagonal.

    Equals ``d log 2 + sum_i (d - i + 1) log L_ii`` (1-based i).
    """
    d = L.shape[0]
    return d * math.log(2.0) + float(np.sum((d - np.arange(d)) * np.log(np.diag(L))))


def w_as_field(w: np.ndarray, n: int, q: int) -> np.ndarray:
    """Reshape stacked spatial levels ``(m, n*q)`` to ``(q, m, n)``."""
    m = w.shape[0]
    return w.reshape(m, n, q).transpose(2, 0, 1)


def linear_predictor(dataset: Dataset, state: ParamState) -> np.ndarray:
    """``(q, m, n)`` array of log-intensities for the given state.

    The leading ``p`` covariate columns are used, where ``p`` is the width of
    ``state.beta`` (1 for intercept-only variants).
    """
    p = state.beta.shape[-1]
    if p > dataset.p:
        raise DomainError("state has more coefficients than available covariates")
    x = dataset.covariates[..., :p]
    eta = np.einsum("ijkc,ijc->ijk", x, state.beta)
    if state.w is not None:
        eta = eta + w_as_field(state.w, dataset.n, dataset.q)
    return eta


def log_poisson_term(dataset: Dataset, state: ParamState) -> float:
    """Poisson log-kernel ``sum y*eta - exp(eta)`` (the ``y!`` term is omitted).

    Overflow of ``exp`` is reported as ``-inf`` so callers can reject.
    """
    eta = linear_predictor(dataset, state)
    if np.any(eta > ETA_MAX):
        return -math.inf
    return float(np.sum(dataset.counts * eta - np.exp(eta)))


def _diag_normal_logpdf(x: np.ndarray, mean: float, var: float) -> float:
    r = np.asarray(x, dtype=float).ravel() - mean
    k = r.shape[0]
    return -0.5 * (k * (LOG_2PI + math.log(var)) + float(r @ r) / var)


def _tri_normal_logpdf(L: np.ndarray, resid: np.ndarray) -> np.ndarray:
    """Per-column N(0, L L') log-densities for residual columns ``(p, N)``."""
    z = solve_triangular(L, resid, lower=True, check_finite=False)
    p = L.shape[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (p * LOG_2PI + logdet + np.sum(z * z, axis=0))


def log_beta_prior(state: ParamState, spec: ModelSpec) -> float:
    """Log-density of the coefficient layer under the configured dynamics.

    markov: anchor normals plus the class-to-class random walk;
    independent: each class coefficient centered at zero;
    flat: contributes a constant zero (anchor and innovation terms excluded).
    """
    if spec.beta_dynamics == "flat":
        return 0.0
    q, m, p = state.beta.shape
    if spec.beta_dynamics == "markov":
        prev = np.concatenate([state.beta0[:, None, :], state.beta[:, :-1, :]], axis=1)
        resid = state.beta - prev
        total = sum(
            _diag_normal_logpdf(state.beta0[i], spec.m0, spec.sigma0_diag) for i in range(q)
        )
    else:
        resid = state.beta
        total = 0.0
    if spec.shared_sigma_eta:
        cols = resid.reshape(q * m, p).T
        total += float(np.sum(_tri_normal_logpdf(state.V, cols)))
    else:
        for j in range(m):
            cols = resid[:, j, :].T
            total += float(np.sum(_tri_normal_logpdf(state.V[j], cols)))
    return float(total)


def log_hyper_priors(state: ParamState, spec: ModelSpec) -> float:
    """Inverse-Wishart and uniform hyper-prior terms, in the factor parameterization.

    The inverse-Wishart densities are evaluated at the reconstructed matrices
    (``V V'`` and ``A A'``) and carry the change-of-variables Jacobian from
    the matrix to its Cholesky factor, so that the result is a density over
    the sampled factor entries.
    """
    total = 0.0
    if spec.beta_dynamics != "flat":
        p = state.beta.shape[-1]
        r_eta = spec.r_eta_value(p)
        factors = [state.V] if spec.shared_sigma_eta else list(state.V)
        for L in factors:
            total += inverse_wishart_logpdf_chol(L, r_eta, spec.upsilon_eta_scale)
            total += cholesky_map_log_jacobian(L)
    if spec.spatial:
        m, q = state.phi.shape
        r_gamma = spec.r_gamma_value(q)
        bounds = spec.phi_bounds_array(m, q)
        lo, hi = bounds[..., 0], bounds[..., 1]
        if np.any(state.phi <= lo) or np.any(state.phi >= hi):
            return -math.inf
        total -= float(np.sum(np.log(hi - lo)))
        for j in range(m):
            total += inverse_wishart_logpdf_chol(state.A[j], r_gamma, spec.upsilon_gamma_scale)
            total += cholesky_map_log_jacobian(state.A[j])
    return float(total)


def log_spatial_term(dataset: Dataset, state: ParamState) -> float:
    """Sum over classes of ``N(w_j | w_{j-1}, Sigma_j(theta_j))``."""
    total = 0.0
    prev = np.zeros(dataset.n * dataset.q)
    for j in range(dataset.m):
        cov = assemble_block(dataset.sites, state.theta(j))
        total += mvn_logdensity(state.w[j], prev, cov)
        prev = state.w[j]
    return total


def log_joint(dataset: Dataset, state: ParamState, spec: ModelSpec) -> float:
    """Joint log-density of parameters and data (Poisson ``y!`` terms omitted).

    Component failures that a sampler should treat as rejections (exp
    overflow, non-positive-definite spatial covariance, decay rates outside
    their bounds) are returned as ``-inf``.
    """
    state.validate(dataset, spec)
    total = log_poisson_term(dataset, state)
    if total == -math.inf:
        return -math.inf
    total += log_beta_prior(state, spec)
    hyper = log_hyper_priors(state, spec)
    if hyper == -math.inf:
        return -math.inf
    total += hyper
    if spec.spatial:
        try:
            total += log_spatial_term(dataset, state)
        except SingularCovarianceError:
            return -math.inf
    return float(total)
