"""Spatial correlation, coregionalized cross-covariance, and block covariance.

The multivariate covariance between species groups at two sites is built as
``A D(rho) A'`` from a lower-triangular loading matrix ``A`` and a diagonal
of exponential correlations with per-group decay rates.  Stacking all sites
(site-major, species within site) gives the block covariance used by the
Gaussian field terms; Cholesky is the single factorization primitive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .errors import DomainError, SingularCovarianceError

LOG_2PI = float(np.log(2.0 * np.pi))

# Relative tolerance below which two sites are treated as coincident when a
# positive-definite block covariance is requested.
_COINCIDENT_TOL = 1e-12


@dataclass(frozen=True)
class SiteSet:
    """A fixed collection of planar site coordinates.

    coords
        ``(n, 2)`` array of planar coordinates, in the same length unit as
        the decay parameters (1/distance) acting on them.
    ids
        Site labels; generated as ``s1..sn`` when omitted.
    """

    coords: np.ndarray
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise DomainError(f"coords must be an (n, 2) array, got shape {coords.shape}")
        if coords.shape[0] < 1:
            raise DomainError("a SiteSet needs at least one site")
        if not np.all(np.isfinite(coords)):
            raise DomainError("site coordinates must be finite")
        ids = tuple(self.ids) if self.ids else tuple(f"s{k + 1}" for k in range(coords.shape[0]))
        if len(ids) != coords.shape[0]:
            raise DomainError("ids length must match the number of sites")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def pairwise_distances(self) -> np.ndarray:
        return cdist(self.coords, self.coords)

    def distances_to(self, point: np.ndarray) -> np.ndarray:
        point = np.asarray(point, dtype=float).reshape(1, 2)
        return cdist(self.coords, point)[:, 0]

    def require_distinct(self) -> None:
        """Raise if any two sites coincide (up to a tiny relative tolerance)."""
        if self.n == 1:
            return
        d = self.pairwise_distances()
        scale = max(1.0, float(np.max(d)))
        off = d + np.eye(self.n) * (2.0 * scale)
        k, l = np.unravel_index(np.argmin(off), off.shape)
        if off[k, l] <= _COINCIDENT_TOL * scale:
            raise SingularCovarianceError(
                f"sites {self.ids[k]!r} and {self.ids[l]!r} coincide; "
                "a positive-definite block covariance requires distinct sites"
            )


@dataclass(frozen=True)
class CoregParams:
    """Coregionalization parameters for one size class.

    A
        ``(q, q)`` lower-triangular loading matrix with strictly positive
        diagonal; ``A A'`` holds the between-group (co)variances.
    phi
        ``(q,)`` positive decay rates, units 1/distance.
    """

    A: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DomainError(f"A must be square, got shape {A.shape}")
        if phi.shape != (A.shape[0],):
            raise DomainError("phi must have one decay rate per species group")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(phi))):
            raise DomainError("coregionalization parameters must be finite")
        if np.any(np.triu(A, 1) != 0.0):
            raise DomainError("A must be lower-triangular")
        if np.any(np.diag(A) <= 0.0):
            raise DomainError("A must have a strictly positive diagonal")
        if np.any(phi <= 0.0):
            raise DomainError("decay rates must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "phi", phi)

    @property
    def q(self) -> int:
        return self.A.shape[0]


class BlockCovariance:
    """An nq x nq symmetric positive-definite covariance with a lazy Cholesky.

    The factor is computed on first access and cached; instances are
    immutable after construction.
    """

    __slots__ = ("matrix", "dim", "_factor")

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DomainError(f"covariance must be square, got shape {matrix.shape}")
        self.matrix = matrix
        self.dim = matrix.shape[0]
        self._factor = None

    @property
    def factor(self) -> np.ndarray:
        """Lower-triangular Cholesky factor; raises on non-PD input."""
        if self._factor is None:
            try:
                self._factor = np.linalg.cholesky(self.matrix)
            except np.linalg.LinAlgError:
                raise SingularCovarianceError(
                    "covariance factorization failed: matrix is not positive "
                    "definite (rank-deficient loading matrix or near-coincident sites)"
                ) from None
        return self._factor

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``matrix @ x = b`` through the triangular factor."""
        L = self.factor
        z = solve_triangular(L, b, lower=True, check_finite=False)
        return solve_triangular(L.T, z, lower=False, check_finite=False)


def exp_correlation(d, phi):
    """Exponential correlation ``exp(-phi * d)`` at distance ``d >= 0``."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0.0):
        raise DomainError("distance must be nonnegative")
    if not np.all(np.asarray(phi) > 0.0):
        raise DomainError("decay rate must be positive")
    out = np.exp(-np.asarray(phi) * d)
    return float(out) if out.ndim == 0 else out


def effective_range(phi):
    """Distance at which the exponential correlation drops to 0.05.

    Solves ``exp(-phi * d) = 0.05``, i.e. ``d = ln(20) / phi``.
    """
    phi = np.asarray(phi, dtype=float)
    if np.any(phi <= 0.0):
        raise DomainError("decay rate must be positive")
    out = np.log(20.0) / phi
    return float(out) if out.ndim == 0 else out


def cross_covariance(s, t, theta: CoregParams) -> np.ndarray:
    """q x q cross-covariance ``A D(rho(|s-t|)) A'`` between two sites."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    d = float(np.linalg.norm(s - t))
    rho = np.exp(-theta.phi * d)
    return (theta.A * rho) @ theta.A.T


def assemble_block_from_distances(dist: np.ndarray, theta: CoregParams) -> BlockCovariance:
    """Block covariance from a precomputed site distance matrix.

    Ordering is site-major: entry ``(k*q + a, l*q + b)`` is the covariance of
    group ``a`` at site ``k`` with group ``b`` at site ``l``.  The summation
    over loading columns makes the result exactly symmetric.
    """
    n = dist.shape[0]
    q = theta.q
    R = np.exp(-theta.phi[:, None, None] * dist[None, :, :])  # (q, n, n)
    outers = np.einsum("ai,bi->iab", theta.A, theta.A)  # (q, q, q)
    mat = np.einsum("ikl,iab->kalb", R, outers).reshape(n * q, n * q)
    return BlockCovariance(mat)


def assemble_block(sites: SiteSet, theta: CoregParams) -> BlockCovariance:
    """Assemble the nq x nq block covariance over a site set.

    Coincident sites are rejected up front; rank deficiency of the loading
    matrix surfaces when the Cholesky factor is first requested.
    """
    sites.require_distinct()
    return assemble_block_from_distances(sites.pairwise_distances(), theta)


def mvn_logdensity(x: np.ndarray, mean: np.ndarray, cov: BlockCovariance) -> float:
    """Multivariate normal log-density evaluated through the Cholesky factor."""
    x = np.asarray(x, dtype=float).ravel()
    mean = np.asarray(mean, dtype=float).ravel()
    if x.shape != mean.shape or x.shape[0] != cov.dim:
        raise DomainError(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov dim {cov.dim}"
        )
    z = solve_triangular(cov.factor, x - mean, lower=True, check_finite=False)
    return -0.5 * (cov.dim * LOG_2PI + cov.logdet + float(z @ z))
