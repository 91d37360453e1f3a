"""Forward simulator: synthetic datasets with known generating parameters.

Counts are drawn from the same hierarchy the fitting code targets, so a
simulated dataset together with its returned ground-truth state serves as a
verification oracle for fitting, prediction, and assessment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import CoregParams, SiteSet, assemble_block
from .errors import ConfigError, DomainError
from .model import Dataset, ParamState
from .util import derive_rng


@dataclass
class SimConfig:
    """Dimensions, true parameters, and generation knobs for one synthetic draw.

    Explicit ``beta``/``beta0`` paths override the random-walk generation
    (``beta0_mean``/``beta0_sd``/``sigma_eta``).  ``include_w=False`` switches
    the spatial layer off entirely (no loading matrices, decay rates, or
    field levels in the returned truth).
    """

    n: int = 50
    q: int = 2
    m: int = 4
    p: int = 2
    seed: int = 0
    side: float = 2.0
    coords: np.ndarray | None = None
    beta0_mean: np.ndarray | None = None  # (p,) applied to every group; default [1.5, 0, ...]
    beta0_sd: float = 0.3
    sigma_eta: float = 0.01  # innovation variance (scalar -> sigma_eta * I)
    beta0: np.ndarray | None = None  # explicit (q, p) anchors
    beta: np.ndarray | None = None  # explicit (q, m, p) paths
    A: np.ndarray | None = None  # (m, q, q); default diag 0.4, first subdiagonal 0.15
    phi: np.ndarray | None = None  # (m, q); default 3.0
    include_w: bool = True
    covariates: np.ndarray | None = None  # (q, m, n, p) including intercept
    area_factor: float = 1.0

    def validate(self) -> None:
        if min(self.n, self.q, self.m, self.p) < 1:
            raise ConfigError("n, q, m, p must all be at least 1")
        if self.side <= 0:
            raise ConfigError("site square side must be positive")
        if self.beta0_sd < 0 or self.sigma_eta < 0:
            raise ConfigError("generation scales must be nonnegative")


def _default_a(m: int, q: int) -> np.ndarray:
    A = np.zeros((m, q, q))
    for j in range(m):
        A[j] = np.diag(np.full(q, 0.4))
        for r in range(1, q):
            A[j, r, r - 1] = 0.15
    return A


def simulate(config: SimConfig) -> tuple[Dataset, ParamState]:
    """Draw one dataset from the hierarchy; returns it with the generating state.

    Draw order (all from the config seed): site coordinates, covariates,
    coefficient anchors, coefficient innovations, field increments class by
    class, then counts.
    """
    config.validate()
    rng = derive_rng(config.seed)
    n, q, m, p = config.n, config.q, config.m, config.p

    if config.coords is not None:
        coords = np.asarray(config.coords, dtype=float)
        if coords.shape != (n, 2):
            raise ConfigError(f"coords must have shape {(n, 2)}")
    else:
        coords = rng.uniform(0.0, config.side, size=(n, 2))
    sites = SiteSet(coords)

    if config.covariates is not None:
        x = np.asarray(config.covariates, dtype=float)
        if x.shape != (q, m, n, p):
            raise ConfigError(f"covariates must have shape {(q, m, n, p)}")
    else:
        x = np.ones((q, m, n, p))
        if p > 1:
            x[..., 1:] = rng.standard_normal((q, m, n, p - 1))

    sig = np.sqrt(config.sigma_eta)
    v_factor = np.eye(p) * max(sig, 1e-6)
    if config.beta is not None:
        beta = np.asarray(config.beta, dtype=float)
        if beta.shape != (q, m, p):
            raise ConfigError(f"beta must have shape {(q, m, p)}")
        beta0 = (
            np.asarray(config.beta0, dtype=float)
            if config.beta0 is not None
            else beta[:, 0, :].copy()
        )
    else:
        mean0 = np.zeros(p)
        mean0[0] = 1.5
        if config.beta0_mean is not None:
            mean0 = np.broadcast_to(np.asarray(config.beta0_mean, dtype=float), (p,)).copy()
        beta0 = (
            np.asarray(config.beta0, dtype=float)
            if config.beta0 is not None
            else mean0[None, :] + config.beta0_sd * rng.standard_normal((q, p))
        )
        beta = np.empty((q, m, p))
        prev = beta0
        for j in range(m):
            beta[:, j, :] = prev + sig * rng.standard_normal((q, p))
            prev = beta[:, j, :]

    if config.include_w:
        A = np.asarray(config.A, dtype=float) if config.A is not None else _default_a(m, q)
        phi = (
            np.asarray(config.phi, dtype=float)
            if config.phi is not None
            else np.full((m, q), 3.0)
        )
        if A.shape != (m, q, q) or phi.shape != (m, q):
            raise ConfigError("A must be (m, q, q) and phi (m, q)")
        w = np.empty((m, n * q))
        prev_w = np.zeros(n * q)
        for j in range(m):
            try:
                theta = CoregParams(A[j], phi[j])
            except DomainError as exc:
                raise ConfigError(f"invalid generating parameters for class {j + 1}: {exc}") from exc
            cov = assemble_block(sites, theta)
            z = rng.standard_normal(n * q)
            w[j] = prev_w + cov.factor @ z
            prev_w = w[j]
        truth = ParamState(beta=beta, beta0=beta0, V=v_factor, A=A, phi=phi, w=w)
        w_field = w.reshape(m, n, q).transpose(2, 0, 1)
    else:
        truth = ParamState(beta=beta, beta0=beta0, V=v_factor)
        w_field = 0.0

    eta = np.einsum("ijkc,ijc->ijk", x, beta) + w_field
    if np.any(eta > 30.0):
        raise ConfigError(
            "simulated log-intensity exceeds 30; choose smaller parameter scales"
        )
    counts = rng.poisson(np.exp(eta))
    dataset = Dataset(sites=sites, counts=counts, covariates=x, area_factor=config.area_factor)
    return dataset, truth
