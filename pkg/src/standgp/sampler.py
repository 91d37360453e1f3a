"""Adaptive Metropolis-within-Gibbs sampling of the joint posterior.

Each sweep cycles through update blocks in a fixed order: coefficient
anchors, per-class coefficients (classes ascending), innovation-covariance
factor entries, loading-matrix entries, decay rates, then each class's
spatial-effect vector as a single block.  Scalar blocks propose Gaussian
increments on transformed coordinates (log for positive diagonals, logit for
bounded decay rates); each class's spatial effects are proposed jointly with
a Gaussian increment shaped by the class's current covariance and scaled by
one tunable step size.

Step sizes adapt per batch of iterations following Roberts and Rosenthal
(2009): after batch b the log step size moves by ``min(0.01, 1/sqrt(b))``
up or down according to whether the batch acceptance rate exceeded 0.44
(a rate of exactly 0.44 counts as "did not exceed" and decreases the step).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .covariance import LOG_2PI, SingularCovarianceError
from .errors import DataError, DomainError, InitializationError
from .model import (
    ETA_MAX,
    Dataset,
    IDENTITY,
    LOG,
    LogitTransform,
    ModelSpec,
    ParamState,
    cholesky_map_log_jacobian,
    inverse_wishart_logpdf_chol,
)
from .util import derive_rng

ACCEPT_TARGET = 0.44


# ---------------------------------------------------------------------------
# Schedules, blocks, layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Iteration plan for one chain."""

    iters: int
    burnin: int | None = None  # default: 20% of iters
    thin: int = 1
    batch: int = 50

    def __post_init__(self):
        if self.iters < 0:
            raise DomainError("iters must be nonnegative")
        if self.thin < 1 or self.batch < 1:
            raise DomainError("thin and batch must be at least 1")
        if self.burnin is not None and not 0 <= self.burnin <= self.iters:
            raise DomainError("burnin must lie in [0, iters]")

    @property
    def resolved_burnin(self) -> int:
        return self.burnin if self.burnin is not None else self.iters // 5


@dataclass(frozen=True)
class UpdateBlock:
    """One unit of the Gibbs sweep.

    indices
        The scalar state coordinates this block updates (one for scalar
        blocks; all nq field entries for a vector block).
    transforms
        Proposal-scale transforms, one per proposal coordinate.  Vector
        blocks carry a single identity entry (isotropic proposal).
    gamma
        Step scales, one per proposal coordinate.
    """

    label: str
    kind: str  # "scalar" | "vector"
    indices: tuple
    transforms: tuple
    gamma: np.ndarray

    def __post_init__(self):
        if self.kind not in ("scalar", "vector"):
            raise DomainError(f"unknown block kind {self.kind!r}")
        if np.any(np.asarray(self.gamma) <= 0):
            raise DomainError("step scales must be positive")


@dataclass(frozen=True)
class ParamLayout:
    """Canonical flattening of a ParamState for storage and diagnostics."""

    q: int
    m: int
    n: int
    p: int
    dynamics: str
    shared_sigma_eta: bool
    spatial: bool

    @classmethod
    def from_model(cls, dataset: Dataset, spec: ModelSpec) -> "ParamLayout":
        return cls(
            q=dataset.q,
            m=dataset.m,
            n=dataset.n,
            p=spec.effective_p(dataset),
            dynamics=spec.beta_dynamics,
            shared_sigma_eta=spec.shared_sigma_eta,
            spatial=spec.spatial,
        )

    def coords(self) -> list[tuple]:
        q, m, n, p = self.q, self.m, self.n, self.p
        out: list[tuple] = []
        if self.dynamics == "markov":
            out += [("beta0", i, c) for i in range(q) for c in range(p)]
        out += [("beta", i, j, c) for j in range(m) for i in range(q) for c in range(p)]
        if self.dynamics != "flat":
            tri = [(r, c) for r in range(p) for c in range(r + 1)]
            if self.shared_sigma_eta:
                out += [("V", -1, r, c) for r, c in tri]
            else:
                out += [("V", j, r, c) for j in range(m) for r, c in tri]
        if self.spatial:
            tri = [(r, c) for r in range(q) for c in range(r + 1)]
            out += [("A", j, r, c) for j in range(m) for r, c in tri]
            out += [("phi", j, i) for j in range(m) for i in range(q)]
            out += [("w", j, t) for j in range(m) for t in range(n * q)]
        return out

    def names(self) -> list[str]:
        return [coord_name(c, self.q) for c in self.coords()]

    @property
    def size(self) -> int:
        q, m, n, p = self.q, self.m, self.n, self.p
        total = q * m * p
        if self.dynamics == "markov":
            total += q * p
        if self.dynamics != "flat":
            total += (p * (p + 1) // 2) * (1 if self.shared_sigma_eta else m)
        if self.spatial:
            total += m * (q * (q + 1) // 2) + m * q + m * n * q
        return total

    def flatten(self, state: ParamState) -> np.ndarray:
        q, m, p = self.q, self.m, self.p
        parts = []
        if self.dynamics == "markov":
            parts.append(state.beta0.ravel())
        parts.append(state.beta.transpose(1, 0, 2).ravel())
        if self.dynamics != "flat":
            tl = np.tril_indices(p)
            if self.shared_sigma_eta:
                parts.append(state.V[tl])
            else:
                parts.append(np.concatenate([state.V[j][tl] for j in range(m)]))
        if self.spatial:
            tl = np.tril_indices(q)
            parts.append(np.concatenate([state.A[j][tl] for j in range(m)]))
            parts.append(state.phi.ravel())
            parts.append(state.w.ravel())
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> ParamState:
        q, m, n, p = self.q, self.m, self.n, self.p
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise DomainError(f"expected a vector of length {self.size}, got {vec.shape}")
        pos = 0

        def take(k):
            nonlocal pos
            out = vec[pos : pos + k]
            pos += k
            return out

        beta0 = None
        if self.dynamics == "markov":
            beta0 = take(q * p).reshape(q, p).copy()
        beta = take(m * q * p).reshape(m, q, p).transpose(1, 0, 2).copy()
        V = None
        if self.dynamics != "flat":
            tl = np.tril_indices(p)
            npar = p * (p + 1) // 2
            if self.shared_sigma_eta:
                V = np.zeros((p, p))
                V[tl] = take(npar)
            else:
                V = np.zeros((m, p, p))
                for j in range(m):
                    V[j][tl] = take(npar)
        A = phi = w = None
        if self.spatial:
            tl = np.tril_indices(q)
            npar = q * (q + 1) // 2
            A = np.zeros((m, q, q))
            for j in range(m):
                A[j][tl] = take(npar)
            phi = take(m * q).reshape(m, q).copy()
            w = take(m * n * q).reshape(m, n * q).copy()
        return ParamState(beta=beta, beta0=beta0, V=V, A=A, phi=phi, w=w)


def coord_name(coord: tuple, q: int) -> str:
    fam = coord[0]
    if fam == "beta0":
        return f"beta[{coord[1] + 1}][0][{coord[2] + 1}]"
    if fam == "beta":
        return f"beta[{coord[1] + 1}][{coord[2] + 1}][{coord[3] + 1}]"
    if fam == "V":
        if coord[1] < 0:
            return f"V[{coord[2] + 1}][{coord[3] + 1}]"
        return f"V[{coord[1] + 1}][{coord[2] + 1}][{coord[3] + 1}]"
    if fam == "A":
        return f"A[{coord[1] + 1}][{coord[2] + 1}][{coord[3] + 1}]"
    if fam == "phi":
        return f"phi[{coord[2] + 1}][{coord[1] + 1}]"  # species-first naming
    if fam == "w":
        k, i = divmod(coord[2], q)
        return f"w[{coord[1] + 1}][{k + 1}][{i + 1}]"
    raise DomainError(f"unknown coordinate family {fam!r}")


def build_blocks(dataset: Dataset, spec: ModelSpec) -> list[UpdateBlock]:
    """Update blocks in sweep order, with fresh default step scales.

    Scalar blocks start at step scale 1; spatial-vector blocks start at the
    optimal-scaling heuristic ``2.38 / sqrt(nq)`` so that early batches are
    not dominated by wholesale rejections of the field proposals.
    """
    layout = ParamLayout.from_model(dataset, spec)
    q, m, n = layout.q, layout.m, layout.n
    bounds = spec.phi_bounds_array(m, q) if spec.spatial else None
    blocks: list[UpdateBlock] = []
    for coord in layout.coords():
        fam = coord[0]
        if fam == "w":
            continue
        if fam in ("V", "A") and coord[2] == coord[3]:
            tr = LOG
        elif fam == "phi":
            j, i = coord[1], coord[2]
            tr = LogitTransform(float(bounds[j, i, 0]), float(bounds[j, i, 1]))
        else:
            tr = IDENTITY
        blocks.append(
            UpdateBlock(
                label=coord_name(coord, q),
                kind="scalar",
                indices=(coord,),
                transforms=(tr,),
                gamma=np.array([1.0]),
            )
        )
    if spec.spatial:
        nq = n * q
        for j in range(m):
            blocks.append(
                UpdateBlock(
                    label=f"w[{j + 1}]",
                    kind="vector",
                    indices=tuple(("w", j, t) for t in range(nq)),
                    transforms=(IDENTITY,),
                    gamma=np.array([2.38 / math.sqrt(nq)]),
                )
            )
    return blocks


def check_partition(blocks: list[UpdateBlock], dataset: Dataset, spec: ModelSpec) -> None:
    """Every state coordinate must belong to exactly one block."""
    layout = ParamLayout.from_model(dataset, spec)
    want = layout.coords()
    got: list[tuple] = []
    for b in blocks:
        got.extend(b.indices)
    if len(got) != len(set(got)):
        raise DomainError("update blocks overlap")
    if set(got) != set(want):
        raise DomainError("update blocks do not cover the parameter vector")


def adaptation_delta(b: int) -> float:
    """Batch-b log-step adjustment magnitude ``min(0.01, 1/sqrt(b))``."""
    if b < 1:
        raise DomainError("batch index must be at least 1")
    return min(0.01, 1.0 / math.sqrt(b))


def adapt(block: UpdateBlock, batch_accept_rate: float, batch_index: int) -> UpdateBlock:
    """Multiplicative step-size update after one batch.

    The step grows when the batch acceptance rate exceeds the 0.44 target
    and shrinks otherwise; a rate of exactly 0.44 shrinks.
    """
    if not 0.0 <= batch_accept_rate <= 1.0:
        raise DomainError("acceptance rate must lie in [0, 1]")
    delta = adaptation_delta(batch_index)
    sign = 1.0 if batch_accept_rate > ACCEPT_TARGET else -1.0
    return replace(block, gamma=block.gamma * math.exp(sign * delta))


def random_walk_step(logpdf, x, gamma, rng):
    """One Gaussian random-walk Metropolis update on an unconstrained target.

    Returns ``(next_x, accepted)``.  Used directly by stand-in-target
    diagnostics; the model sampler shares the same accept rule.
    """
    x = np.asarray(x, dtype=float)
    prop = x + gamma * rng.standard_normal(x.shape)
    log_ratio = logpdf(prop) - logpdf(x)
    if math.log(rng.random()) < log_ratio:
        return prop, True
    return x, False


# ---------------------------------------------------------------------------
# Cached evaluation context
# ---------------------------------------------------------------------------


def _mvn_chol(L: np.ndarray, logdet: float, diff: np.ndarray) -> float:
    z = solve_triangular(L, diff, lower=True, check_finite=False)
    return -0.5 * (diff.shape[0] * LOG_2PI + logdet + float(z @ z))


def _poisson_cell(y_row: np.ndarray, eta_row: np.ndarray) -> float:
    if np.max(eta_row) > ETA_MAX:
        return -math.inf
    return float(y_row @ eta_row - np.exp(eta_row).sum())


def _block_matrix(dist: np.ndarray, A: np.ndarray, phi: np.ndarray) -> np.ndarray:
    R = np.exp(-phi[:, None, None] * dist[None, :, :])
    outers = np.einsum("ai,bi->iab", A, A)
    n = dist.shape[0]
    qq = A.shape[0]
    return np.einsum("ikl,iab->kalb", R, outers).reshape(n * qq, n * qq)


class _Ctx:
    """Mutable per-chain cache of log-density components.

    The cached pieces partition the joint log-density, so each block update
    recomputes only the terms it touches; their sum is the retained trace
    value.
    """

    __slots__ = (
        "dataset",
        "spec",
        "layout",
        "x",
        "y",
        "dist",
        "bounds",
        "r_eta",
        "r_gamma",
        "eta",
        "lik",
        "beta_terms",
        "sigma_prior",
        "theta_prior",
        "wterm",
        "chol",
        "logdet",
        "vinv",
        "v_logdet",
    )

    @classmethod
    def build(cls, dataset: Dataset, spec: ModelSpec, state: ParamState) -> "_Ctx":
        state.validate(dataset, spec)
        self = cls()
        self.dataset = dataset
        self.spec = spec
        self.layout = ParamLayout.from_model(dataset, spec)
        q, m, n, p = self.layout.q, self.layout.m, self.layout.n, self.layout.p
        self.x = dataset.covariates[..., :p]
        self.y = dataset.counts.astype(float)
        self.dist = dataset.sites.pairwise_distances() if spec.spatial else None
        self.bounds = spec.phi_bounds_array(m, q) if spec.spatial else None
        self.r_eta = spec.r_eta_value(p) if spec.beta_dynamics != "flat" else 0
        self.r_gamma = spec.r_gamma_value(q) if spec.spatial else 0

        eta = np.einsum("ijkc,ijc->ijk", self.x, state.beta)
        if spec.spatial:
            eta = eta + state.w.reshape(m, n, q).transpose(2, 0, 1)
        self.eta = eta
        self.lik = np.empty((q, m))
        for i in range(q):
            for j in range(m):
                self.lik[i, j] = _poisson_cell(self.y[i, j], eta[i, j])

        if spec.beta_dynamics != "flat":
            self._set_v_cache(state.V)
            self.beta_terms = self._all_beta_terms(state)
            self.sigma_prior = self._sigma_prior_values(state.V)
        else:
            self.vinv = None
            self.v_logdet = None
            self.beta_terms = np.zeros((q, m + 1))
            self.sigma_prior = np.zeros(0)

        if spec.spatial:
            self.chol = [None] * m
            self.logdet = np.zeros(m)
            self.wterm = np.zeros(m)
            self.theta_prior = np.zeros(m)
            prev = np.zeros(n * q)
            for j in range(m):
                mat = _block_matrix(self.dist, state.A[j], state.phi[j])
                try:
                    L = np.linalg.cholesky(mat)
                except np.linalg.LinAlgError:
                    raise InitializationError(
                        f"initial spatial covariance for class {j + 1} is not positive definite"
                    ) from None
                self.chol[j] = L
                self.logdet[j] = 2.0 * float(np.sum(np.log(np.diag(L))))
                self.wterm[j] = _mvn_chol(L, self.logdet[j], state.w[j] - prev)
                self.theta_prior[j] = self._theta_prior_value(state.A[j], state.phi[j], j)
                prev = state.w[j]
        else:
            self.chol = []
            self.logdet = np.zeros(0)
            self.wterm = np.zeros(0)
            self.theta_prior = np.zeros(0)

        if not math.isfinite(self.total()):
            raise InitializationError("joint log-density is not finite at the initial state")
        return self

    # -- cached-term helpers ------------------------------------------------

    def _set_v_cache(self, V: np.ndarray) -> None:
        p = self.layout.p
        eye = np.eye(p)
        if self.spec.shared_sigma_eta:
            self.vinv = solve_triangular(V, eye, lower=True, check_finite=False)
            self.v_logdet = 2.0 * float(np.sum(np.log(np.diag(V))))
        else:
            self.vinv = np.stack(
                [solve_triangular(V[j], eye, lower=True, check_finite=False) for j in range(self.layout.m)]
            )
            self.v_logdet = np.array(
                [2.0 * float(np.sum(np.log(np.diag(V[j])))) for j in range(self.layout.m)]
            )

    def _v_pair(self, j: int, vinv=None, v_logdet=None):
        """Inverse factor and log-determinant applying to class j (0-based)."""
        vinv = self.vinv if vinv is None else vinv
        v_logdet = self.v_logdet if v_logdet is None else v_logdet
        if self.spec.shared_sigma_eta:
            return vinv, v_logdet
        return vinv[j], v_logdet[j]

    def _walk_resid(self, state: ParamState) -> np.ndarray:
        if self.spec.beta_dynamics == "markov":
            prev = np.concatenate([state.beta0[:, None, :], state.beta[:, :-1, :]], axis=1)
            return state.beta - prev
        return state.beta

    def _anchor_term(self, b0_row: np.ndarray) -> float:
        r = b0_row - self.spec.m0
        p = r.shape[0]
        return -0.5 * (
            p * (LOG_2PI + math.log(self.spec.sigma0_diag))
            + float(r @ r) / self.spec.sigma0_diag
        )

    def _walk_term(self, resid: np.ndarray, j: int, vinv=None, v_logdet=None) -> float:
        vi, vl = self._v_pair(j, vinv, v_logdet)
        z = vi @ resid
        return -0.5 * (resid.shape[0] * LOG_2PI + vl + float(z @ z))

    def _all_beta_terms(self, state: ParamState, vinv=None, v_logdet=None) -> np.ndarray:
        """(q, m+1) per-term coefficient-layer log-densities (column 0: anchors)."""
        q, m, p = self.layout.q, self.layout.m, self.layout.p
        out = np.zeros((q, m + 1))
        if self.spec.beta_dynamics == "flat":
            return out
        if self.spec.beta_dynamics == "markov":
            for i in range(q):
                out[i, 0] = self._anchor_term(state.beta0[i])
        resid = self._walk_resid(state)
        if self.spec.shared_sigma_eta:
            vi, vl = self._v_pair(0, vinv, v_logdet)
            cols = resid.reshape(q * m, p).T
            z = vi @ cols
            vals = -0.5 * (p * LOG_2PI + vl + np.sum(z * z, axis=0))
            out[:, 1:] = vals.reshape(q, m)
        else:
            for j in range(m):
                vi, vl = self._v_pair(j, vinv, v_logdet)
                z = vi @ resid[:, j, :].T
                out[:, j + 1] = -0.5 * (p * LOG_2PI + vl + np.sum(z * z, axis=0))
        return out

    def _sigma_prior_values(self, V: np.ndarray) -> np.ndarray:
        scale = self.spec.upsilon_eta_scale
        if self.spec.shared_sigma_eta:
            return np.array(
                [inverse_wishart_logpdf_chol(V, self.r_eta, scale) + cholesky_map_log_jacobian(V)]
            )
        return np.array(
            [
                inverse_wishart_logpdf_chol(V[j], self.r_eta, scale)
                + cholesky_map_log_jacobian(V[j])
                for j in range(self.layout.m)
            ]
        )

    def _theta_prior_value(self, A_j: np.ndarray, phi_j: np.ndarray, j: int) -> float:
        lo = self.bounds[j, :, 0]
        hi = self.bounds[j, :, 1]
        if np.any(phi_j <= lo) or np.any(phi_j >= hi):
            return -math.inf
        val = inverse_wishart_logpdf_chol(A_j, self.r_gamma, self.spec.upsilon_gamma_scale)
        val += cholesky_map_log_jacobian(A_j)
        val -= float(np.sum(np.log(hi - lo)))
        return val

    def total(self) -> float:
        return float(
            self.lik.sum()
            + self.beta_terms.sum()
            + self.sigma_prior.sum()
            + self.theta_prior.sum()
            + self.wterm.sum()
        )


def _get_coord(state: ParamState, coord: tuple) -> float:
    fam = coord[0]
    if fam == "beta0":
        return float(state.beta0[coord[1], coord[2]])
    if fam == "beta":
        return float(state.beta[coord[1], coord[2], coord[3]])
    if fam == "V":
        if coord[1] < 0:
            return float(state.V[coord[2], coord[3]])
        return float(state.V[coord[1], coord[2], coord[3]])
    if fam == "A":
        return float(state.A[coord[1], coord[2], coord[3]])
    if fam == "phi":
        return float(state.phi[coord[1], coord[2]])
    if fam == "w":
        return float(state.w[coord[1], coord[2]])
    raise DomainError(f"unknown coordinate family {fam!r}")


# ---------------------------------------------------------------------------
# Block updates
# ---------------------------------------------------------------------------


def _scalar_update(ctx: _Ctx, state: ParamState, block: UpdateBlock, rng) -> bool:
    coord = block.indices[0]
    fam = coord[0]
    tr = block.transforms[0]
    cur = _get_coord(state, coord)
    u = tr.forward(cur)
    u_new = u + float(block.gamma[0]) * rng.standard_normal()
    cand = tr.inverse(u_new)
    jac = tr.log_jacobian(u_new) - tr.log_jacobian(u)

    m = ctx.layout.m
    if fam == "beta0":
        i, c = coord[1], coord[2]
        b0 = state.beta0[i].copy()
        b0[c] = cand
        t0 = ctx._anchor_term(b0)
        t1 = ctx._walk_term(state.beta[i, 0] - b0, 0)
        delta = (t0 - ctx.beta_terms[i, 0]) + (t1 - ctx.beta_terms[i, 1])
        if math.log(rng.random()) < delta + jac:
            state.beta0[i, c] = cand
            ctx.beta_terms[i, 0] = t0
            ctx.beta_terms[i, 1] = t1
            return True
        return False

    if fam == "beta":
        i, j, c = coord[1], coord[2], coord[3]
        eta_new = ctx.eta[i, j] + ctx.x[i, j, :, c] * (cand - cur)
        lik_new = _poisson_cell(ctx.y[i, j], eta_new)
        delta = lik_new - ctx.lik[i, j]
        dyn = ctx.spec.beta_dynamics
        t_here = t_next = None
        if dyn != "flat":
            b_new = state.beta[i, j].copy()
            b_new[c] = cand
            if dyn == "markov":
                prev = state.beta0[i] if j == 0 else state.beta[i, j - 1]
                t_here = ctx._walk_term(b_new - prev, j)
            else:
                t_here = ctx._walk_term(b_new, j)
            delta += t_here - ctx.beta_terms[i, j + 1]
            if dyn == "markov" and j + 1 < m:
                t_next = ctx._walk_term(state.beta[i, j + 1] - b_new, j + 1)
                delta += t_next - ctx.beta_terms[i, j + 2]
        if math.log(rng.random()) < delta + jac:
            state.beta[i, j, c] = cand
            ctx.eta[i, j] = eta_new
            ctx.lik[i, j] = lik_new
            if t_here is not None:
                ctx.beta_terms[i, j + 1] = t_here
            if t_next is not None:
                ctx.beta_terms[i, j + 2] = t_next
            return True
        return False

    if fam == "V":
        jv, r, c = coord[1], coord[2], coord[3]
        p = ctx.layout.p
        eye = np.eye(p)
        if ctx.spec.shared_sigma_eta:
            v_new = state.V.copy()
            v_new[r, c] = cand
            vinv_new = solve_triangular(v_new, eye, lower=True, check_finite=False)
            v_logdet_new = 2.0 * float(np.sum(np.log(np.diag(v_new))))
            bt_new = ctx._all_beta_terms(state, vinv=vinv_new, v_logdet=v_logdet_new)
            sp_new = inverse_wishart_logpdf_chol(
                v_new, ctx.r_eta, ctx.spec.upsilon_eta_scale
            ) + cholesky_map_log_jacobian(v_new)
            delta = (bt_new[:, 1:].sum() - ctx.beta_terms[:, 1:].sum()) + (
                sp_new - ctx.sigma_prior[0]
            )
            if math.log(rng.random()) < delta + jac:
                state.V[r, c] = cand
                ctx.vinv = vinv_new
                ctx.v_logdet = v_logdet_new
                ctx.beta_terms[:, 1:] = bt_new[:, 1:]
                ctx.sigma_prior[0] = sp_new
                return True
            return False
        vj_new = state.V[jv].copy()
        vj_new[r, c] = cand
        vinv_j = solve_triangular(vj_new, eye, lower=True, check_finite=False)
        vld_j = 2.0 * float(np.sum(np.log(np.diag(vj_new))))
        resid = ctx._walk_resid(state)[:, jv, :]
        z = vinv_j @ resid.T
        bt_col = -0.5 * (p * LOG_2PI + vld_j + np.sum(z * z, axis=0))
        sp_new = inverse_wishart_logpdf_chol(
            vj_new, ctx.r_eta, ctx.spec.upsilon_eta_scale
        ) + cholesky_map_log_jacobian(vj_new)
        delta = (bt_col.sum() - ctx.beta_terms[:, jv + 1].sum()) + (
            sp_new - ctx.sigma_prior[jv]
        )
        if math.log(rng.random()) < delta + jac:
            state.V[jv, r, c] = cand
            ctx.vinv[jv] = vinv_j
            ctx.v_logdet[jv] = vld_j
            ctx.beta_terms[:, jv + 1] = bt_col
            ctx.sigma_prior[jv] = sp_new
            return True
        return False

    if fam in ("A", "phi"):
        j = coord[1]
        if fam == "A":
            a_new = state.A[j].copy()
            a_new[coord[2], coord[3]] = cand
            phi_new = state.phi[j]
        else:
            a_new = state.A[j]
            phi_new = state.phi[j].copy()
            phi_new[coord[2]] = cand
        mat = _block_matrix(ctx.dist, a_new, phi_new)
        try:
            L = np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            return False  # proposal breaks positive definiteness: reject
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        prev = state.w[j - 1] if j > 0 else np.zeros_like(state.w[j])
        wt_new = _mvn_chol(L, logdet, state.w[j] - prev)
        tp_new = ctx._theta_prior_value(a_new, phi_new, j)
        delta = (wt_new - ctx.wterm[j]) + (tp_new - ctx.theta_prior[j])
        if math.log(rng.random()) < delta + jac:
            if fam == "A":
                state.A[j, coord[2], coord[3]] = cand
            else:
                state.phi[j, coord[2]] = cand
            ctx.chol[j] = L
            ctx.logdet[j] = logdet
            ctx.wterm[j] = wt_new
            ctx.theta_prior[j] = tp_new
            return True
        return False

    raise DomainError(f"unexpected scalar block family {fam!r}")


def _vector_update(ctx: _Ctx, state: ParamState, block: UpdateBlock, rng) -> bool:
    j = block.indices[0][1]
    q, m, n = ctx.layout.q, ctx.layout.m, ctx.layout.n
    nq = n * q
    # Proposal increment ~ N(0, gamma^2 Sigma_j): shaping the step by the
    # class's current covariance factor keeps acceptance workable when the
    # field covariance is strongly anisotropic (an isotropic step would need
    # a scale matched to the smallest eigenvalue and never move the large
    # modes).  The factor is symmetric in (current, proposed), so no
    # proposal-ratio correction is needed.
    step = float(block.gamma[0]) * (ctx.chol[j] @ rng.standard_normal(nq))
    w_new = state.w[j] + step
    eta_new = ctx.eta[:, j, :] + step.reshape(n, q).T
    lik_new = np.array([_poisson_cell(ctx.y[i, j], eta_new[i]) for i in range(q)])
    prev = state.w[j - 1] if j > 0 else np.zeros(nq)
    wt_new = _mvn_chol(ctx.chol[j], ctx.logdet[j], w_new - prev)
    delta = lik_new.sum() - ctx.lik[:, j].sum() + wt_new - ctx.wterm[j]
    wt_next = None
    if j + 1 < m:
        wt_next = _mvn_chol(ctx.chol[j + 1], ctx.logdet[j + 1], state.w[j + 1] - w_new)
        delta += wt_next - ctx.wterm[j + 1]
    if math.log(rng.random()) < delta:
        state.w[j] = w_new
        ctx.eta[:, j, :] = eta_new
        ctx.lik[:, j] = lik_new
        ctx.wterm[j] = wt_new
        if wt_next is not None:
            ctx.wterm[j + 1] = wt_next
        return True
    return False


def _apply_block(ctx: _Ctx, state: ParamState, block: UpdateBlock, rng) -> bool:
    if block.kind == "scalar":
        return _scalar_update(ctx, state, block, rng)
    return _vector_update(ctx, state, block, rng)


def metropolis_step(
    state: ParamState,
    block: UpdateBlock,
    dataset: Dataset,
    spec: ModelSpec,
    rng,
) -> tuple[ParamState, bool]:
    """One Metropolis update of a single block against its full conditional.

    Returns the (possibly new) state and the acceptance flag; on rejection
    the returned state is the input object, untouched.  ``run_chain`` uses a
    persistent evaluation cache instead of rebuilding one per call.
    """
    work = state.copy()
    ctx = _Ctx.build(dataset, spec, work)
    accepted = _apply_block(ctx, work, block, rng)
    return (work, True) if accepted else (state, False)


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------


@dataclass
class ChainStore:
    """Retained draws plus acceptance bookkeeping for one chain."""

    layout: ParamLayout
    names: list[str]
    draws: np.ndarray  # (n_draws, n_params)
    log_joint: np.ndarray
    iterations: np.ndarray
    acceptance: np.ndarray  # (n_batches, n_blocks) accepted proposal counts
    block_labels: list[str]
    batch_size: int
    chain_id: int
    total_iters: int
    burnin: int
    thin: int
    final_state: ParamState | None = None
    final_gamma: np.ndarray | None = None  # per-block step scales after adaptation

    def __post_init__(self):
        expected = max(0, (self.total_iters - self.burnin)) // self.thin
        if self.draws.shape[0] != expected:
            raise DomainError(
                f"retained draw count {self.draws.shape[0]} does not match "
                f"(total - burnin) / thin = {expected}"
            )
        if self.acceptance.size and np.any(self.acceptance > self.batch_size):
            raise DomainError("acceptance counts cannot exceed the batch size")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            idx = self.names.index(name)
        except ValueError:
            raise DomainError(f"no parameter named {name!r} in this chain") from None
        return self.draws[:, idx]

    def state_at(self, row: int) -> ParamState:
        return self.layout.unflatten(self.draws[row])


def initial_state(
    dataset: Dataset, spec: ModelSpec, rng, overdispersion: float = 0.0
) -> ParamState:
    """Moment-matched chain start with optional overdispersion jitter.

    Intercepts start at per-cell mean log counts and slopes at zero; the
    field starts at the centered log-count residuals with loading diagonals
    matched to the residual increment scale; decay rates start at the
    support midpoint.  A cold start (zero field, tiny loadings) takes tens
    of thousands of sweeps to grow the field scale, because the field and
    its loadings only inform each other through small coordinate moves;
    starting at the data moments removes that transient while keeping all
    intensities finite.  ``overdispersion > 0`` jitters every component so
    that multiple chains start apart.
    """
    q, m, n = dataset.q, dataset.m, dataset.n
    p = spec.effective_p(dataset)
    od = float(overdispersion)

    log_counts = np.log(dataset.counts + 0.5)  # (q, m, n)
    intercept = log_counts.mean(axis=2)  # (q, m)
    resid = log_counts - intercept[:, :, None]

    beta = np.zeros((q, m, p))
    beta[:, :, 0] = intercept
    if od > 0:
        beta = beta + 0.1 * od * rng.standard_normal((q, m, p))
    beta0 = None
    if spec.beta_dynamics == "markov":
        beta0 = beta[:, 0, :].copy()
        if od > 0:
            beta0 = beta0 + 0.1 * od * rng.standard_normal((q, p))
    V = None
    if spec.beta_dynamics != "flat":
        def factor():
            d = np.full(p, 0.1)
            if od > 0:
                d = d * np.exp(od * rng.standard_normal(p))
            return np.diag(d)

        V = factor() if spec.shared_sigma_eta else np.stack([factor() for _ in range(m)])
    A = phi = w = None
    if spec.spatial:
        w = resid.transpose(1, 2, 0).reshape(m, n * q).copy()
        if od > 0:
            w = w + 0.1 * od * rng.standard_normal((m, n * q))
        A = np.zeros((m, q, q))
        prev = np.zeros(n * q)
        for j in range(m):
            scale = float(np.std(w[j] - prev))
            scale = min(max(scale, 0.05), 2.0)
            if od > 0:
                d = scale * np.exp(od * rng.standard_normal(q))
            else:
                d = np.full(q, scale)
            A[j] = np.diag(np.clip(d, 0.05, 2.0))
            prev = w[j]
        bounds = spec.phi_bounds_array(m, q)
        lo, hi = bounds[..., 0], bounds[..., 1]
        if od > 0:
            z = od * rng.standard_normal((m, q))
            phi = lo + (hi - lo) / (1.0 + np.exp(-z))
        else:
            phi = 0.5 * (lo + hi)
    return ParamState(beta=beta, beta0=beta0, V=V, A=A, phi=phi, w=w)


def run_chain(
    dataset: Dataset,
    spec: ModelSpec,
    init: ParamState,
    schedule: Schedule,
    seed,
    chain_id: int = 1,
) -> ChainStore:
    """Run one adaptive chain; fully reproducible given the seed.

    ``seed`` may be an integer, a SeedSequence, or a Generator.  Proposals
    consume randomness in sweep order, so results are independent of any
    internal parallelism in the linear algebra.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocks = build_blocks(dataset, spec)
    check_partition(blocks, dataset, spec)
    state = init.copy()
    ctx = _Ctx.build(dataset, spec, state)

    burnin = schedule.resolved_burnin
    if burnin > schedule.iters:
        raise DomainError("burnin exceeds the iteration count")
    n_blocks = len(blocks)
    accepted = np.zeros(n_blocks, dtype=np.int64)
    acc_rows = []
    rows, ljs, its = [], [], []
    batch_index = 1
    for t in range(1, schedule.iters + 1):
        for bi in range(n_blocks):
            if _apply_block(ctx, state, blocks[bi], rng):
                accepted[bi] += 1
        if t % schedule.batch == 0:
            rates = accepted / schedule.batch
            blocks = [adapt(blocks[bi], float(rates[bi]), batch_index) for bi in range(n_blocks)]
            acc_rows.append(accepted.copy())
            accepted = np.zeros(n_blocks, dtype=np.int64)
            batch_index += 1
        if t > burnin and (t - burnin) % schedule.thin == 0:
            rows.append(ctx.layout.flatten(state))
            ljs.append(ctx.total())
            its.append(t)

    n_params = ctx.layout.size
    return ChainStore(
        layout=ctx.layout,
        names=ctx.layout.names(),
        draws=np.array(rows).reshape(len(rows), n_params),
        log_joint=np.array(ljs),
        iterations=np.array(its, dtype=np.int64),
        acceptance=np.array(acc_rows, dtype=np.int64).reshape(len(acc_rows), n_blocks),
        block_labels=[b.label for b in blocks],
        batch_size=schedule.batch,
        chain_id=chain_id,
        total_iters=schedule.iters,
        burnin=burnin,
        thin=schedule.thin,
        final_state=state,
        final_gamma=np.array([float(b.gamma[0]) for b in blocks]),
    )


def _chain_task(args) -> ChainStore:
    dataset, spec, schedule, seed, chain_id, overdispersion = args
    rng = derive_rng(seed, 1, chain_id)
    init = initial_state(dataset, spec, rng, overdispersion=overdispersion)
    return run_chain(dataset, spec, init, schedule, rng, chain_id=chain_id)


def run_chains(
    dataset: Dataset,
    spec: ModelSpec,
    schedule: Schedule,
    seed: int,
    chains: int = 3,
    overdispersion: float = 0.5,
    workers: int | None = None,
) -> list[ChainStore]:
    """Run several chains with overdispersed starts and independent sub-seeds.

    Chain c draws from sub-stream ``(1, c)`` of the root seed, so the result
    does not depend on whether chains run serially or in parallel.
    """
    if chains < 1:
        raise DomainError("chain count must be at least 1")
    args = [(dataset, spec, schedule, seed, c, overdispersion) for c in range(1, chains + 1)]
    n_workers = workers if workers is not None else (os.cpu_count() or 1)
    n_workers = min(chains, max(1, n_workers))
    if chains == 1 or n_workers == 1:
        return [_chain_task(a) for a in args]
    try:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            return list(ex.map(_chain_task, args))
    except InitializationError:
        raise
    except (OSError, RuntimeError):
        # Pools can be unavailable in restricted environments; fall back.
        return [_chain_task(a) for a in args]


# ---------------------------------------------------------------------------
# Posterior-sample files
# ---------------------------------------------------------------------------


def save_chain_csv(store: ChainStore, path: str) -> None:
    """Columnar posterior-samples file: iteration, chain, parameters, log_joint."""
    import pandas as pd

    data = {
        "iteration": store.iterations,
        "chain": np.full(store.n_draws, store.chain_id, dtype=np.int64),
    }
    for k, name in enumerate(store.names):
        data[name] = store.draws[:, k]
    data["log_joint"] = store.log_joint
    frame = pd.DataFrame(data)
    tmp = path + ".tmp~"
    frame.to_csv(tmp, index=False)
    os.replace(tmp, path)


def load_chain_csv(path: str, layout: ParamLayout) -> ChainStore:
    """Read a posterior-samples file back into a ChainStore (draws only)."""
    import pandas as pd

    frame = pd.read_csv(path)
    want = layout.names()
    cols = list(frame.columns)
    if cols[:2] != ["iteration", "chain"] or cols[-1] != "log_joint" or cols[2:-1] != want:
        raise DataError(f"posterior-samples file {path} does not match the model layout")
    n = len(frame)
    chain_id = int(frame["chain"].iloc[0]) if n else 1
    return ChainStore(
        layout=layout,
        names=want,
        draws=frame[want].to_numpy(dtype=float).reshape(n, len(want)),
        log_joint=frame["log_joint"].to_numpy(dtype=float),
        iterations=frame["iteration"].to_numpy(dtype=np.int64),
        acceptance=np.zeros((0, 0), dtype=np.int64),
        block_labels=[],
        batch_size=1,
        chain_id=chain_id,
        total_iters=n,
        burnin=0,
        thin=1,
    )
