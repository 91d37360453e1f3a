"""Independent reference implementations used to verify the library.

Everything here is deliberately written along a different path from the
package code: dense matrices, explicit inverses, scipy.stats densities, and
plain loops.  These functions define expected values; they never call the
code paths they check.
"""

import numpy as np
from scipy.stats import invwishart, multivariate_normal, norm


def pair_cov(s, t, A, phi):
    """Cross-covariance between two sites by direct elementwise summation."""
    q = A.shape[0]
    d = float(np.sqrt(np.sum((np.asarray(s) - np.asarray(t)) ** 2)))
    out = np.zeros((q, q))
    for a in range(q):
        for b in range(q):
            for i in range(q):
                out[a, b] += A[a, i] * A[b, i] * np.exp(-phi[i] * d)
    return out


def dense_block(coords, A, phi):
    """Site-major block covariance assembled pairwise."""
    n = coords.shape[0]
    q = A.shape[0]
    out = np.zeros((n * q, n * q))
    for k in range(n):
        for l in range(n):
            out[k * q : (k + 1) * q, l * q : (l + 1) * q] = pair_cov(
                coords[k], coords[l], A, phi
            )
    return out


def chol_jacobian(L):
    """log |d(L L')/dL| computed from the classic triangular-map result."""
    d = L.shape[0]
    total = d * np.log(2.0)
    for i in range(1, d + 1):
        total += (d - i + 1) * np.log(L[i - 1, i - 1])
    return total


def stacked_w_logdensity(coords, A, phi, w):
    """Density of all field levels as ONE dense normal over the stacked vector.

    The per-class conditionals multiply out to a joint zero-mean normal whose
    (j, k) block is the summed covariance of the shared increments:
    Cov(w_j, w_k) = sum_{l <= min(j,k)} Sigma_l.
    """
    m = w.shape[0]
    nq = w.shape[1]
    sigmas = [dense_block(coords, A[j], phi[j]) for j in range(m)]
    big = np.zeros((m * nq, m * nq))
    for j in range(m):
        for k in range(m):
            upto = min(j, k) + 1
            big[j * nq : (j + 1) * nq, k * nq : (k + 1) * nq] = sum(sigmas[:upto])
    return multivariate_normal.logpdf(w.ravel(), mean=np.zeros(m * nq), cov=big)


def monolithic_log_joint(dataset, state, spec):
    """Self-contained dense evaluation of the joint log-density.

    Mirrors the model definition term by term with scipy.stats building
    blocks and explicit loops; Poisson factorials are omitted to match the
    library's convention.
    """
    q, m, n = dataset.q, dataset.m, dataset.n
    p = state.beta.shape[-1]
    x = dataset.covariates[..., :p]
    total = 0.0

    # Poisson kernel, triple loop
    for i in range(q):
        for j in range(m):
            for k in range(n):
                eta = float(x[i, j, k] @ state.beta[i, j])
                if state.w is not None:
                    eta += state.w[j][k * q + i]
                total += dataset.counts[i, j, k] * eta - np.exp(eta)

    # coefficient layer
    if spec.beta_dynamics != "flat":
        def sigma_eta(j):
            V = state.V if spec.shared_sigma_eta else state.V[j]
            return V @ V.T

        if spec.beta_dynamics == "markov":
            for i in range(q):
                total += np.sum(
                    norm.logpdf(state.beta0[i], loc=spec.m0, scale=np.sqrt(spec.sigma0_diag))
                )
                prev = state.beta0[i]
                for j in range(m):
                    total += multivariate_normal.logpdf(
                        state.beta[i, j], mean=prev, cov=sigma_eta(j)
                    )
                    prev = state.beta[i, j]
        else:
            for i in range(q):
                for j in range(m):
                    total += multivariate_normal.logpdf(
                        state.beta[i, j], mean=np.zeros(p), cov=sigma_eta(j)
                    )

        r_eta = spec.r_eta if spec.r_eta is not None else p + 1
        factors = [state.V] if spec.shared_sigma_eta else [state.V[j] for j in range(m)]
        for V in factors:
            total += invwishart.logpdf(V @ V.T, df=r_eta, scale=spec.upsilon_eta_scale * np.eye(p))
            total += chol_jacobian(V)

    # spatial layer
    if spec.spatial:
        r_gamma = spec.r_gamma if spec.r_gamma is not None else q + 1
        bounds = spec.phi_bounds_array(m, q)
        for j in range(m):
            gam = state.A[j] @ state.A[j].T
            total += invwishart.logpdf(gam, df=r_gamma, scale=spec.upsilon_gamma_scale * np.eye(q))
            total += chol_jacobian(state.A[j])
            for i in range(q):
                lo, hi = bounds[j, i]
                if not (lo < state.phi[j, i] < hi):
                    return -np.inf
                total -= np.log(hi - lo)
        total += stacked_w_logdensity(dataset.sites.coords, state.A, state.phi, state.w)

    return float(total)


def brute_force_conditional(s0, draw, coords):
    """Conditional mean/cov of the field at s0 by dense joint-normal algebra.

    Per class, builds the (n+1)q joint covariance over observed sites plus
    the new one, conditions the increment with explicit matrix inverses, and
    accumulates across classes.
    """
    m, q = draw.phi.shape
    n = coords.shape[0]
    all_coords = np.vstack([coords, np.asarray(s0, dtype=float).reshape(1, 2)])
    means = np.zeros((m, q))
    covs = np.zeros((m, q, q))
    acc_mean = np.zeros(q)
    acc_cov = np.zeros((q, q))
    prev = np.zeros(n * q)
    for l in range(m):
        joint = dense_block(all_coords, draw.A[l], draw.phi[l])
        s11 = joint[: n * q, : n * q]
        s12 = joint[: n * q, n * q :]
        s22 = joint[n * q :, n * q :]
        inv11 = np.linalg.inv(s11)
        diff = draw.w[l] - prev
        acc_mean = acc_mean + s12.T @ inv11 @ diff
        acc_cov = acc_cov + (s22 - s12.T @ inv11 @ s12)
        means[l] = acc_mean
        covs[l] = acc_cov
        prev = draw.w[l]
    return means, covs


def random_state(dataset, spec, rng, scale=0.5):
    """A random valid ParamState for oracle comparisons."""
    from standgp.model import ParamState

    q, m, n = dataset.q, dataset.m, dataset.n
    p = spec.effective_p(dataset)
    beta = scale * rng.standard_normal((q, m, p))
    beta0 = scale * rng.standard_normal((q, p)) if spec.beta_dynamics == "markov" else None
    V = None
    if spec.beta_dynamics != "flat":
        def factor():
            L = 0.2 * rng.standard_normal((p, p))
            L = np.tril(L)
            np.fill_diagonal(L, 0.2 + rng.uniform(0.1, 0.6, p))
            return L

        V = factor() if spec.shared_sigma_eta else np.stack([factor() for _ in range(m)])
    A = phi = w = None
    if spec.spatial:
        A = np.zeros((m, q, q))
        for j in range(m):
            L = 0.3 * rng.standard_normal((q, q))
            L = np.tril(L)
            np.fill_diagonal(L, 0.3 + rng.uniform(0.1, 0.5, q))
            A[j] = L
        bounds = spec.phi_bounds_array(m, q)
        phi = rng.uniform(bounds[..., 0] * 1.5, bounds[..., 1] * 0.7)
        w = scale * rng.standard_normal((m, n * q))
    return ParamState(beta=beta, beta0=beta0, V=V, A=A, phi=phi, w=w)


def random_dataset(rng, n=3, q=2, m=2, p=2):
    """A small random dataset with Poisson counts at moderate intensities."""
    from standgp.covariance import SiteSet
    from standgp.model import Dataset

    coords = rng.uniform(0.0, 2.0, size=(n, 2))
    x = np.ones((q, m, n, p))
    if p > 1:
        x[..., 1:] = rng.standard_normal((q, m, n, p - 1))
    counts = rng.poisson(3.0, size=(q, m, n))
    return Dataset(sites=SiteSet(coords), counts=counts, covariates=x)
