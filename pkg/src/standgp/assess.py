"""Model comparison, predictive scoring, and convergence diagnostics.

DIC follows Spiegelhalter et al. (2002): mean deviance plus the effective
parameter count p_D.  Holdout cells are scored with the logarithmic,
squared-error, and Dawid-Sebastiani rules for count predictions (Czado,
Gneiting and Held, 2009), computed from the mixture-of-Poissons predictive
implied by the intensity draws.  Multi-chain convergence uses the Gelman and
Rubin (1992) potential scale reduction factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError
from .model import Dataset, ModelSpec
from .sampler import ChainStore, ParamLayout
from .util import nearest_rank_quantile


# ---------------------------------------------------------------------------
# Deviance and DIC
# ---------------------------------------------------------------------------


@dataclass
class DevianceTrace:
    """Per-draw deviance (including the log y! constants) and its plug-in value."""

    deviance: np.ndarray
    at_mean: float

    def __post_init__(self):
        if self.deviance.size == 0:
            raise DomainError("deviance trace must be nonempty")
        if not (np.all(np.isfinite(self.deviance)) and math.isfinite(self.at_mean)):
            raise DomainError("deviance values must be finite")


@dataclass
class DicResult:
    p_d: float
    dic: float
    mean_deviance: float


def _pooled_draws(chains: list[ChainStore]) -> tuple[ParamLayout, np.ndarray]:
    if not chains:
        raise DomainError("at least one chain is required")
    rows = np.concatenate([c.draws for c in chains], axis=0)
    if rows.shape[0] == 0:
        raise DomainError("chains contain no retained draws")
    return chains[0].layout, rows


def deviance_trace(
    dataset: Dataset, chains: list[ChainStore], spec: ModelSpec, chunk: int = 256
) -> DevianceTrace:
    """Deviance ``-2 log L`` per retained draw, and at the posterior mean.

    The plug-in deviance evaluates the likelihood at the posterior means of
    the intensity-determining parameters (coefficients and field levels).
    """
    layout, rows = _pooled_draws(chains)
    q, m, n, p = layout.q, layout.m, layout.n, layout.p
    x = dataset.covariates[..., :p]
    y = dataset.counts
    log_fact = float(np.sum(gammaln(y + 1.0)))

    names = chains[0].names
    beta_cols = [k for k, nm in enumerate(names) if nm.startswith("beta[")]
    w_cols = [k for k, nm in enumerate(names) if nm.startswith("w[")]
    if layout.dynamics == "markov":
        # drop the anchor columns beta[i][0][c]: they do not enter the likelihood
        beta_cols = [k for k in beta_cols if "][0][" not in names[k]]
    beta_cols = np.asarray(beta_cols, dtype=int)
    w_cols = np.asarray(w_cols, dtype=int)

    def loglik(beta_rows: np.ndarray, w_rows: np.ndarray | None) -> np.ndarray:
        d = beta_rows.shape[0]
        beta = beta_rows.reshape(d, m, q, p).transpose(0, 2, 1, 3)  # (d, q, m, p)
        eta = np.einsum("ijkc,dijc->dijk", x, beta)
        if w_rows is not None:
            eta = eta + w_rows.reshape(d, m, n, q).transpose(0, 3, 1, 2)
        return np.sum(y[None] * eta - np.exp(eta), axis=(1, 2, 3)) - log_fact

    n_draws = rows.shape[0]
    dev = np.empty(n_draws)
    for start in range(0, n_draws, chunk):
        stop = min(start + chunk, n_draws)
        beta_rows = rows[start:stop, beta_cols]
        w_rows = rows[start:stop, w_cols] if layout.spatial else None
        dev[start:stop] = -2.0 * loglik(beta_rows, w_rows)

    beta_mean = rows[:, beta_cols].mean(axis=0)[None, :]
    w_mean = rows[:, w_cols].mean(axis=0)[None, :] if layout.spatial else None
    at_mean = float(-2.0 * loglik(beta_mean, w_mean)[0])
    return DevianceTrace(deviance=dev, at_mean=at_mean)


def dic(trace: DevianceTrace) -> DicResult:
    """Effective parameter count and DIC from a deviance trace."""
    mean_dev = float(np.mean(trace.deviance))
    p_d = mean_dev - trace.at_mean
    return DicResult(p_d=p_d, dic=mean_dev + p_d, mean_deviance=mean_dev)


# ---------------------------------------------------------------------------
# Predictive scoring
# ---------------------------------------------------------------------------


@dataclass
class CellScores:
    logs: float
    ses: float
    dss: float


def score_cell(y_obs: int, intensities: np.ndarray) -> CellScores:
    """Logarithmic, squared-error, and Dawid-Sebastiani scores for one cell.

    The predictive distribution is the equally-weighted mixture of Poisson
    laws over the intensity draws; its mean and variance are available in
    closed form, and the mass at ``y_obs`` is a Monte Carlo average of
    Poisson pmfs (not empirical count frequencies).  Lower is better for
    all three rules.
    """
    lam = np.asarray(intensities, dtype=float).ravel()
    if lam.size == 0:
        raise DomainError("scoring requires at least one intensity draw")
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise DomainError("intensity draws must be positive and finite")
    y = int(y_obs)
    if y < 0:
        raise DomainError("observed count must be nonnegative")

    log_pmf = y * np.log(lam) - lam - gammaln(y + 1.0)
    log_p = float(logsumexp(log_pmf)) - math.log(lam.size)
    logs = math.inf if log_p == -math.inf else -log_p

    mu = float(np.mean(lam))
    var = mu + float(np.mean((lam - mu) ** 2))  # mixture variance, ddof=0
    if var <= 0:
        raise DomainError("Dawid-Sebastiani score undefined: predictive variance is zero")
    ses = (y - mu) ** 2
    dss = ses / var + math.log(var)
    return CellScores(logs=logs, ses=ses, dss=dss)


@dataclass
class ScoreReport:
    """Mean holdout scores per (species group, size class), each (q, m)."""

    logs: np.ndarray
    ses: np.ndarray
    dss: np.ndarray
    n_cells: int


def score_report(holdout: Dataset, intensities: np.ndarray) -> ScoreReport:
    """Average holdout scores by cell group: intensities is (n0, q, m, D)."""
    n0, q, m, _ = intensities.shape
    if (q, m, n0) != (holdout.q, holdout.m, holdout.n):
        raise DomainError("holdout dimensions do not match the predictive draws")
    logs = np.zeros((q, m))
    ses = np.zeros((q, m))
    dss = np.zeros((q, m))
    for i in range(q):
        for j in range(m):
            for k in range(n0):
                s = score_cell(int(holdout.counts[i, j, k]), intensities[k, i, j])
                logs[i, j] += s.logs
                ses[i, j] += s.ses
                dss[i, j] += s.dss
    logs /= n0
    ses /= n0
    dss /= n0
    return ScoreReport(logs=logs, ses=ses, dss=dss, n_cells=q * m * n0)


# ---------------------------------------------------------------------------
# Convergence and posterior summaries
# ---------------------------------------------------------------------------


def gelman_rubin(traces) -> float:
    """Potential scale reduction factor for one scalar parameter.

    ``sqrt(((n-1)/n * W + B/n) / W)`` with W the mean within-chain variance
    and B the between-chain variance of the chain means.
    """
    arrs = [np.asarray(t, dtype=float).ravel() for t in traces]
    if len(arrs) < 2:
        raise DomainError("the diagnostic needs at least two chains")
    n = arrs[0].size
    if n < 2 or any(a.size != n for a in arrs):
        raise DomainError("chains must have equal length of at least 2")
    x = np.stack(arrs)
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    if w == 0.0:
        raise DomainError("zero within-chain variance")
    b = n * float(np.var(np.mean(x, axis=1), ddof=1))
    return math.sqrt(((n - 1) / n * w + b / n) / w)


def rhat_table(chains: list[ChainStore]) -> dict[str, float]:
    """R-hat per stored scalar parameter; NaN where a parameter is constant."""
    if len(chains) < 2:
        raise DomainError("the diagnostic needs at least two chains")
    names = chains[0].names
    out: dict[str, float] = {}
    for k, name in enumerate(names):
        traces = [c.draws[:, k] for c in chains]
        try:
            out[name] = gelman_rubin(traces)
        except DomainError:
            out[name] = float("nan")
    return out


@dataclass
class RangeSummary:
    """Posterior effective-range summaries, arrays of shape (m, q)."""

    median: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray


def effective_range_summary(chains: list[ChainStore]) -> RangeSummary:
    """Median and 95% interval of ``ln(20)/phi`` per (group, class).

    Each retained decay draw is transformed first; quantiles are then taken
    on the transformed sample.
    """
    layout, rows = _pooled_draws(chains)
    if not layout.spatial:
        raise DomainError("effective ranges are not applicable to a nonspatial fit")
    m, q = layout.m, layout.q
    names = chains[0].names
    med = np.zeros((m, q))
    lo = np.zeros((m, q))
    hi = np.zeros((m, q))
    for j in range(m):
        for i in range(q):
            col = names.index(f"phi[{i + 1}][{j + 1}]")
            ranges = np.log(20.0) / rows[:, col]
            med[j, i] = nearest_rank_quantile(ranges, 0.5)
            lo[j, i] = nearest_rank_quantile(ranges, 0.025)
            hi[j, i] = nearest_rank_quantile(ranges, 0.975)
    return RangeSummary(median=med, lower95=lo, upper95=hi)


@dataclass
class CrossCorrelationSummary:
    """Posterior summaries of between-group correlations, arrays (m, q, q)."""

    median: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray


def cross_correlations(chains: list[ChainStore]) -> CrossCorrelationSummary:
    """Between-group correlation summaries from ``Gamma_j = A_j A_j'`` draws."""
    layout, rows = _pooled_draws(chains)
    if not layout.spatial:
        raise DomainError("cross-correlations are not applicable to a nonspatial fit")
    m, q = layout.m, layout.q
    names = chains[0].names
    tri = np.tril_indices(q)
    n_draws = rows.shape[0]
    corr = np.empty((n_draws, m, q, q))
    for j in range(m):
        cols = [names.index(f"A[{j + 1}][{r + 1}][{c + 1}]") for r, c in zip(*tri)]
        a = np.zeros((n_draws, q, q))
        a[:, tri[0], tri[1]] = rows[:, cols]
        gamma = a @ a.transpose(0, 2, 1)
        sd = np.sqrt(np.diagonal(gamma, axis1=1, axis2=2))
        corr[:, j] = gamma / (sd[:, :, None] * sd[:, None, :])
        corr[:, j, np.arange(q), np.arange(q)] = 1.0
    return CrossCorrelationSummary(
        median=nearest_rank_quantile(corr.transpose(1, 2, 3, 0), 0.5),
        lower95=nearest_rank_quantile(corr.transpose(1, 2, 3, 0), 0.025),
        upper95=nearest_rank_quantile(corr.transpose(1, 2, 3, 0), 0.975),
    )
