"""Posterior and predictive computation.

Three routes to ``E[h(Y_{t+1}) | y_{1:t}]``:

* ``conjugate``  closed form for :class:`~zerocred.models.ConjHurdle`;
* ``quadrature`` tensor Gauss rules over the prior (Hermite for normal laws,
  Jacobi x generalised Laguerre for Beta x Gamma), reweighted by the history
  likelihood;
* ``mcmc``       component-wise random-walk Metropolis, ``R`` independent
  chains, Monte Carlo standard error from the spread of run estimates.

All routes use the tower decomposition: the predictive expectation is the
posterior expectation of ``g(theta) = E[h(Y_{t+1}) | theta]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from . import dists, models
from .dists import BetaGamma, BivariateNormal, ScalarNormal
from .errors import DiagnosticError, NumericError, UsageError
from .models import ConjHurdle, ModelSpec

CONJUGATE = "conjugate"
QUADRATURE = "quadrature"
MCMC = "mcmc"
METHODS = (CONJUGATE, QUADRATURE, MCMC)


# --------------------------------------------------------------------------
# Conjugate updates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PosteriorState:
    a_star: float
    b_star: float
    alpha_star: float
    beta_star: float
    r_t: int = 0
    m_t: int = 0
    t: int = 0


def conjugate_update(prior: BetaGamma, history) -> PosteriorState:
    """Beta-Bernoulli and Gamma-Poisson update of a :class:`BetaGamma` prior."""
    y = models.as_history(history)
    r, m = models.sufficient_stats(y)
    t = len(y)
    return PosteriorState(prior.a + r, prior.b + t - r, prior.alpha + m, prior.beta + r, r, m, t)


def predictive_mean_conjugate(state: PosteriorState) -> float:
    """One-step-ahead predictive mean ``a*/(a*+b*) * (1 + alpha*/beta*)``."""
    s = state
    return s.a_star / (s.a_star + s.b_star) * (1.0 + s.alpha_star / s.beta_star)


def _nbinom(state: PosteriorState):
    # Gamma(alpha*, beta*) mixed Poisson; scipy's success probability
    return stats.nbinom(state.alpha_star, state.beta_star / (state.beta_star + 1.0))


# --------------------------------------------------------------------------
# Transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    label = "identity"

    def __call__(self, y):
        return np.asarray(y, dtype=float)


@dataclass(frozen=True)
class Deductible:
    """h(y) = (y - d)^+."""

    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 0:
            raise UsageError(f"deductible must be a non-negative integer, got {self.d}")

    @property
    def label(self):
        return f"deductible_{self.d}"

    def __call__(self, y):
        return np.maximum(np.asarray(y, dtype=float) - self.d, 0.0)


@dataclass(frozen=True)
class Limit:
    """h(y) = min(y, d)."""

    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 0:
            raise UsageError(f"limit must be a non-negative integer, got {self.d}")

    @property
    def label(self):
        return f"limit_{self.d}"

    def __call__(self, y):
        return np.minimum(np.asarray(y, dtype=float), self.d)


Transform = Union[Identity, Deductible, Limit]


def parse_transform(text: str):
    """Parse ``identity``, ``deductible:3`` or ``limit:2``."""
    text = text.strip().lower()
    if text in ("identity", "base", "y"):
        return Identity()
    kind, _, arg = text.partition(":")
    try:
        d = int(arg)
    except ValueError:
        raise UsageError(f"cannot parse transform {text!r}") from None
    if kind in ("deductible", "ded"):
        return Deductible(d)
    if kind in ("limit", "lim"):
        return Limit(d)
    raise UsageError(f"unknown transform {text!r}")


# --------------------------------------------------------------------------
# Conditional transform means
# --------------------------------------------------------------------------


def _limited_mean(spec, t, theta, d):
    """E[min(Y, d) | theta] = sum_{y<d} P(Y > y | theta), exact."""
    theta = spec._theta(theta)
    if d == 0:
        return np.zeros(theta.shape[:-1])
    ys = np.arange(d)
    pm = np.exp(models.cond_logpmf(spec, t, theta[..., None, :], ys))
    surv = 1.0 - np.cumsum(pm, axis=-1)
    return np.clip(surv, 0.0, None).sum(axis=-1)


def cond_transform_mean(spec: ModelSpec, t: int, theta, h) -> np.ndarray:
    """g(theta) = E[h(Y_t) | theta] for an Identity, Deductible or Limit transform.

    Deductible and limit payoffs are evaluated through the finite identities
    ``E[Y ^ d] = sum_{y<d} P(Y > y)`` and ``(Y - d)^+ = Y - Y ^ d``, which need
    no truncation.  Other callables fall back to :func:`transform_mean_by_sum`.
    """
    if isinstance(h, Identity):
        return models.cond_mean(spec, t, theta)
    if isinstance(h, Limit):
        return _limited_mean(spec, t, theta, h.d)
    if isinstance(h, Deductible):
        return models.cond_mean(spec, t, theta) - _limited_mean(spec, t, theta, h.d)
    return transform_mean_by_sum(spec, t, theta, h)


def transform_mean_by_sum(spec: ModelSpec, t: int, theta, h: Callable,
                          eps: float = dists.TAIL_EPS) -> np.ndarray:
    """sum_y h(y) P(Y_t=y | theta) over the truncated support (tail mass <= eps)."""
    theta = spec._theta(theta)
    n = models.cond_truncation(spec, t, theta, eps)
    ys = np.arange(n + 1)
    pm = np.exp(models.cond_logpmf(spec, t, theta[..., None, :], ys))
    return pm @ h(ys)


# --------------------------------------------------------------------------
# Quadrature
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureGrid:
    theta: np.ndarray  # (K, dim)
    logw: np.ndarray  # (K,), logsumexp == 0

    @property
    def weights(self):
        return np.exp(self.logw)


def _normal_rule(n):
    z, w = np.polynomial.hermite_e.hermegauss(n)
    with np.errstate(divide="ignore"):
        return z, np.log(w) - np.log(w.sum())


@lru_cache(maxsize=256)
def quadrature_grid(law, nodes: int = 64) -> QuadratureGrid:
    """Product Gauss rule integrating against ``law``."""
    if nodes < 1:
        raise UsageError("need at least one quadrature node")
    if isinstance(law, ScalarNormal):
        z, lw = _normal_rule(nodes)
        theta = (law.mean + math.sqrt(law.var) * z)[:, None]
        return QuadratureGrid(theta, lw)
    if isinstance(law, BivariateNormal):
        z, lw = _normal_rule(nodes)
        zz = np.stack(np.meshgrid(z, z, indexing="ij"), -1).reshape(-1, 2)
        lww = (lw[:, None] + lw[None, :]).ravel()
        return QuadratureGrid(law.mean_vec + zz @ law.chol.T, lww)
    if isinstance(law, BetaGamma):
        u, wu = special.roots_jacobi(nodes, law.b - 1.0, law.a - 1.0)
        x1 = (1.0 + u) / 2.0
        v, wv = special.roots_genlaguerre(nodes, law.alpha - 1.0)
        x2 = v / law.beta
        with np.errstate(divide="ignore"):
            l1 = np.log(wu) - np.log(wu.sum())
            l2 = np.log(wv) - np.log(wv.sum())
        theta = np.stack(np.meshgrid(x1, x2, indexing="ij"), -1).reshape(-1, 2)
        return QuadratureGrid(theta, (l1[:, None] + l2[None, :]).ravel())
    raise UsageError(f"no quadrature rule for {law!r}")


def _history_matrix(histories) -> np.ndarray:
    hs = [models.as_history(h) for h in histories]
    lengths = {len(h) for h in hs}
    if len(lengths) > 1:
        raise UsageError("batched histories must share a common length")
    t = lengths.pop() if lengths else 0
    return np.array(hs, dtype=np.int64).reshape(len(hs), t)


def _loglik_matrix(spec: ModelSpec, grid: QuadratureGrid, Y: np.ndarray) -> np.ndarray:
    """(H, K) matrix of history log-likelihoods at each node."""
    H, t = Y.shape
    out = np.zeros((H, len(grid.logw)))
    for s in range(t):
        vals, inv = np.unique(Y[:, s], return_inverse=True)
        table = models.cond_logpmf(spec, s + 1, grid.theta[:, None, :], vals[None, :])  # (K, V)
        out += table.T[inv]
    return out


def posterior_weights(spec: ModelSpec, histories, nodes: int = 64):
    """Normalised posterior log-weights over quadrature nodes, one row per history."""
    grid = quadrature_grid(spec.law, nodes)
    Y = _history_matrix(histories)
    lp = grid.logw[None, :] + _loglik_matrix(spec, grid, Y)
    norm = special.logsumexp(lp, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericError("posterior is not integrable on the quadrature grid "
                           "(all weights underflow)")
    return grid, lp - norm


# --------------------------------------------------------------------------
# MCMC
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MCMCConfig:
    draws: int = 1000
    burn_in: int = 500
    thin: int = 1
    proposal_scale: float = 1.0
    runs: int = 100
    seed: int = 0
    adapt: bool = True

    def __post_init__(self):
        if self.draws < 1 or self.runs < 1 or self.thin < 1 or self.burn_in < 0:
            raise UsageError("MCMC config needs draws >= 1, runs >= 1, thin >= 1, burn_in >= 0")
        if not self.proposal_scale > 0:
            raise UsageError("proposal scale must be positive")


@dataclass
class MCMCResult:
    draws: np.ndarray  # (S, dim) or (R, S, dim)
    acceptance: np.ndarray  # (dim,) or (R, dim)
    scale: np.ndarray


def _to_theta(law, u):
    if isinstance(law, BetaGamma):
        return np.stack([special.expit(u[..., 0]), np.exp(u[..., 1])], -1), \
            dists.log_sigmoid(u[..., 0]) + dists.log1m_sigmoid(u[..., 0]) + u[..., 1]
    return u, np.zeros(u.shape[:-1])


def _to_unconstrained(law, theta):
    if isinstance(law, BetaGamma):
        return np.stack([special.logit(theta[..., 0]), np.log(theta[..., 1])], -1)
    return theta


def _init_scale(law):
    if isinstance(law, BivariateNormal):
        return np.sqrt(np.array([law.var1, law.var2]))
    if isinstance(law, ScalarNormal):
        return np.array([math.sqrt(law.var)])
    return np.ones(law.dim)


def _log_target(spec, history):
    y = models.as_history(history)

    def logpost(u):
        theta, logjac = _to_theta(spec.law, u)
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = dists.prior_logpdf(spec.law, theta) + logjac
            lp = lp + models.history_loglik(spec, y, theta)
        return np.where(np.isnan(lp), -np.inf, lp)

    return logpost


def run_metropolis(logpost: Callable, init: np.ndarray, cfg: MCMCConfig,
                   rngs: Sequence[np.random.Generator], scale0: np.ndarray):
    """Component-wise Gaussian random-walk Metropolis, one chain per generator.

    Chains advance together (vectorised) but each consumes only its own
    generator's stream.  During burn-in the per-chain, per-component scale is
    adapted every 50 iterations toward 30-45% acceptance.
    """
    R, dim = init.shape
    n_iter = cfg.burn_in + cfg.draws * cfg.thin
    noise = np.stack([g.standard_normal((n_iter, dim)) for g in rngs])  # (R, n, dim)
    logu = np.log(np.stack([g.random((n_iter, dim)) for g in rngs]))
    scale = np.broadcast_to(cfg.proposal_scale * scale0, (R, dim)).copy()
    u = init.copy()
    lp = logpost(u)
    keep = np.empty((R, cfg.draws, dim))
    acc_win = np.zeros((R, dim))
    acc_tot = np.zeros((R, dim))
    window = 50
    for i in range(n_iter):
        for j in range(dim):
            prop = u.copy()
            prop[:, j] += scale[:, j] * noise[:, i, j]
            lp_prop = logpost(prop)
            with np.errstate(invalid="ignore"):
                ok = logu[:, i, j] < lp_prop - lp
            ok &= np.isfinite(lp_prop)
            u[ok] = prop[ok]
            lp = np.where(ok, lp_prop, lp)
            acc_win[:, j] += ok
            if i >= cfg.burn_in:
                acc_tot[:, j] += ok
        if cfg.adapt and i < cfg.burn_in and (i + 1) % window == 0:
            rate = acc_win / window
            scale = np.where(rate < 0.30, scale * 0.7, np.where(rate > 0.45, scale * 1.4, scale))
            acc_win[:] = 0
        k = i - cfg.burn_in
        if k >= 0 and k % cfg.thin == 0:
            keep[:, k // cfg.thin] = u
    if not np.all(np.isfinite(lp)):
        raise DiagnosticError("a chain never reached a state of positive posterior density")
    return keep, acc_tot / max(1, cfg.draws * cfg.thin), scale


def _mcmc_chains(spec, history, cfg, rngs):
    if not isinstance(spec.law, (BivariateNormal, ScalarNormal, BetaGamma)):
        raise UsageError("MCMC needs a continuous prior law")
    init = np.stack([_to_unconstrained(spec.law, dists.sample_prior(spec.law, g)) for g in rngs])
    keep, acc, scale = run_metropolis(_log_target(spec, history), init, cfg, rngs,
                                      _init_scale(spec.law))
    theta, _ = _to_theta(spec.law, keep)
    return MCMCResult(theta, acc, scale)


def mcmc_posterior(spec: ModelSpec, history, cfg: MCMCConfig,
                   rng: np.random.Generator) -> MCMCResult:
    """Single random-walk Metropolis chain targeting the posterior of theta."""
    res = _mcmc_chains(spec, history, cfg, [rng])
    return MCMCResult(res.draws[0], res.acceptance[0], res.scale[0])


def mcmc_runs(spec: ModelSpec, history, cfg: MCMCConfig, stream: Sequence[int] = ()) -> MCMCResult:
    """``cfg.runs`` independent chains seeded from ``(cfg.seed, *stream, run)``."""
    rngs = [dists.make_rng(cfg.seed, *stream, r) for r in range(cfg.runs)]
    return _mcmc_chains(spec, history, cfg, rngs)


def batch_means_mcse(x: np.ndarray) -> float:
    """Batch-means standard error of the mean of a single chain."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    b = max(1, int(math.sqrt(n)))
    nb = n // b
    if nb < 2:
        return float("nan")
    means = x[: nb * b].reshape(nb, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(nb))


# --------------------------------------------------------------------------
# Predictive expectations
# --------------------------------------------------------------------------


def _conjugate_expectation(spec: ConjHurdle, history, h) -> float:
    s = conjugate_update(spec.law, history)
    p = s.a_star / (s.a_star + s.b_star)
    mean = p * (1.0 + s.alpha_star / s.beta_star)
    if isinstance(h, Identity):
        return mean
    if isinstance(h, (Limit, Deductible)):
        d = h.d
        if d == 0:
            lim = 0.0
        else:
            # P(Y > 0) = p, P(Y > y) = p P(N > y - 1) for y >= 1
            lim = p * (1.0 + _nbinom(s).sf(np.arange(d - 1)).sum())
        return lim if isinstance(h, Limit) else mean - lim
    pmf, _ = _conjugate_pmf(s)
    return float(pmf @ h(np.arange(len(pmf))))


def _conjugate_pmf(s: PosteriorState, eps=dists.TAIL_EPS):
    p = s.a_star / (s.a_star + s.b_star)
    nb = _nbinom(s)
    n = int(nb.isf(eps)) + 2
    out = np.empty(n + 2)
    out[0] = 1.0 - p
    out[1:] = p * nb.pmf(np.arange(n + 1))
    return out, max(0.0, 1.0 - out.sum())


def _check_method(spec, method):
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == CONJUGATE and not isinstance(spec, ConjHurdle):
        raise UsageError("the conjugate method only applies to ConjHurdle")
    if method == QUADRATURE and spec.dim not in (1, 2):
        raise UsageError("quadrature supports 1- and 2-dimensional random effects")


def predictive_expectations(spec: ModelSpec, histories, h=Identity(), method: str = QUADRATURE,
                            cfg: Optional[MCMCConfig] = None, nodes: int = 64,
                            stream: Sequence[int] = ()):
    """Batched ``E[h(Y_{t+1}) | history]`` for equal-length histories.

    Returns ``(estimates, mcse)`` arrays; ``mcse`` is zero for deterministic methods.
    """
    _check_method(spec, method)
    histories = list(histories)
    if method == CONJUGATE:
        est = np.array([_conjugate_expectation(spec, hh, h) for hh in histories])
        return est, np.zeros(len(est))
    if method == QUADRATURE:
        if not histories:
            return np.zeros(0), np.zeros(0)
        grid, lw = posterior_weights(spec, histories, nodes)
        t_next = _history_matrix(histories).shape[1] + 1
        g = cond_transform_mean(spec, t_next, grid.theta, h)
        est = np.exp(lw) @ g
        return est, np.zeros(len(est))
    cfg = cfg or MCMCConfig()
    est, se = [], []
    for i, hh in enumerate(histories):
        e, s = _mcmc_expectation(spec, hh, h, cfg, (*stream, i))
        est.append(e)
        se.append(s)
    return np.array(est), np.array(se)


def _mcmc_expectation(spec, history, h, cfg, stream):
    res = mcmc_runs(spec, history, cfg, stream)
    t_next = len(models.as_history(history)) + 1
    g = cond_transform_mean(spec, t_next, res.draws, h)  # (R, S)
    per_run = g.mean(axis=1)
    if cfg.runs > 1:
        return float(per_run.mean()), float(per_run.std(ddof=1) / math.sqrt(cfg.runs))
    return float(per_run[0]), batch_means_mcse(g[0])


def predictive_expectation(spec: ModelSpec, history, h=Identity(), method: str = QUADRATURE,
                           cfg: Optional[MCMCConfig] = None, nodes: int = 64,
                           stream: Sequence[int] = ()) -> tuple[float, float]:
    """``(estimate, mcse)`` of E[h(Y_{t+1}) | Y_{1:t} = history]."""
    _check_method(spec, method)
    if method == MCMC:
        return _mcmc_expectation(spec, history, h, cfg or MCMCConfig(), tuple(stream))
    est, se = predictive_expectations(spec, [history], h, method, cfg, nodes)
    return float(est[0]), float(se[0])


def predictive_pmf(spec: ModelSpec, history, method: str = QUADRATURE, nodes: int = 64,
                   eps: float = dists.TAIL_EPS, cap: int = dists.TRUNCATION_CAP):
    """Predictive pmf of Y_{t+1} on {0..N} with tail mass <= eps; returns (pmf, tail)."""
    _check_method(spec, method)
    if method == MCMC:
        raise UsageError("predictive pmfs are computed by conjugate or quadrature methods")
    if method == CONJUGATE:
        return _conjugate_pmf(conjugate_update(spec.law, history), eps)
    grid, lw = posterior_weights(spec, [history], nodes)
    lw = lw[0]
    keep = lw > np.log(1e-300)
    theta, lw = grid.theta[keep], lw[keep]
    t_next = len(models.as_history(history)) + 1
    n = 32
    while True:
        ys = np.arange(n + 1)
        lp = models.cond_logpmf(spec, t_next, theta[:, None, :], ys[None, :])
        pmf = np.exp(special.logsumexp(lw[:, None] + lp, axis=0))
        tail = 1.0 - pmf.sum()
        if tail <= eps or n >= cap:
            break
        n = min(cap, 2 * n)
    cum = np.cumsum(pmf)
    cut = int(np.searchsorted(cum, 1.0 - eps)) if tail <= eps else n
    pmf = pmf[: min(cut, n) + 1]
    return pmf, max(0.0, 1.0 - pmf.sum())


def joint_logpmf_lattice(spec: ModelSpec, t: int, y_max: int, nodes: int = 64) -> np.ndarray:
    """log P(Y_1=y_1, ..., Y_t=y_t) on {0..y_max}^t, shape (y_max+1,)*t."""
    grid = quadrature_grid(spec.law, nodes)
    ys = np.arange(y_max + 1)
    total = grid.logw.reshape((-1,) + (1,) * t)
    for s in range(t):
        lp = models.cond_logpmf(spec, s + 1, grid.theta[:, None, :], ys[None, :])  # (K, V)
        shape = [lp.shape[0]] + [1] * t
        shape[s + 1] = y_max + 1
        total = total + lp.reshape(shape)
    return special.logsumexp(total, axis=0)
