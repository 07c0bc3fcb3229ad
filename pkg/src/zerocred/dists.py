"""Probability kernels: count distributions, random-effect priors, link functions.

All mass functions are evaluated in log space and exponentiated at the
boundary.  Functions accept numpy arrays and broadcast where it makes sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy import special, stats

from .errors import DomainError, UsageError

#: Target tail mass for truncating count supports.
TAIL_EPS = 1e-10
#: Hard cap on truncation points.
TRUNCATION_CAP = 10_000


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator for the stream identified by ``(seed, *keys)``.

    Keys are typically (run, entity, chain) indices; distinct key tuples give
    statistically independent streams and the same tuple always gives the
    same stream.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


# --------------------------------------------------------------------------
# Count distributions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Poisson:
    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise DomainError(f"Poisson rate must be positive, got {self.lam}")


@dataclass(frozen=True)
class NegBin:
    """Negative binomial with pmf C(n+r-1, n) (1-p)^r p^n, mean r p / (1-p)."""

    r: float
    p: float

    def __post_init__(self):
        if not (np.isfinite(self.r) and self.r > 0):
            raise DomainError(f"NegBin shape must be positive, got {self.r}")
        if not (0 < self.p < 1):
            raise DomainError(f"NegBin probability must lie in (0, 1), got {self.p}")


@dataclass(frozen=True)
class Bernoulli:
    theta: float

    def __post_init__(self):
        if not (0 <= self.theta <= 1):
            raise DomainError(f"Bernoulli probability must lie in [0, 1], got {self.theta}")


CountDist = Union[Poisson, NegBin, Bernoulli]


def poisson_logpmf(n, lam):
    """Vectorised log P(N=n) for N ~ Poisson(lam); lam=0 is the point mass at 0."""
    n = np.asarray(n)
    lam = np.asarray(lam, dtype=float)
    out = special.xlogy(n, lam) - lam - special.gammaln(n + 1.0)
    return np.where(n < 0, -np.inf, out)


def negbin_logpmf(n, r, p):
    """Vectorised log pmf of NB(r, p) in the (1-p)^r p^n parameterisation."""
    n = np.asarray(n)
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    out = (special.gammaln(n + r) - special.gammaln(r) - special.gammaln(n + 1.0)
           + r * np.log1p(-p) + special.xlogy(n, p))
    return np.where(n < 0, -np.inf, out)


def count_logpmf(dist: CountDist, n):
    """log P(N=n) for a validated count distribution."""
    n = np.asarray(n)
    if np.any(n < 0):
        raise DomainError("count argument must be non-negative")
    if isinstance(dist, Poisson):
        return poisson_logpmf(n, dist.lam)
    if isinstance(dist, NegBin):
        return negbin_logpmf(n, dist.r, dist.p)
    if isinstance(dist, Bernoulli):
        with np.errstate(divide="ignore"):
            return np.where(n == 0, np.log1p(-dist.theta),
                            np.where(n == 1, np.log(dist.theta), -np.inf))
    raise UsageError(f"unknown count distribution {dist!r}")


def count_pmf(dist: CountDist, n):
    """P(N=n); returns a float for scalar ``n``."""
    out = np.exp(count_logpmf(dist, n))
    return float(out) if np.ndim(out) == 0 else out


def count_mean(dist: CountDist) -> float:
    if isinstance(dist, Poisson):
        return dist.lam
    if isinstance(dist, NegBin):
        return dist.r * dist.p / (1.0 - dist.p)
    return dist.theta


def _sf(dist: CountDist, n):
    if isinstance(dist, Poisson):
        return stats.poisson.sf(n, dist.lam)
    if isinstance(dist, NegBin):
        # scipy's nbinom counts failures with success prob 1-p in our notation
        return stats.nbinom.sf(n, dist.r, 1.0 - dist.p)
    return np.where(np.asarray(n) >= 1, 0.0, dist.theta)


def truncation_point(dist: CountDist, eps: float = TAIL_EPS, cap: int = TRUNCATION_CAP) -> int:
    """Smallest N with P(N' <= N) >= 1 - eps, capped at ``cap``."""
    if isinstance(dist, Bernoulli):
        return 1 if dist.theta > eps else 0
    mean = count_mean(dist)
    # bracket then bisect on the survival function
    lo, hi = 0, min(cap, max(8, int(4 * mean + 40)))
    while hi < cap and _sf(dist, hi) > eps:
        lo, hi = hi, min(cap, 2 * hi)
    if _sf(dist, hi) > eps:
        return cap
    if _sf(dist, lo) <= eps:
        hi = lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _sf(dist, mid) <= eps:
            hi = mid
        else:
            lo = mid
    return int(hi) if _sf(dist, 0) > eps else 0


# --------------------------------------------------------------------------
# Random-effect laws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BivariateNormal:
    """Bivariate normal with means, variances and correlation."""

    mu1: float
    mu2: float
    var1: float
    var2: float
    rho: float

    def __post_init__(self):
        if not (self.var1 > 0 and self.var2 > 0):
            raise DomainError("bivariate normal variances must be positive")
        if not (-1 < self.rho < 1):
            raise DomainError("correlation must lie in (-1, 1)")

    dim = 2

    @property
    def mean_vec(self):
        return np.array([self.mu1, self.mu2])

    @property
    def cov(self):
        c = self.rho * math.sqrt(self.var1 * self.var2)
        return np.array([[self.var1, c], [c, self.var2]])

    @property
    def chol(self):
        return np.linalg.cholesky(self.cov)


@dataclass(frozen=True)
class BetaGamma:
    """Independent Beta(a, b) x Gamma(alpha, rate=beta)."""

    a: float
    b: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("a", "b", "alpha", "beta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DomainError(f"BetaGamma parameter {name} must be positive, got {v}")

    dim = 2

    @property
    def mean_vec(self):
        return np.array([self.a / (self.a + self.b), self.alpha / self.beta])


@dataclass(frozen=True)
class ScalarNormal:
    mean: float
    var: float

    def __post_init__(self):
        if not (np.isfinite(self.var) and self.var > 0):
            raise DomainError(f"normal variance must be positive, got {self.var}")

    dim = 1

    @property
    def mean_vec(self):
        return np.array([self.mean])


REPriorLaw = Union[BivariateNormal, BetaGamma, ScalarNormal]


def _check_dim(law, theta):
    theta = np.asarray(theta, dtype=float)
    if law.dim == 1 and theta.ndim == 0:
        theta = theta[None]
    if theta.shape[-1] != law.dim:
        raise UsageError(f"{type(law).__name__} expects {law.dim}-dimensional theta, "
                         f"got trailing shape {theta.shape[-1]}")
    return theta


def prior_logpdf(law: REPriorLaw, theta):
    """Joint log density; ``-inf`` outside the support.  Vectorised over leading axes."""
    theta = _check_dim(law, theta)
    if isinstance(law, ScalarNormal):
        x = theta[..., 0]
        out = -0.5 * np.log(2 * np.pi * law.var) - 0.5 * (x - law.mean) ** 2 / law.var
    elif isinstance(law, BivariateNormal):
        z = theta - law.mean_vec
        prec = np.linalg.inv(law.cov)
        quad = np.einsum("...i,ij,...j->...", z, prec, z)
        out = -np.log(2 * np.pi) - 0.5 * np.log(np.linalg.det(law.cov)) - 0.5 * quad
    elif isinstance(law, BetaGamma):
        t1, t2 = theta[..., 0], theta[..., 1]
        inside = (t1 > 0) & (t1 < 1) & (t2 > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            lb = stats.beta.logpdf(t1, law.a, law.b)
            lg = stats.gamma.logpdf(t2, law.alpha, scale=1.0 / law.beta)
        out = np.where(inside, lb + lg, -np.inf)
    else:
        raise UsageError(f"unknown prior law {law!r}")
    return float(out) if np.ndim(out) == 0 else out


def sample_prior(law: REPriorLaw, rng: np.random.Generator, size=None):
    """Draw from the law.  Returns shape ``(dim,)`` or ``(size, dim)``."""
    n = 1 if size is None else int(size)
    if isinstance(law, ScalarNormal):
        out = law.mean + math.sqrt(law.var) * rng.standard_normal((n, 1))
    elif isinstance(law, BivariateNormal):
        z = rng.standard_normal((n, 2))
        out = law.mean_vec + z @ law.chol.T
    elif isinstance(law, BetaGamma):
        # numpy's gamma sampler is Marsaglia-Tsang; Beta via two gammas
        g1 = rng.standard_gamma(law.a, n)
        g2 = rng.standard_gamma(law.b, n)
        t2 = rng.standard_gamma(law.alpha, n) / law.beta
        out = np.column_stack([g1 / (g1 + g2), t2])
    else:
        raise UsageError(f"unknown prior law {law!r}")
    return out[0] if size is None else out


# --------------------------------------------------------------------------
# Link functions
# --------------------------------------------------------------------------


def softplus(x):
    """ln(1 + e^x), evaluated as max(x, 0) + ln(1 + e^{-|x|})."""
    x = np.asarray(x, dtype=float)
    ax = np.exp(-np.abs(x))
    return np.maximum(x, 0.0) + np.log1p(ax)


def log_sigmoid(x):
    """log(1 / (1 + e^{-x})) without overflow."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def log1m_sigmoid(x):
    """log(1 - sigmoid(x)) without overflow."""
    return -np.logaddexp(0.0, np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Link:
    """A scalar response function and its derivative."""

    name: str
    fn: Callable
    deriv: Callable

    def __call__(self, x):
        return self.fn(x)


SOFTPLUS = Link("softplus", softplus, special.expit)
EXP = Link("exp", np.exp, np.exp)
LOGISTIC = Link("logistic", special.expit, lambda x: special.expit(x) * special.expit(-np.asarray(x)))

_LINKS = {lk.name: lk for lk in (SOFTPLUS, EXP, LOGISTIC)}


def get_link(name: str) -> Link:
    try:
        return _LINKS[name.lower()]
    except KeyError:
        raise UsageError(f"unknown link {name!r}; expected one of {sorted(_LINKS)}") from None


def link_eval(link: Link, x):
    out = link.fn(x)
    return float(out) if np.ndim(out) == 0 else out


def link_deriv(link: Link, x):
    out = link.deriv(x)
    return float(out) if np.ndim(out) == 0 else out
