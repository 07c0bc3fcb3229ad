"""Conditional observation laws for hurdle and zero-inflated random-effect models.

Every model shares one decomposition: conditional on the random effect
``theta``, a Bernoulli gate ``Z_t`` with success probability ``p_t(theta)``
and an independent count ``N_t`` are drawn, and the observation is

* hurdle:        ``Y_t = Z_t * (1 + N_t)``  (zero iff the gate is closed)
* zero-inflated: ``Y_t = Z_t * N_t``        (structural and sampling zeros)

A model class only has to say how ``theta`` maps to the gate and the count
law; :func:`cond_logpmf`, :func:`cond_mean` and :func:`simulate_paths` are
shared.  ``theta`` arrays carry the latent dimension on the last axis and any
leading axes broadcast against the observation argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from . import dists
from .dists import BetaGamma, BivariateNormal, Link, ScalarNormal
from .errors import DomainError, UsageError

HURDLE = "hurdle"
ZERO_INFLATED = "zeroinflated"
PLAIN = "plain"


# --------------------------------------------------------------------------
# Count-part helpers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PoissonPart:
    """Poisson count law with (array-valued) rate."""

    lam: np.ndarray

    def logpmf(self, n):
        return dists.poisson_logpmf(n, self.lam)

    @property
    def mean(self):
        return self.lam

    def truncation(self, eps=dists.TAIL_EPS):
        lam = float(np.max(self.lam))
        return dists.truncation_point(dists.Poisson(lam), eps) if lam > 0 else 0


@dataclass(frozen=True)
class NegBinPart:
    """NB(r, p) count law, p given through log p and log(1 - p) for accuracy."""

    r: float
    log_p: np.ndarray
    log_q: np.ndarray

    def logpmf(self, n):
        n = np.asarray(n)
        r = self.r
        return (special.gammaln(n + r) - special.gammaln(r) - special.gammaln(n + 1.0)
                + r * self.log_q + n * self.log_p)

    @property
    def mean(self):
        return self.r * np.exp(self.log_p - self.log_q)

    def truncation(self, eps=dists.TAIL_EPS):
        p = float(np.exp(np.max(self.log_p)))
        p = min(p, 1 - 1e-15)
        return dists.truncation_point(dists.NegBin(self.r, p), eps)


def compose_logpmf(rule: str, y, log_p, log_q, count_logpmf):
    """log P(Y=y) from the gate log-probabilities and a count log-pmf callable."""
    y = np.asarray(y)
    if rule == HURDLE:
        pos = log_p + count_logpmf(np.maximum(y - 1, 0))
        return np.where(y == 0, log_q, pos)
    if rule == ZERO_INFLATED:
        pos = log_p + count_logpmf(y)
        zero = np.logaddexp(log_q, log_p + count_logpmf(0))
        return np.where(y == 0, zero, pos)
    if rule == PLAIN:
        return count_logpmf(y)
    raise UsageError(f"unknown composition rule {rule!r}")


def compose_mean(rule: str, p, count_mean):
    if rule == HURDLE:
        return p * (1.0 + count_mean)
    if rule == ZERO_INFLATED:
        return p * count_mean
    return count_mean


def _seq_at(seq: Sequence[float], t: int, extend: bool, name: str) -> float:
    if t < 1:
        raise UsageError(f"time index must be >= 1, got {t}")
    if t <= len(seq):
        return float(seq[t - 1])
    if extend:
        return float(seq[-1])
    raise UsageError(f"time index {t} beyond {name} of length {len(seq)}")


# --------------------------------------------------------------------------
# Model specifications
# --------------------------------------------------------------------------


class _Model:
    """Shared interface; subclasses define ``_gate`` and ``_count``."""

    rule = HURDLE

    @property
    def dim(self) -> int:
        return self.law.dim

    def _theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.dim == 1 and theta.ndim == 0:
            theta = theta[None]
        if theta.shape[-1] != self.dim:
            raise UsageError(f"{type(self).__name__} expects theta with trailing dimension "
                             f"{self.dim}, got shape {theta.shape}")
        return theta

    def gate(self, t, theta):
        """Return ``(log p_t, log(1 - p_t))``."""
        return self._gate(t, self._theta(theta))

    def count(self, t, theta):
        return self._count(t, self._theta(theta))

    def gate_prob(self, t, theta):
        return np.exp(self.gate(t, theta)[0])


@dataclass(frozen=True)
class GaussHurdle(_Model):
    """Bernoulli(logistic(theta1)) gate, Poisson(exp(theta2)) count, bivariate normal effects."""

    law: BivariateNormal

    def _gate(self, t, theta):
        x = theta[..., 0]
        return dists.log_sigmoid(x), dists.log1m_sigmoid(x)

    def _count(self, t, theta):
        return PoissonPart(np.exp(theta[..., 1]))


@dataclass(frozen=True)
class GaussZIP(GaussHurdle):
    """Zero-inflated counterpart of :class:`GaussHurdle`."""

    rule = ZERO_INFLATED


@dataclass(frozen=True)
class ConjHurdle(_Model):
    """Bernoulli(theta1) gate, Poisson(theta2) count, Beta x Gamma effects."""

    law: BetaGamma

    def _gate(self, t, theta):
        x = theta[..., 0]
        with np.errstate(divide="ignore"):
            return np.log(x), np.log1p(-x)

    def _count(self, t, theta):
        return PoissonPart(theta[..., 1])


@dataclass(frozen=True)
class ComonoHurdle(_Model):
    """Single scalar effect driving both parts: logistic(c_t + theta), link(d_t + theta)."""

    law: ScalarNormal
    link: Link = dists.SOFTPLUS
    c_seq: tuple = (0.0,)
    d_seq: tuple = (0.0,)
    extend: bool = True

    def __post_init__(self):
        if len(self.c_seq) == 0 or len(self.d_seq) == 0:
            raise UsageError("c_seq and d_seq need at least one entry")
        object.__setattr__(self, "c_seq", tuple(float(c) for c in self.c_seq))
        object.__setattr__(self, "d_seq", tuple(float(d) for d in self.d_seq))

    def c(self, t):
        return _seq_at(self.c_seq, t, self.extend, "c_seq")

    def d(self, t):
        return _seq_at(self.d_seq, t, self.extend, "d_seq")

    def _gate(self, t, theta):
        x = self.c(t) + theta[..., 0]
        return dists.log_sigmoid(x), dists.log1m_sigmoid(x)

    def _count(self, t, theta):
        return PoissonPart(self.link(self.d(t) + theta[..., 0]))


@dataclass(frozen=True)
class ZIPComono(ComonoHurdle):
    """Zero-inflated counterpart of :class:`ComonoHurdle`."""

    rule = ZERO_INFLATED


@dataclass(frozen=True)
class NBHurdle(ComonoHurdle):
    """Comonotonic hurdle with NB(r, logistic(d_t + theta / r)) count part."""

    r: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not (np.isfinite(self.r) and self.r > 0):
            raise DomainError(f"NB shape r must be positive, got {self.r}")

    def _count(self, t, theta):
        x = self.d(t) + theta[..., 0] / self.r
        return NegBinPart(self.r, dists.log_sigmoid(x), dists.log1m_sigmoid(x))


@dataclass(frozen=True)
class PoissonMixed(_Model):
    """Poisson GLMM kernel: Y ~ Poisson(exp(log_rate + theta)), no gate."""

    law: ScalarNormal
    log_rate: float = 0.0

    rule = PLAIN

    def _gate(self, t, theta):
        z = np.zeros(theta.shape[:-1])
        return z, np.full_like(z, -np.inf)

    def _count(self, t, theta):
        return PoissonPart(np.exp(self.log_rate + theta[..., 0]))


ModelSpec = _Model

FAMILIES = {
    "gauss_hurdle": GaussHurdle,
    "gauss_zip": GaussZIP,
    "conj_hurdle": ConjHurdle,
    "comono_hurdle": ComonoHurdle,
    "nb_hurdle": NBHurdle,
    "zip_comono": ZIPComono,
    "poisson_mixed": PoissonMixed,
}


# --------------------------------------------------------------------------
# Conditional laws
# --------------------------------------------------------------------------


def cond_logpmf(spec: ModelSpec, t: int, theta, y):
    """log P(Y_t = y | theta); broadcasts ``theta[..., 0]`` against ``y``."""
    y = np.asarray(y)
    if np.any(y < 0):
        raise DomainError("observations must be non-negative")
    log_p, log_q = spec.gate(t, theta)
    count = spec.count(t, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = compose_logpmf(spec.rule, y, log_p, log_q, count.logpmf)
    return np.where(np.isnan(out), -np.inf, out)


def cond_pmf(spec: ModelSpec, t: int, theta, y):
    """P(Y_t = y | theta)."""
    out = np.exp(cond_logpmf(spec, t, theta, y))
    return float(out) if np.ndim(out) == 0 else out


def cond_mean(spec: ModelSpec, t: int, theta):
    """E[Y_t | theta]."""
    log_p, _ = spec.gate(t, theta)
    out = compose_mean(spec.rule, np.exp(log_p), spec.count(t, theta).mean)
    return float(out) if np.ndim(out) == 0 else out


def cond_truncation(spec: ModelSpec, t: int, theta, eps: float = dists.TAIL_EPS) -> int:
    """A support bound N with P(Y_t > N | theta) <= eps for every theta given."""
    n = spec.count(t, theta).truncation(eps)
    return n + 1 if spec.rule == HURDLE else n


# --------------------------------------------------------------------------
# Histories and simulation
# --------------------------------------------------------------------------


def as_history(history) -> np.ndarray:
    """Validate and return a claim history as a 1-D int array."""
    arr = np.asarray(history)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64)
    if arr.ndim != 1:
        raise DomainError("a claim history is a 1-D sequence of counts")
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise DomainError("claim counts must be integers")
    if np.any(arr < 0):
        raise DomainError("claim counts must be non-negative")
    return arr.astype(np.int64)


def sufficient_stats(history) -> tuple[int, int]:
    """``(r_t, m_t)``: number of positive counts and total excess over one."""
    y = as_history(history)
    pos = y > 0
    return int(pos.sum()), int((y[pos] - 1).sum())


def history_loglik(spec: ModelSpec, history, theta):
    """sum_s log P(Y_s = y_s | theta), vectorised over leading axes of theta."""
    y = as_history(history)
    theta = spec._theta(theta)
    out = np.zeros(theta.shape[:-1])
    for s, ys in enumerate(y, start=1):
        out = out + cond_logpmf(spec, s, theta, ys)
    return out


def _draw_count(part, rng):
    if isinstance(part, PoissonPart):
        return rng.poisson(part.lam)
    # numpy's success probability is our 1 - p
    return rng.negative_binomial(part.r, np.exp(part.log_q))


def draw_observations(rule: str, p, part, rng: np.random.Generator) -> np.ndarray:
    """One draw of Y per entry of ``p``: gate Z ~ Bernoulli(p), count from ``part``, composed by ``rule``."""
    p = np.asarray(p, dtype=float)
    z = rng.random(p.shape) < p
    cnt = _draw_count(part, rng)
    if rule == HURDLE:
        return (z * (1 + cnt)).astype(np.int64)
    if rule == ZERO_INFLATED:
        return (z * cnt).astype(np.int64)
    return np.asarray(cnt, dtype=np.int64)


def simulate_paths(spec: ModelSpec, T: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Simulate ``n`` independent paths of length ``T``; returns an (n, T) int array."""
    if T < 1:
        raise UsageError("path length T must be >= 1")
    theta = dists.sample_prior(spec.law, rng, size=n)
    out = np.empty((n, T), dtype=np.int64)
    for t in range(1, T + 1):
        out[:, t - 1] = draw_observations(spec.rule, spec.gate_prob(t, theta),
                                          spec.count(t, theta), rng)
    return out


def simulate_path(spec: ModelSpec, T: int, rng: np.random.Generator) -> np.ndarray:
    """One path: draw theta once, then T conditionally independent observations."""
    return simulate_paths(spec, T, 1, rng)[0]
