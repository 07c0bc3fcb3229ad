"""Checks of credibility orders, likelihood-ratio order and total positivity.

Comparisons happen in the value domain with explicit tolerances.  For
deterministic methods a pair is a violation when the lower history's value
exceeds the higher one's by more than ``tol`` (default 1e-8).  For Monte Carlo
estimates the threshold is three times the combined MCSE, and smaller
reversals are reported as ``inconclusive``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import dists, models, posterior
from .dists import BetaGamma, Link
from .errors import UsageError
from .posterior import Identity, MCMCConfig, PosteriorState

DET_TOL = 1e-8
LR_TOL = 1e-12
MTP2_TOL = 1e-10
TAIL_INCONCLUSIVE = 1e-8


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class Comparison:
    history_low: tuple
    history_high: tuple
    value_low: float
    value_high: float
    tolerance: float
    violated: bool
    gap: float
    status: str = "ok"  # ok | violation | inconclusive


@dataclass
class OrderReport:
    comparisons: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n_violations(self) -> int:
        return sum(c.violated for c in self.comparisons)

    @property
    def violation_rate(self) -> float:
        return self.n_violations / len(self.comparisons) if self.comparisons else 0.0

    @property
    def n_inconclusive(self) -> int:
        return sum(c.status == "inconclusive" for c in self.comparisons)

    def violations(self):
        return [c for c in self.comparisons if c.violated]

    def summary(self) -> str:
        return (f"{len(self.comparisons)} comparisons, {self.n_violations} violations "
                f"(rate {self.violation_rate:.4f}), {self.n_inconclusive} inconclusive")

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "n_comparisons": len(self.comparisons),
            "n_violations": self.n_violations,
            "violation_rate": self.violation_rate,
            "comparisons": [
                {**asdict(c), "history_low": list(c.history_low),
                 "history_high": list(c.history_high)}
                for c in self.comparisons
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["history_low", "history_high", "value_low", "value_high",
                    "tolerance", "violated", "gap", "status"])
        for c in self.comparisons:
            w.writerow([" ".join(map(str, c.history_low)), " ".join(map(str, c.history_high)),
                        repr(c.value_low), repr(c.value_high), repr(c.tolerance),
                        int(c.violated), repr(c.gap), c.status])
        return buf.getvalue()


@dataclass(frozen=True)
class LatticeSpec:
    """The grid {0..y_max}^t of claim histories."""

    t: int
    y_max: int

    def __post_init__(self):
        if self.t < 1 or self.y_max < 1:
            raise UsageError("lattice needs t >= 1 and y_max >= 1")

    def points(self) -> list:
        return list(itertools.product(range(self.y_max + 1), repeat=self.t))

    def comparable_pairs(self, strict: bool = True) -> list:
        """All (x, x') with x <= x' coordinatewise (x != x' when strict)."""
        pts = self.points()
        arr = np.array(pts)
        le = np.all(arr[:, None, :] <= arr[None, :, :], axis=-1)
        if strict:
            np.fill_diagonal(le, False)
        i, j = np.nonzero(le)
        return [(pts[a], pts[b]) for a, b in zip(i, j)]


def _is_le(x, y) -> bool:
    return len(x) == len(y) and all(a <= b for a, b in zip(x, y))


# --------------------------------------------------------------------------
# Credibility orders
# --------------------------------------------------------------------------


def _pairs_from(histories):
    if isinstance(histories, LatticeSpec):
        return histories.comparable_pairs()
    pairs = [(tuple(int(v) for v in lo), tuple(int(v) for v in hi)) for lo, hi in histories]
    for lo, hi in pairs:
        if not _is_le(lo, hi):
            raise UsageError(f"histories {lo} and {hi} are not coordinatewise comparable")
    return pairs


def _evaluate(spec, pairs, h, method, cfg, nodes):
    uniq = sorted({p for pair in pairs for p in pair}, key=lambda x: (len(x), x))
    values = {}
    by_len = {}
    for u in uniq:
        by_len.setdefault(len(u), []).append(u)
    for t, hs in by_len.items():
        est, se = posterior.predictive_expectations(spec, hs, h, method, cfg, nodes,
                                                    stream=(t,))
        for u, e, s in zip(hs, est, se):
            values[u] = (float(e), float(s))
    return values


def check_general_order(spec, h, histories, method: str = posterior.QUADRATURE,
                        cfg: Optional[MCMCConfig] = None, tol: Optional[float] = None,
                        nodes: int = 64) -> OrderReport:
    """Check E[h(Y_{t+1}) | x] <= E[h(Y_{t+1}) | x'] for each comparable pair x <= x'.

    ``histories`` is a :class:`LatticeSpec` or an iterable of ``(x, x')`` pairs.
    """
    pairs = _pairs_from(histories)
    values = _evaluate(spec, pairs, h, method, cfg, nodes)
    mc = method == posterior.MCMC
    comps = []
    for lo, hi in pairs:
        (vl, sl), (vh, sh) = values[lo], values[hi]
        gap = vl - vh
        if mc:
            thr = 3.0 * math.hypot(sl, sh) if tol is None else tol
        else:
            thr = DET_TOL if tol is None else tol
        violated = gap > thr
        status = "violation" if violated else ("inconclusive" if (mc and gap > 0) else "ok")
        comps.append(Comparison(lo, hi, vl, vh, thr, violated, gap, status))
    meta = {"order": "base" if isinstance(h, Identity) else "general",
            "transform": getattr(h, "label", repr(h)), "method": method,
            "nodes": nodes if method == posterior.QUADRATURE else None}
    if cfg is not None and mc:
        meta["mcmc"] = asdict(cfg)
    return OrderReport(comps, meta)


def check_base_order(spec, histories, method: str = posterior.QUADRATURE,
                     cfg: Optional[MCMCConfig] = None, tol: Optional[float] = None,
                     nodes: int = 64) -> OrderReport:
    """Check E[Y_{t+1} | x] <= E[Y_{t+1} | x'] for each comparable pair x <= x'."""
    return check_general_order(spec, Identity(), histories, method, cfg, tol, nodes)


# --------------------------------------------------------------------------
# Likelihood ratio order and total positivity
# --------------------------------------------------------------------------


@dataclass
class LRReport:
    holds: bool
    inconclusive: bool
    first_violation: Optional[tuple]
    tail_low: float
    tail_high: float
    support_max: int


def check_lr_order(pmf_low, pmf_high, support_max: Optional[int] = None,
                   tol: float = LR_TOL, log: bool = False) -> LRReport:
    """Check f(x) g(y) >= f(y) g(x) for all x <= y <= support_max.

    The comparison is made on log values with tolerance ``tol`` (a relative
    tolerance on the products).  When either array leaves more than 1e-8 of
    probability mass beyond the support the result is flagged inconclusive and
    never counts as holding.
    """
    lf = np.asarray(pmf_low, dtype=float)
    lg = np.asarray(pmf_high, dtype=float)
    if not log:
        if np.any(lf < 0) or np.any(lg < 0):
            raise UsageError("pmf values must be non-negative")
        with np.errstate(divide="ignore"):
            lf, lg = np.log(lf), np.log(lg)
    n = max(len(lf), len(lg)) if support_max is None else support_max + 1
    lf = np.concatenate([lf, np.full(max(0, n - len(lf)), -np.inf)])[:n]
    lg = np.concatenate([lg, np.full(max(0, n - len(lg)), -np.inf)])[:n]
    tail_f = max(0.0, 1.0 - float(np.exp(lf).sum()))
    tail_g = max(0.0, 1.0 - float(np.exp(lg).sum()))
    lhs = lf[:, None] + lg[None, :]  # f(x) g(y)
    rhs = lf[None, :] + lg[:, None]  # f(y) g(x)
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    with np.errstate(invalid="ignore"):
        bad = upper & np.isfinite(rhs) & ~(lhs >= rhs - tol)
    first = None
    if bad.any():
        x, y = np.argwhere(bad)[0]
        first = (int(x), int(y))
    inconclusive = tail_f > TAIL_INCONCLUSIVE or tail_g > TAIL_INCONCLUSIVE
    return LRReport(first is None and not inconclusive, inconclusive, first,
                    tail_f, tail_g, n - 1)


def predictive_lr_check(spec, history_low, history_high, method: str = posterior.QUADRATURE,
                        nodes: int = 64) -> LRReport:
    """LR comparison of the one-step predictive laws given two histories."""
    f, _ = posterior.predictive_pmf(spec, history_low, method, nodes)
    g, _ = posterior.predictive_pmf(spec, history_high, method, nodes)
    return check_lr_order(f, g)


@dataclass
class TPReport:
    holds: bool
    n_checked: int
    worst_gap: float
    first_violation: Optional[tuple] = None


def check_tp2_kernel(spec, t: int, theta_grid: Sequence[float], y_max: int,
                     tol: float = MTP2_TOL) -> TPReport:
    """Check eta_t(y, th) eta_t(y', th') >= eta_t(y', th) eta_t(y, th') for y <= y', th <= th'.

    ``spec`` must have a scalar random effect.
    """
    grid = np.asarray(theta_grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise UsageError("theta grid must be sorted ascending")
    if spec.dim != 1:
        raise UsageError("TP2 kernel check needs a scalar random effect")
    ys = np.arange(y_max + 1)
    le = models.cond_logpmf(spec, t, grid[:, None, None], ys[None, :])  # (nth, ny)
    # A[y, y', i, j] = le[i,y] + le[j,y'] - le[i,y'] - le[j,y]
    lhs = le.T[:, None, :, None] + le.T[None, :, None, :]
    rhs = le.T[None, :, :, None] + le.T[:, None, None, :]
    ymask = np.triu(np.ones((len(ys), len(ys)), dtype=bool), 1)
    tmask = np.triu(np.ones((len(grid), len(grid)), dtype=bool), 1)
    mask = ymask[:, :, None, None] & tmask[None, None, :, :]
    with np.errstate(invalid="ignore"):
        diff = lhs - rhs
        bad = mask & np.isfinite(rhs) & ~(lhs >= rhs - tol)
    n_checked = int(mask.sum())
    fin = mask & np.isfinite(diff)
    worst = float(diff[fin].min()) if fin.any() else 0.0
    first = None
    if bad.any():
        y, yp, i, j = np.argwhere(bad)[0]
        first = (int(y), int(yp), float(grid[i]), float(grid[j]))
    return TPReport(first is None, n_checked, worst, first)


MAX_MTP2_T = 3
MAX_MTP2_YMAX = 6


def check_mtp2_lattice(joint, tol: float = MTP2_TOL, log: bool = False) -> TPReport:
    """Check g(x) g(y) <= g(x ^ y) g(x v y) for all lattice pairs.

    ``joint`` is an array of shape ``(y_max+1,)*t`` holding probabilities (or
    log-probabilities when ``log=True``).  Pairs whose right-hand side involves
    a zero factor are counted as satisfied only if the left side is zero too.
    """
    arr = np.asarray(joint, dtype=float)
    t = arr.ndim
    y_max = arr.shape[0] - 1
    if t > MAX_MTP2_T or y_max > MAX_MTP2_YMAX:
        raise UsageError(f"lattice too large for exhaustive MTP2 check (t <= {MAX_MTP2_T}, "
                         f"y_max <= {MAX_MTP2_YMAX})")
    if not log:
        with np.errstate(divide="ignore"):
            arr = np.log(arr)
    pts = np.array(list(itertools.product(range(y_max + 1), repeat=t)))
    lv = arr[tuple(pts.T)]
    lo = np.minimum(pts[:, None, :], pts[None, :, :])
    hi = np.maximum(pts[:, None, :], pts[None, :, :])
    lhs = lv[:, None] + lv[None, :]
    rhs = arr[tuple(np.moveaxis(lo, -1, 0))] + arr[tuple(np.moveaxis(hi, -1, 0))]
    with np.errstate(invalid="ignore"):
        bad = np.isfinite(lhs) & ~(rhs >= lhs - tol)
        diff = rhs - lhs
    fin = np.isfinite(diff)
    worst = float(diff[fin].min()) if fin.any() else 0.0
    first = None
    if bad.any():
        i, j = np.argwhere(bad)[0]
        first = (tuple(int(v) for v in pts[i]), tuple(int(v) for v in pts[j]))
    return TPReport(first is None, int(lhs.size), worst, first)


# --------------------------------------------------------------------------
# Analytic conditions
# --------------------------------------------------------------------------


def condition_eq53(state: PosteriorState) -> bool:
    """alpha* a* <= beta* (alpha* + beta* + 1): the r -> r+1 step does not lower the mean."""
    s = state
    return bool(s.alpha_star * s.a_star <= s.beta_star * (s.alpha_star + s.beta_star + 1.0))


def condition_a_lt_beta(prior: BetaGamma) -> bool:
    """Sufficient condition a < beta for the base order of the conjugate hurdle model."""
    return bool(prior.a < prior.beta)


def reachable_states(prior: BetaGamma, t_max: int, y_max: int, include_prior: bool = False,
                     need_zero: bool = True) -> list:
    """Posterior states reachable by histories in {0..y_max}^t, t = 1..t_max.

    With ``need_zero`` only states whose history contains a zero are returned:
    those are the states from which a 0 -> 1 change (r -> r+1 at fixed m)
    stays on the lattice.
    """
    out = []
    if include_prior:
        out.append(posterior.PosteriorState(prior.a, prior.b, prior.alpha, prior.beta, 0, 0, 0))
    for t in range(1, t_max + 1):
        r_max = t - 1 if need_zero else t
        for r in range(0, r_max + 1):
            for m in range(0, (y_max - 1) * r + 1):
                out.append(posterior.PosteriorState(prior.a + r, prior.b + t - r,
                                                    prior.alpha + m, prior.beta + r, r, m, t))
    return out


def softplus_condition(link: Link, d_range: Sequence[float], theta_range: Sequence[float],
                       grid_step: float = 0.05) -> bool:
    """True iff 0 <= link'(d + theta) <= 1 at every grid point of d + theta."""
    d = np.arange(d_range[0], d_range[1] + grid_step / 2, grid_step)
    th = np.arange(theta_range[0], theta_range[1] + grid_step / 2, grid_step)
    x = (d[:, None] + th[None, :]).ravel()
    der = np.asarray(link.deriv(x), dtype=float)
    return bool(np.all((der >= 0) & (der <= 1)))
