"""Covariate-linked estimation on claim panels.

Random-effect families are fitted by Metropolis-within-Gibbs on per-entity
sufficient statistics; the cross-sectional benchmarks by Newton's method.
Fitted models are turned back into per-entity :mod:`zerocred.models` specs
(plugging in posterior means of the global parameters) for prediction and
credibility-order diagnostics.

Families
--------
``gauss``   hurdle with bivariate normal effects, means linked to covariates
``conj``    hurdle with Beta x Gamma effects; ``b_i``, ``alpha_i`` linked, ``a < beta`` enforced
``comono``  hurdle with one normal effect, softplus count link, ``c_i``, ``d_i`` linked
``glmm``    Poisson GLMM with lognormal effect ``R_i ~ N(-d^2/2, d^2)``
``glm``, ``hurdle``, ``zip``  maximum-likelihood benchmarks without random effects
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import special

from . import dists, models, orders, posterior
from .dists import BetaGamma, BivariateNormal, ScalarNormal
from .errors import DataError, DiagnosticError, UsageError
from .posterior import Deductible, Identity, Limit, MCMCConfig

MCMC_FAMILIES = ("gauss", "conj", "comono", "glmm")
MLE_FAMILIES = ("glm", "hurdle", "zip")

ENTITY_TYPES = ("Misc", "City", "County", "School", "Town", "Village")
ENTITY_TYPE_PROBS = (5.03, 9.66, 11.47, 36.42, 16.90, 20.52)
COVERAGE_LEVELS = (1, 2, 3)
COVERAGE_PROBS = (33.4, 33.2, 33.4)

COEF_PRIOR_SD = 10.0
GRAD_TOL = 1e-8


# --------------------------------------------------------------------------
# Panel data
# --------------------------------------------------------------------------


@dataclass
class PanelDataset:
    """Long-format panel: one row per (entity, period) with time-constant covariates.

    ``covariates`` lists the design columns in order; an ``intercept`` column
    is added when the input has none.  ``truth`` holds simulation parameters
    for synthetic panels.
    """

    frame: pd.DataFrame
    covariates: tuple
    truth: Optional[dict] = None
    source_rows: Optional[np.ndarray] = None  # 1-based input row of each frame row

    @classmethod
    def from_frame(cls, df: pd.DataFrame, first_period: Optional[int] = 1,
                   truth: Optional[dict] = None) -> "PanelDataset":
        """Validate ``df``; errors name the 1-based data row and the column."""
        for col in ("entity", "period", "count"):
            if col not in df.columns:
                raise DataError(f"missing required column {col!r}", column=col)
        df = df.reset_index(drop=True).copy()
        df["entity"] = df["entity"].astype(str)
        for col in ("period", "count"):
            vals = pd.to_numeric(df[col], errors="coerce")
            bad = ~np.isfinite(vals.to_numpy(dtype=float)) | (vals.to_numpy(dtype=float) % 1 != 0)
            if bad.any():
                raise DataError(f"{col} must be an integer", row=int(np.argmax(bad)) + 1, column=col)
            df[col] = vals.astype(np.int64)
        if (df["count"] < 0).any():
            raise DataError("count must be non-negative",
                            row=int(np.argmax((df["count"] < 0).to_numpy())) + 1, column="count")
        if (df["period"] < 1).any():
            raise DataError("period must be >= 1",
                            row=int(np.argmax((df["period"] < 1).to_numpy())) + 1, column="period")
        covs = [c for c in df.columns if c not in ("entity", "period", "count")]
        for c in covs:
            vals = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
            bad = ~np.isfinite(vals)
            if bad.any():
                raise DataError("covariate must be a finite number", row=int(np.argmax(bad)) + 1,
                                column=c)
            df[c] = vals
        if "intercept" not in covs:
            df.insert(3, "intercept", 1.0)
            covs = ["intercept"] + covs
        dup = df.duplicated(["entity", "period"])
        if dup.any():
            raise DataError("duplicate (entity, period)", row=int(np.argmax(dup.to_numpy())) + 1,
                            column="period")
        for ent, g in df.groupby("entity", sort=False):
            per = np.sort(g["period"].to_numpy())
            start = per[0] if first_period is None else first_period
            if not np.array_equal(per, np.arange(start, start + len(per))):
                pos = g.index[np.argmax(g["period"].to_numpy() != g["period"].min())]
                raise DataError(f"periods of entity {ent!r} are not contiguous from {start}",
                                row=int(pos) + 1, column="period")
            for c in covs:
                v = g[c].to_numpy()
                if np.any(v != v[0]):
                    pos = g.index[np.argmax(v != v[0])]
                    raise DataError(f"covariate varies over time for entity {ent!r}",
                                    row=int(pos) + 1, column=c)
        df = df.sort_values(["entity", "period"], kind="mergesort")
        rows = df.index.to_numpy() + 1
        df = df.reset_index(drop=True)
        return cls(df[["entity", "period", "count"] + covs], tuple(covs), truth, rows)

    @classmethod
    def from_csv(cls, path, first_period: Optional[int] = 1) -> "PanelDataset":
        try:
            df = pd.read_csv(path, dtype={"entity": str})
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise DataError(f"cannot parse panel CSV: {exc}") from None
        return cls.from_frame(df, first_period)

    def to_csv(self, path=None) -> str:
        text = self.frame.to_csv(index=False, lineterminator="\r\n", float_format="%.17g")
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @property
    def entities(self) -> np.ndarray:
        return np.array(sorted(self.frame["entity"].unique()), dtype=object)

    @property
    def k(self) -> int:
        return len(self.entities)

    def design(self) -> np.ndarray:
        """(k, p) covariate matrix, rows in :attr:`entities` order."""
        first = self.frame.groupby("entity", sort=True).first()
        return first[list(self.covariates)].to_numpy(dtype=float)

    def histories(self) -> list:
        return [g["count"].to_numpy(dtype=np.int64)
                for _, g in self.frame.groupby("entity", sort=True)]

    def periods(self) -> dict:
        return {e: g["period"].to_numpy() for e, g in self.frame.groupby("entity", sort=True)}

    def subset_periods(self, max_period: int) -> "PanelDataset":
        return PanelDataset(self.frame[self.frame["period"] <= max_period].reset_index(drop=True),
                            self.covariates, self.truth)


def split_last_period(panel: PanelDataset) -> tuple:
    """Split off each entity's last period as a holdout panel."""
    df = panel.frame
    last = df.groupby("entity")["period"].transform("max")
    train = df[df["period"] < last].reset_index(drop=True)
    hold = df[df["period"] == last].reset_index(drop=True)
    return PanelDataset(train, panel.covariates, panel.truth), \
        PanelDataset(hold, panel.covariates, panel.truth)


@dataclass
class _Stats:
    """Per-entity sufficient statistics for time-constant linear predictors."""

    r: np.ndarray  # number of positive counts
    m: np.ndarray  # sum of (y - 1) over positive counts
    T: np.ndarray  # periods observed
    S: np.ndarray  # total count
    c_hurdle: np.ndarray  # -sum log((y-1)!) over positive counts
    c_pois: np.ndarray  # -sum log(y!)


def _stats(histories) -> _Stats:
    r, m, T, S, ch, cp = [], [], [], [], [], []
    for y in histories:
        pos = y[y > 0]
        r.append(len(pos))
        m.append(int((pos - 1).sum()))
        T.append(len(y))
        S.append(int(y.sum()))
        ch.append(-float(special.gammaln(pos).sum()))
        cp.append(-float(special.gammaln(y + 1.0).sum()))
    f = lambda v: np.asarray(v, dtype=float)
    return _Stats(f(r), f(m), f(T), f(S), f(ch), f(cp))


def _check_design(X):
    if X.shape[0] < X.shape[1] or np.linalg.matrix_rank(X) < X.shape[1]:
        raise UsageError("design matrix is rank deficient")


# --------------------------------------------------------------------------
# Synthetic panels
# --------------------------------------------------------------------------


def _categorical_design(k, rng):
    et = rng.choice(len(ENTITY_TYPES), size=k, p=np.array(ENTITY_TYPE_PROBS) / sum(ENTITY_TYPE_PROBS))
    cov = rng.choice(3, size=k, p=np.array(COVERAGE_PROBS) / sum(COVERAGE_PROBS))
    cols = {"intercept": np.ones(k)}
    for j, name in enumerate(ENTITY_TYPES[1:], start=1):
        cols[f"type_{name}"] = (et == j).astype(float)
    for j in (1, 2):
        cols[f"coverage_{j + 1}"] = (cov == j).astype(float)
    return pd.DataFrame(cols)


def _single_design(k, rng):
    return pd.DataFrame({"intercept": np.ones(k), "x1": rng.standard_normal(k)})


DESIGNS = {"categorical": _categorical_design, "single": _single_design}

_CAT_EFFECTS = np.array([0.0, 0.3, 0.5, -0.2, 0.1, 0.2, 0.3, 0.5])

DEFAULT_TRUTH = {
    "single": {
        "comono": {"beta_c": [0.5, -0.3], "beta_d": [0.2, 0.4], "kappa2": 0.5},
        "gauss": {"beta1": [0.3, -0.4], "beta2": [-0.2, 0.3], "var1": 0.5, "var2": 0.4,
                  "rho": 0.3},
        "conj": {"a": 1.0, "beta": 2.0, "beta_b": [0.3, 0.4], "beta_alpha": [0.2, -0.3]},
        "glmm": {"beta": [-0.2, 0.4], "d": 0.6},
    },
    "categorical": {
        "comono": {"beta_c": list(_CAT_EFFECTS - [0.3, 0, 0, 0, 0, 0, 0, 0]),
                   "beta_d": list(0.5 * _CAT_EFFECTS - [0.5, 0, 0, 0, 0, 0, 0, 0]),
                   "kappa2": 0.5},
        "gauss": {"beta1": list(_CAT_EFFECTS - [0.3, 0, 0, 0, 0, 0, 0, 0]),
                  "beta2": list(0.5 * _CAT_EFFECTS - [0.5, 0, 0, 0, 0, 0, 0, 0]),
                  "var1": 0.3, "var2": 1.0, "rho": 0.5},
        "conj": {"a": 1.0, "beta": 2.0, "beta_b": list(-0.5 * _CAT_EFFECTS + [0.3, 0, 0, 0, 0, 0, 0, 0]),
                 "beta_alpha": list(0.5 * _CAT_EFFECTS)},
        "glmm": {"beta": list(0.5 * _CAT_EFFECTS - [0.2, 0, 0, 0, 0, 0, 0, 0]), "d": 0.6},
    },
}


def _entity_laws(family: str, params: dict, X: np.ndarray):
    """Per-entity model pieces: linear predictors and the shared random-effect law."""
    if family == "comono":
        return {"c": X @ np.asarray(params["beta_c"]), "d": X @ np.asarray(params["beta_d"])}
    if family == "gauss":
        return {"mu1": X @ np.asarray(params["beta1"]), "mu2": X @ np.asarray(params["beta2"])}
    if family == "conj":
        return {"b": np.exp(X @ np.asarray(params["beta_b"])),
                "alpha": np.exp(X @ np.asarray(params["beta_alpha"]))}
    if family == "glmm":
        return {"eta": X @ np.asarray(params["beta"])}
    raise UsageError(f"unknown family {family!r}")


def entity_specs(family: str, params: dict, X: np.ndarray) -> list:
    """One :mod:`zerocred.models` spec per row of ``X`` at the given global parameters."""
    lin = _entity_laws(family, params, X)
    out = []
    for i in range(X.shape[0]):
        if family == "comono":
            out.append(models.ComonoHurdle(ScalarNormal(0.0, params["kappa2"]), dists.SOFTPLUS,
                                           (lin["c"][i],), (lin["d"][i],)))
        elif family == "gauss":
            out.append(models.GaussHurdle(BivariateNormal(lin["mu1"][i], lin["mu2"][i],
                                                          params["var1"], params["var2"],
                                                          params["rho"])))
        elif family == "conj":
            out.append(models.ConjHurdle(BetaGamma(params["a"], lin["b"][i], lin["alpha"][i],
                                                   params["beta"])))
        else:
            d2 = params["d"] ** 2
            out.append(models.PoissonMixed(ScalarNormal(-d2 / 2, d2), float(lin["eta"][i])))
    return out


def _simulate_family(family, params, X, T, rng):
    k = X.shape[0]
    lin = _entity_laws(family, params, X)
    if family == "comono":
        theta = math.sqrt(params["kappa2"]) * rng.standard_normal(k)
        p = special.expit(lin["c"] + theta)
        part = models.PoissonPart(dists.softplus(lin["d"] + theta))
        rule, latent = models.HURDLE, theta[:, None]
    elif family == "gauss":
        law = BivariateNormal(0.0, 0.0, params["var1"], params["var2"], params["rho"])
        theta = dists.sample_prior(law, rng, size=k) + np.column_stack([lin["mu1"], lin["mu2"]])
        p = special.expit(theta[:, 0])
        part = models.PoissonPart(np.exp(theta[:, 1]))
        rule, latent = models.HURDLE, theta
    elif family == "conj":
        g1 = rng.standard_gamma(params["a"], k)
        g2 = rng.standard_gamma(lin["b"], k)
        t1 = g1 / (g1 + g2)
        t2 = rng.standard_gamma(lin["alpha"], k) / params["beta"]
        p, part = t1, models.PoissonPart(t2)
        rule, latent = models.HURDLE, np.column_stack([t1, t2])
    elif family == "glmm":
        d = params["d"]
        R = -d * d / 2 + d * rng.standard_normal(k)
        p, part = np.ones(k), models.PoissonPart(np.exp(lin["eta"] + R))
        rule, latent = models.PLAIN, R[:, None]
    else:
        raise UsageError(f"cannot simulate family {family!r}")
    Y = np.column_stack([models.draw_observations(rule, p, part, rng) for _ in range(T)])
    return Y, latent


def synth_panel(k: int, T: int, family: str = "comono", params: Optional[dict] = None,
                design: str = "categorical", rng: Optional[np.random.Generator] = None,
                seed: int = 0) -> PanelDataset:
    """Simulate a panel with the covariate structure of a municipal fleet portfolio.

    ``categorical`` draws an entity type (six levels, reference Misc) and a
    coverage level (three levels, reference 1), one-hot encoded with an
    intercept; ``single`` uses an intercept and one standard normal covariate.
    The true parameters and latent effects are stored in ``truth``.
    """
    if k < 1 or T < 1:
        raise UsageError("synth_panel needs k >= 1 and T >= 1")
    if design not in DESIGNS:
        raise UsageError(f"unknown design {design!r}; expected one of {sorted(DESIGNS)}")
    if family not in MCMC_FAMILIES:
        raise UsageError(f"unknown family {family!r}; expected one of {MCMC_FAMILIES}")
    rng = rng if rng is not None else dists.make_rng(seed)
    params = dict(params if params is not None else DEFAULT_TRUTH[design][family])
    Xdf = DESIGNS[design](k, rng)
    Y, latent = _simulate_family(family, params, Xdf.to_numpy(), T, rng)
    width = len(str(k))
    ents = [f"E{i + 1:0{width}d}" for i in range(k)]
    df = pd.DataFrame({
        "entity": np.repeat(ents, T),
        "period": np.tile(np.arange(1, T + 1), k),
        "count": Y.ravel(),
    })
    df = pd.concat([df, Xdf.loc[np.repeat(np.arange(k), T)].reset_index(drop=True)], axis=1)
    truth = {"family": family, "design": design, "params": _jsonable(params),
             "latent": latent.tolist()}
    return PanelDataset.from_frame(df, truth=truth)


# --------------------------------------------------------------------------
# Fit results
# --------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass
class FitResult:
    family: str
    method: str  # "mcmc" or "mle"
    covariates: tuple
    params: dict  # posterior means or MLEs, natural scale
    sd: dict  # posterior SDs or asymptotic standard errors
    intervals: dict = field(default_factory=dict)  # 95% equal-tailed credible intervals
    entities: list = field(default_factory=list)
    entity_effects: dict = field(default_factory=dict)  # {"mean": (k, q), "sd": (k, q)}
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    draws: Optional[dict] = field(default=None, repr=False)  # not serialised

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "draws"}
        d["covariates"] = list(self.covariates)
        return _jsonable(d)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        d = dict(d)
        d["covariates"] = tuple(d["covariates"])
        d.pop("draws", None)
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# MCMC families
# --------------------------------------------------------------------------


def _normal_logprior(beta):
    return -0.5 * float(np.sum(np.square(beta))) / COEF_PRIOR_SD ** 2


class _Orthogonal:
    """Coefficients sampled in an orthonormalised design basis: X beta = Xq gamma."""

    def __init__(self, X):
        k = X.shape[0]
        Q, R = np.linalg.qr(X)
        sign = np.sign(np.diag(R))
        sign[sign == 0] = 1
        Q, R = Q * sign, (R.T * sign).T
        self.Xq = Q * math.sqrt(k)
        self.M = np.linalg.solve(R, np.eye(X.shape[1])) * math.sqrt(k)  # beta = M gamma
        self.Minv = np.linalg.inv(self.M)

    def beta(self, gamma):
        return gamma @ self.M.T

    def gamma(self, beta):
        return np.asarray(beta) @ self.Minv.T


class _Family:
    """A random-effect family on per-entity statistics.

    The engine state is an unconstrained global vector ``g`` and an entity
    matrix ``E`` of shape (k, q).  ``entity_logdens`` returns, per entity, the
    log-likelihood plus the log prior of that entity's effect.
    """

    q = 1
    gibbs_blocks = ()

    def __init__(self, X, st: _Stats):
        self.X, self.st = X, st
        self.k, self.p = X.shape
        self.basis = _Orthogonal(X)

    def mh_index(self):
        skip = {i for b in self.gibbs_blocks for i in b}
        return [j for j in range(self.G) if j not in skip]

    def gibbs(self, g, E, rng):
        return g


class _Comono(_Family):
    names = ("beta_c", "beta_d", "kappa2")

    def __init__(self, X, st):
        super().__init__(X, st)
        self.G = 2 * self.p + 1

    def split(self, g):
        p = self.p
        return g[:p], g[p:2 * p], g[2 * p]

    def init(self):
        g = np.zeros(self.G)
        return g, np.zeros((self.k, 1))

    def entity_logdens(self, g, E):
        gc, gd, lk = self.split(g)
        Xq, st = self.basis.Xq, self.st
        th = E[:, 0]
        x = Xq @ gc + th
        lam = dists.softplus(Xq @ gd + th)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = (st.r * dists.log_sigmoid(x) + (st.T - st.r) * dists.log1m_sigmoid(x)
                  + special.xlogy(st.m, lam) - st.r * lam + st.c_hurdle)
        k2 = math.exp(lk)
        return ll - 0.5 * th * th / k2 - 0.5 * lk

    def global_logprior(self, g):
        gc, gd, lk = self.split(g)
        b = self.basis
        return _normal_logprior(b.beta(gc)) + _normal_logprior(b.beta(gd)) - math.exp(lk) + lk

    def natural(self, g):
        gc, gd, lk = self.split(g)
        return {"beta_c": self.basis.beta(gc), "beta_d": self.basis.beta(gd),
                "kappa2": math.exp(lk)}


class _Gauss(_Family):
    names = ("beta1", "beta2", "var1", "var2", "rho")
    q = 2

    def __init__(self, X, st):
        super().__init__(X, st)
        self.G = 2 * self.p + 3
        self.gibbs_blocks = (tuple(range(2 * self.p)),)

    def split(self, g):
        p = self.p
        return g[:p], g[p:2 * p], g[2 * p], g[2 * p + 1], g[2 * p + 2]

    def init(self):
        return np.zeros(self.G), np.zeros((self.k, 2))

    def _cov(self, g):
        _, _, l1, l2, z = self.split(g)
        v1, v2, rho = math.exp(l1), math.exp(l2), math.tanh(z)
        c = rho * math.sqrt(v1 * v2)
        return np.array([[v1, c], [c, v2]])

    def entity_logdens(self, g, E):
        g1, g2, *_ = self.split(g)
        Xq, st = self.basis.Xq, self.st
        t1, t2 = E[:, 0], E[:, 1]
        ll = (st.r * dists.log_sigmoid(t1) + (st.T - st.r) * dists.log1m_sigmoid(t1)
              + st.m * t2 - st.r * np.exp(t2) + st.c_hurdle)
        S = self._cov(g)
        res = E - np.column_stack([Xq @ g1, Xq @ g2])
        prec = np.linalg.inv(S)
        quad = np.einsum("ij,jk,ik->i", res, prec, res)
        return ll - 0.5 * quad - 0.5 * math.log(np.linalg.det(S))

    def global_logprior(self, g):
        g1, g2, l1, l2, z = self.split(g)
        b = self.basis
        rho = math.tanh(z)
        return (_normal_logprior(b.beta(g1)) + _normal_logprior(b.beta(g2))
                - math.exp(l1) + l1 - math.exp(l2) + l2 + math.log1p(-rho * rho))

    def gibbs(self, g, E, rng):
        """Draw both coefficient vectors from their joint normal full conditional."""
        p = self.p
        P = np.linalg.inv(self._cov(g))
        Xq = self.basis.Xq
        prior_prec = self.basis.M.T @ self.basis.M / COEF_PRIOR_SD ** 2
        Q = np.kron(P, Xq.T @ Xq) + np.kron(np.eye(2), prior_prec)
        lin = (Xq.T @ E @ P).T.ravel()  # vec(Xq' E P), column-major
        L = np.linalg.cholesky(Q)
        mean = np.linalg.solve(L.T, np.linalg.solve(L, lin))
        draw = mean + np.linalg.solve(L.T, rng.standard_normal(2 * p))
        g = g.copy()
        g[:2 * p] = draw
        return g

    def natural(self, g):
        g1, g2, l1, l2, z = self.split(g)
        return {"beta1": self.basis.beta(g1), "beta2": self.basis.beta(g2),
                "var1": math.exp(l1), "var2": math.exp(l2), "rho": math.tanh(z)}


class _Conj(_Family):
    """Collapsed: Beta and Gamma effects are integrated out in closed form."""

    names = ("a", "beta", "beta_b", "beta_alpha")
    q = 0

    def __init__(self, X, st):
        super().__init__(X, st)
        self.G = 2 + 2 * self.p

    def split(self, g):
        p = self.p
        return g[0], g[1], g[2:2 + p], g[2 + p:]

    def init(self):
        g = np.zeros(self.G)
        return g, np.zeros((self.k, 0))

    def _ab(self, g):
        u, lb, *_ = self.split(g)
        beta = math.exp(lb)
        return beta * float(special.expit(u)), beta

    def entity_logdens(self, g, E):
        _, _, gb, ga = self.split(g)
        a, beta = self._ab(g)
        Xq, st = self.basis.Xq, self.st
        b = np.exp(Xq @ gb)
        al = np.exp(Xq @ ga)
        return (special.betaln(a + st.r, b + st.T - st.r) - special.betaln(a, b)
                + special.gammaln(al + st.m) - special.gammaln(al)
                + al * math.log(beta) - (al + st.m) * np.log(beta + st.r) + st.c_hurdle)

    def global_logprior(self, g):
        u, lb, gb, ga = self.split(g)
        a, beta = self._ab(g)
        s = float(special.expit(u))
        # Gamma(1,1) on a and beta restricted to a < beta, with the (u, log beta) Jacobian
        jac = math.log(beta) + math.log(s) + math.log1p(-s) + math.log(beta)
        return (-a - beta + jac + _normal_logprior(self.basis.beta(gb))
                + _normal_logprior(self.basis.beta(ga)))

    def natural(self, g):
        _, _, gb, ga = self.split(g)
        a, beta = self._ab(g)
        return {"a": a, "beta": beta, "beta_b": self.basis.beta(gb),
                "beta_alpha": self.basis.beta(ga)}


class _Glmm(_Family):
    names = ("beta", "d")

    def __init__(self, X, st):
        super().__init__(X, st)
        self.G = self.p + 1

    def init(self):
        g = np.zeros(self.G)
        g[-1] = math.log(0.5)
        return g, np.zeros((self.k, 1))

    def entity_logdens(self, g, E):
        gb, ld = g[:-1], g[-1]
        d = math.exp(ld)
        st = self.st
        eta = self.basis.Xq @ gb + E[:, 0]
        ll = st.S * eta - st.T * np.exp(eta) + st.c_pois
        z = E[:, 0] + d * d / 2
        return ll - 0.5 * z * z / (d * d) - ld

    def global_logprior(self, g):
        d = math.exp(g[-1])
        return _normal_logprior(self.basis.beta(g[:-1])) - 0.5 * d * d + g[-1]

    def natural(self, g):
        return {"beta": self.basis.beta(g[:-1]), "d": math.exp(g[-1])}


_FAMILY_CLASSES = {"comono": _Comono, "gauss": _Gauss, "conj": _Conj, "glmm": _Glmm}


def _finite(x):
    return np.where(np.isnan(x), -np.inf, x)


def _run_sampler(fam: _Family, cfg: MCMCConfig, rng: np.random.Generator):
    g, E = fam.init()
    k, q = E.shape
    ent = _finite(fam.entity_logdens(g, E))
    if not np.all(np.isfinite(ent)) or not np.isfinite(fam.global_logprior(g)):
        raise DiagnosticError("non-finite log-posterior at the initial values", last=g)
    mh = fam.mh_index()
    n_iter = cfg.burn_in + cfg.draws * cfg.thin
    sg = np.full(fam.G, 0.1 * cfg.proposal_scale)
    se = np.full((k, q), 0.5 * cfg.proposal_scale)
    win_g, win_e = np.zeros(fam.G), np.zeros((k, q))
    acc_g, acc_e = np.zeros(fam.G), np.zeros((k, q))
    G_draws = np.empty((cfg.draws, fam.G))
    E_sum, E_sq = np.zeros((k, q)), np.zeros((k, q))
    window = 50
    lp_g = fam.global_logprior(g)
    for it in range(n_iter):
        for j in range(q):
            prop = E.copy()
            prop[:, j] += se[:, j] * rng.standard_normal(k)
            lp = _finite(fam.entity_logdens(g, prop))
            ok = np.log(rng.random(k)) < lp - ent
            E[ok] = prop[ok]
            ent = np.where(ok, lp, ent)
            win_e[:, j] += ok
            if it >= cfg.burn_in:
                acc_e[:, j] += ok
        if fam.gibbs_blocks:
            g = fam.gibbs(g, E, rng)
            ent = _finite(fam.entity_logdens(g, E))
            lp_g = fam.global_logprior(g)
        cur = lp_g + ent.sum()
        for j in mh:
            prop = g.copy()
            prop[j] += sg[j] * rng.standard_normal()
            with np.errstate(over="ignore"):
                try:
                    lpg = fam.global_logprior(prop)
                except (OverflowError, ValueError):
                    lpg = -np.inf
                e_prop = _finite(fam.entity_logdens(prop, E)) if np.isfinite(lpg) else ent
            new = lpg + e_prop.sum()
            if math.log(rng.random()) < new - cur:
                g, ent, lp_g, cur = prop, e_prop, lpg, new
                win_g[j] += 1
                if it >= cfg.burn_in:
                    acc_g[j] += 1
        if cfg.adapt and it < cfg.burn_in and (it + 1) % window == 0:
            rg, re = win_g / window, win_e / window
            sg = np.where(rg < 0.30, sg * 0.7, np.where(rg > 0.45, sg * 1.4, sg))
            se = np.where(re < 0.30, se * 0.7, np.where(re > 0.45, se * 1.4, se))
            win_g[:], win_e[:] = 0, 0
        kk = it - cfg.burn_in
        if kk >= 0 and kk % cfg.thin == 0:
            G_draws[kk // cfg.thin] = g
            E_sum += E
            E_sq += E * E
    n_kept = cfg.draws * cfg.thin
    E_mean = E_sum / cfg.draws
    E_sd = np.sqrt(np.maximum(E_sq / cfg.draws - E_mean ** 2, 0.0))
    acc_g = acc_g / n_kept
    for b in fam.gibbs_blocks:
        acc_g[list(b)] = 1.0  # exact full-conditional draws
    acc = {"global": acc_g.tolist(),
           "entity": (acc_e.mean(axis=0) / n_kept).tolist() if q else []}
    return G_draws, E_mean, E_sd, acc


def _summarise(fam, G_draws):
    nat = [fam.natural(g) for g in G_draws]
    params, sd, intervals, draws = {}, {}, {}, {}
    for name in fam.names:
        arr = np.array([np.asarray(n[name], dtype=float) for n in nat])
        draws[name] = arr
        mean = arr.mean(axis=0)
        params[name] = mean.tolist() if arr.ndim > 1 else float(mean)
        s = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros_like(mean)
        sd[name] = s.tolist() if arr.ndim > 1 else float(s)
        lo, hi = np.percentile(arr, [2.5, 97.5], axis=0)
        intervals[name] = [lo.tolist(), hi.tolist()] if arr.ndim > 1 else [float(lo), float(hi)]
    return params, sd, intervals, draws


def fit_mcmc(panel: PanelDataset, family: str, cfg: Optional[MCMCConfig] = None,
             rng: Optional[np.random.Generator] = None) -> FitResult:
    """Metropolis-within-Gibbs fit of a random-effect family (single chain).

    Per-entity effects move by vectorised component-wise random-walk steps;
    global parameters by component-wise random walks in an orthonormalised
    coefficient basis, except the ``gauss`` coefficients which are drawn from
    their normal full conditional.  ``cfg.runs`` is not used.
    """
    if family not in MCMC_FAMILIES:
        raise UsageError(f"unknown MCMC family {family!r}; expected one of {MCMC_FAMILIES}")
    cfg = cfg or MCMCConfig()
    rng = rng if rng is not None else dists.make_rng(cfg.seed)
    if panel.k == 0:
        raise UsageError("panel is empty")
    X = panel.design()
    _check_design(X)
    st = _stats(panel.histories())
    fam = _FAMILY_CLASSES[family](X, st)
    G_draws, E_mean, E_sd, acc = _run_sampler(fam, cfg, rng)
    params, sd, intervals, draws = _summarise(fam, G_draws)
    if family == "conj":
        E_mean, E_sd = _conj_effects(params, X, st)
    names = [f"{n}" for n in fam.names]
    diag = {"acceptance": acc, "parameter_order": names,
            "note": "burn-in, thinning and chain length are package defaults"}
    if family == "glmm":
        diag["hyperprior"] = "d ~ half-normal(scale 1)"
        diag["mean_exp_effect"] = float(np.mean(_glmm_exp_effect(draws, E_mean, E_sd)))
    return FitResult(family, "mcmc", panel.covariates, params, sd, intervals,
                     list(panel.entities), {"mean": E_mean.tolist(), "sd": E_sd.tolist()},
                     diag, {"mcmc": asdict(cfg), "coef_prior_sd": COEF_PRIOR_SD}, draws)


def _conj_effects(params, X, st):
    """Posterior means and SDs of (Theta1, Theta2) at the fitted global parameters."""
    lin = _entity_laws("conj", params, X)
    a1, b1 = params["a"] + st.r, lin["b"] + st.T - st.r
    al, be = lin["alpha"] + st.m, params["beta"] + st.r
    m1 = a1 / (a1 + b1)
    s1 = np.sqrt(a1 * b1 / ((a1 + b1) ** 2 * (a1 + b1 + 1)))
    return np.column_stack([m1, al / be]), np.column_stack([s1, np.sqrt(al) / be])


def _glmm_exp_effect(draws, E_mean, E_sd):
    # lognormal approximation to E[exp(R_i) | data]
    return np.exp(E_mean[:, 0] + 0.5 * E_sd[:, 0] ** 2)


# --------------------------------------------------------------------------
# Maximum likelihood benchmarks
# --------------------------------------------------------------------------


def _newton(fgh, x0, tol=GRAD_TOL, max_iter=200):
    """Damped Newton ascent; ``fgh(x)`` returns (loglik, gradient, Hessian)."""
    x = np.asarray(x0, dtype=float).copy()
    f, g, H = fgh(x)
    for _ in range(max_iter):
        if np.linalg.norm(g) < tol:
            return x, f, g, H
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        if step @ g <= 0:  # not an ascent direction
            step = g / max(1.0, np.linalg.norm(g))
        t = 1.0
        while True:
            xn = x + t * step
            fn, gn, Hn = fgh(xn)
            if np.isfinite(fn) and fn >= f - 1e-12 * abs(f):
                break
            t *= 0.5
            if t < 1e-12:
                raise DiagnosticError("line search failed", last=x)
        x, f, g, H = xn, fn, gn, Hn
    if np.linalg.norm(g) < tol:
        return x, f, g, H
    raise DiagnosticError(f"Newton did not converge in {max_iter} iterations "
                          f"(gradient norm {np.linalg.norm(g):.3g})", last=x)


def _obs_design(panel: PanelDataset):
    cols = list(panel.covariates)
    return panel.frame[cols].to_numpy(dtype=float), panel.frame["count"].to_numpy(dtype=float)


def poisson_fgh(beta, X, y):
    eta = X @ beta
    lam = np.exp(eta)
    f = float(np.sum(y * eta - lam - special.gammaln(y + 1)))
    return f, X.T @ (y - lam), -(X.T * lam) @ X


def logistic_fgh(gamma, X, z):
    eta = X @ gamma
    p = special.expit(eta)
    f = float(np.sum(z * dists.log_sigmoid(eta) + (1 - z) * dists.log1m_sigmoid(eta)))
    return f, X.T @ (z - p), -(X.T * (p * (1 - p))) @ X


def truncated_poisson_fgh(beta, X, y):
    """Zero-truncated Poisson on positive counts."""
    eta = X @ beta
    lam = np.exp(eta)
    log1m = np.log(-np.expm1(-lam))
    f = float(np.sum(y * eta - lam - log1m - special.gammaln(y + 1)))
    mu = lam / -np.expm1(-lam)
    var = mu * (1 + lam - mu)
    return f, X.T @ (y - mu), -(X.T * var) @ X


def hurdle_fgh(theta, X, y):
    p = X.shape[1]
    gam, beta = theta[:p], theta[p:]
    f1, g1, H1 = logistic_fgh(gam, X, (y > 0).astype(float))
    pos = y > 0
    f2, g2, H2 = truncated_poisson_fgh(beta, X[pos], y[pos])
    H = np.zeros((2 * p, 2 * p))
    H[:p, :p], H[p:, p:] = H1, H2
    return f1 + f2, np.concatenate([g1, g2]), H


def zip_fgh(theta, X, y, zero_logit_offset=0.0):
    """ZIP with gate P(Y may be positive) = logistic(X gamma), count Poisson(exp(X beta)).

    ``zero_logit_offset`` is added to the logit of the structural-zero
    probability; ``-inf`` removes the inflation entirely.
    """
    p = X.shape[1]
    gam, beta = theta[:p], theta[p:]
    with np.errstate(invalid="ignore"):
        zeta = -(X @ gam) + zero_logit_offset  # logit of the structural-zero probability
    eta = X @ beta
    lam = np.exp(eta)
    pi = special.expit(zeta)
    zero = y == 0
    sp = np.logaddexp(0.0, zeta)
    f_pos = -sp - lam + y * eta - special.gammaln(y + 1)
    f_zero = np.logaddexp(zeta, -lam) - sp
    f = float(np.sum(np.where(zero, f_zero, f_pos)))
    w = special.expit(zeta + lam)  # P(structural zero | Y = 0)
    d_zeta = np.where(zero, w - pi, -pi)
    d_eta = np.where(zero, -(1 - w) * lam, y - lam)
    h_zz = np.where(zero, w * (1 - w) - pi * (1 - pi), -pi * (1 - pi))
    h_ze = np.where(zero, w * (1 - w) * lam, 0.0)
    h_ee = np.where(zero, -(1 - w) * lam + lam * lam * w * (1 - w), -lam)
    # chain rule: d/dgamma = -X' d/dzeta
    g = np.concatenate([-(X.T @ d_zeta), X.T @ d_eta])
    H = np.zeros((2 * p, 2 * p))
    H[:p, :p] = (X.T * h_zz) @ X
    H[:p, p:] = -(X.T * h_ze) @ X
    H[p:, :p] = H[:p, p:].T
    H[p:, p:] = (X.T * h_ee) @ X
    return f, g, H


def fit_logistic(X, z):
    """Standalone logistic regression MLE."""
    x, *_ = _newton(lambda b: logistic_fgh(b, X, z), np.zeros(X.shape[1]))
    return x


def fit_mle(panel: PanelDataset, family: str, no_inflation: bool = False) -> FitResult:
    """Cross-sectional maximum likelihood for the benchmark families.

    ``no_inflation`` (``zip`` only) fixes the gate open, so the fit is a
    plain Poisson GLM.
    """
    if family not in MLE_FAMILIES:
        raise UsageError(f"unknown MLE family {family!r}; expected one of {MLE_FAMILIES}")
    X, y = _obs_design(panel)
    _check_design(X)
    p = X.shape[1]
    if family == "zip" and no_inflation:
        b0 = np.zeros(p)
        b0[0] = math.log(max(y.mean(), 1e-3))

        def fgh(b):
            f, g, H = zip_fgh(np.concatenate([np.zeros(p), b]), X, y, -np.inf)
            return f, g[p:], H[p:, p:]

        x, f, g, H = _newton(fgh, b0)
        names = {"beta": slice(0, p)}
    elif family == "glm":
        b0 = np.zeros(p)
        b0[0] = math.log(max(y.mean(), 1e-3))
        x, f, g, H = _newton(lambda b: poisson_fgh(b, X, y), b0)
        names = {"beta": slice(0, p)}
    elif family == "hurdle":
        x, f, g, H = _newton(lambda t: hurdle_fgh(t, X, y), np.zeros(2 * p))
        names = {"gamma": slice(0, p), "beta": slice(p, 2 * p)}
    else:
        t0 = np.zeros(2 * p)
        t0[0] = 1.0
        t0[p] = math.log(max(y.mean(), 1e-3))
        x, f, g, H = _newton(lambda t: zip_fgh(t, X, y), t0)
        names = {"gamma": slice(0, p), "beta": slice(p, 2 * p)}
    cov = np.linalg.inv(-H)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    params = {n: x[s].tolist() for n, s in names.items()}
    sd = {n: se[s].tolist() for n, s in names.items()}
    diag = {"loglik": f, "gradient_norm": float(np.linalg.norm(g)), "n_obs": int(len(y))}
    cfg = {"no_inflation": bool(no_inflation)} if family == "zip" else {}
    return FitResult(family, "mle", panel.covariates, params, sd, {}, list(panel.entities),
                     {}, diag, cfg)


# --------------------------------------------------------------------------
# Prediction and diagnostics
# --------------------------------------------------------------------------


def _entity_rows(fit: FitResult, panel: PanelDataset):
    if tuple(panel.covariates) != tuple(fit.covariates):
        raise UsageError("panel covariates do not match the fitted model")
    return panel.entities, panel.design()


def _mle_mean(fit: FitResult, X):
    beta = np.asarray(fit.params["beta"])
    lam = np.exp(X @ beta)
    if fit.family == "glm" or fit.config.get("no_inflation"):
        return lam
    p = special.expit(X @ np.asarray(fit.params["gamma"]))
    if fit.family == "hurdle":
        return p * lam / -np.expm1(-lam)
    return p * lam


def _predict_method(fit):
    return posterior.CONJUGATE if fit.family == "conj" else posterior.QUADRATURE


def predict_oos(fit: FitResult, panel_train: PanelDataset, panel_holdout: PanelDataset,
                nodes: int = 32):
    """Out-of-sample MSE of one-step predictions for the holdout period.

    Random-effect families predict with the posterior predictive mean given the
    entity's training history (global parameters at their posterior means);
    benchmarks use the covariate-only mean.  Returns ``(mse, predictions)``.
    """
    ents, X = _entity_rows(fit, panel_train)
    index = {e: i for i, e in enumerate(ents)}
    hist = panel_train.histories()
    periods = panel_train.periods()
    hold = panel_holdout.frame
    missing = sorted(set(hold["entity"]) - set(index))
    if missing:
        raise UsageError(f"holdout entity {missing[0]!r} is not in the training panel")
    if hold["entity"].duplicated().any():
        raise UsageError("holdout must contain exactly one period per entity")
    rows = [index[e] for e in hold["entity"]]
    for e, per in zip(hold["entity"], hold["period"]):
        if per != periods[e][-1] + 1:
            raise UsageError(f"holdout period of entity {e!r} does not follow its training periods")
    if fit.method == "mle":
        pred = _mle_mean(fit, X[rows])
    else:
        specs = entity_specs(fit.family, fit.params, X[rows])
        method = _predict_method(fit)
        pred = np.array([posterior.predictive_expectation(s, hist[i], Identity(), method,
                                                          nodes=nodes)[0]
                         for s, i in zip(specs, rows)])
    y = hold["count"].to_numpy(dtype=float)
    out = pd.DataFrame({"entity": hold["entity"].to_numpy(), "period": hold["period"].to_numpy(),
                        "count": hold["count"].to_numpy(), "prediction": pred})
    return float(np.mean((y - pred) ** 2)), out


DEFAULT_TRANSFORMS = (Identity(), Deductible(1), Deductible(2), Limit(1), Limit(2))


def violation_report(fit: FitResult, panel: PanelDataset, t_anchor: int,
                     transforms: Sequence = DEFAULT_TRANSFORMS, nodes: int = 32) -> dict:
    """Counterfactual credibility-order check per entity.

    For each entity the first ``t_anchor - 1`` observations are held fixed and
    the predictive expectation of ``h(Y_{t_anchor+1})`` is compared under
    ``Y_{t_anchor} = 0`` and ``Y_{t_anchor} = 1``.  Returns ``{label: OrderReport}``.
    """
    if fit.method != "mcmc":
        raise UsageError("violation reports need a random-effect family")
    if t_anchor < 1:
        raise UsageError("t_anchor must be >= 1")
    ents, X = _entity_rows(fit, panel)
    hist = panel.histories()
    for e, h in zip(ents, hist):
        if len(h) < t_anchor:
            raise UsageError(f"entity {e!r} has fewer than {t_anchor} periods")
    specs = entity_specs(fit.family, fit.params, X)
    method = _predict_method(fit)
    reports = {}
    for h in transforms:
        comps = []
        for e, spec, y in zip(ents, specs, hist):
            base = tuple(int(v) for v in y[: t_anchor - 1])
            lo, hi = base + (0,), base + (1,)
            est, _ = posterior.predictive_expectations(spec, [lo, hi], h, method, nodes=nodes)
            gap = float(est[0] - est[1])
            bad = gap > orders.DET_TOL
            comps.append(orders.Comparison(lo, hi, float(est[0]), float(est[1]), orders.DET_TOL,
                                           bad, gap, "violation" if bad else "ok"))
        label = getattr(h, "label", repr(h))
        reports[label] = orders.OrderReport(comps, {
            "order": "base" if isinstance(h, Identity) else "general", "transform": label,
            "method": method, "family": fit.family, "t_anchor": t_anchor,
            "entities": [str(e) for e in ents], "plug_in": "posterior means of global parameters"})
    return reports
