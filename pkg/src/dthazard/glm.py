"""Parametric discrete hazard models fitted as binary GLMs on person-period data."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .data import (
    TIME, AugmentedDataset, Covariate, DataError, MULTI_FACTOR,
)

logger = logging.getLogger(__name__)

LINKS = ("logit", "cloglog")
INTERCEPT = "(Intercept)"
SEPARATION_BOUND = 15.0


class ConvergenceWarning(UserWarning):
    pass


class SeparationWarning(UserWarning):
    pass


# -- links -------------------------------------------------------------------

def inverse_link(eta, link: str = "logit") -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if link == "logit":
        return 0.5 * (1.0 + np.tanh(0.5 * eta))
    if link == "cloglog":
        return -np.expm1(-np.exp(np.minimum(eta, 700.0)))
    raise ValueError(f"unknown link {link!r}")


def _mu_eta(eta, link):
    """Derivative of the inverse link."""
    if link == "logit":
        mu = inverse_link(eta, link)
        return mu * (1.0 - mu)
    e = np.exp(np.minimum(eta, 700.0))
    return e * np.exp(-e)


# -- design ------------------------------------------------------------------

def encode_covariates(covariates: Mapping[str, np.ndarray], schema: Sequence[Covariate],
                      names: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Numeric pass-through, 0/1 for binary factors, treatment dummies otherwise."""
    by_name = {c.name: c for c in schema}
    cols, colnames = [], []
    for name in names:
        if name not in by_name:
            raise DataError(f"unknown covariate {name!r}")
        cov = by_name[name]
        v = np.asarray(covariates[name])
        if not cov.is_factor:
            cols.append(v.astype(float))
            colnames.append(name)
            continue
        v = v.astype(str)
        unknown = set(np.unique(v)) - set(cov.levels)
        if unknown:
            raise DataError(f"unknown level(s) {sorted(unknown)} for factor {name!r}")
        if cov.kind == MULTI_FACTOR:
            for level in cov.levels[1:]:
                cols.append((v == level).astype(float))
                colnames.append(f"{name}[{level}]")
        else:
            cols.append((v == cov.levels[1]).astype(float))
            colnames.append(name)
    n = len(next(iter(covariates.values()))) if covariates else 0
    X = np.column_stack(cols) if cols else np.zeros((n, 0))
    return X, colnames


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    columns: list[str]
    times: np.ndarray
    covariates: list[str]
    intercept: bool


def build_design(aug: AugmentedDataset, encode_time: str = "dummies",
                 covariates: Sequence[str] | None = None, intercept: bool = False) -> Design:
    """Design matrix: time dummies (ascending), optional intercept, then covariates."""
    if aug.n_rows == 0:
        raise DataError("augmented dataset is empty")
    if encode_time not in ("dummies", "none"):
        raise ValueError(f"encode_time must be 'dummies' or 'none', got {encode_time!r}")
    names = aug.covariate_names if covariates is None else list(covariates)
    Xc, cnames = encode_covariates(aug.covariates, aug.schema, names)
    for j, name in enumerate(cnames):
        if np.ptp(Xc[:, j]) == 0:
            warnings.warn(f"covariate column {name!r} is constant", UserWarning, stacklevel=2)
    blocks, columns = [], []
    times = np.unique(aug.time)
    if encode_time == "dummies":
        blocks.append((aug.time[:, None] == times[None, :]).astype(float))
        columns += [f"{TIME}{t}" for t in times]
    else:
        times = np.zeros(0, dtype=np.int64)
        if intercept:
            blocks.append(np.ones((aug.n_rows, 1)))
            columns.append(INTERCEPT)
    blocks.append(Xc.reshape(aug.n_rows, -1))
    columns += cnames
    X = np.hstack(blocks) if blocks else np.zeros((aug.n_rows, 0))
    return Design(X, np.asarray(aug.y, dtype=float), columns, times, names,
                  intercept and encode_time == "none")


def aliased_columns(X: np.ndarray, rtol: float = 1e-7) -> np.ndarray:
    """Boolean mask of columns linearly dependent on the columns before them."""
    if X.shape[1] == 0:
        return np.zeros(0, dtype=bool)
    R = linalg.qr(X, mode="r", pivoting=False)[0]
    diag = np.abs(np.diag(R))
    norms = np.linalg.norm(X, axis=0)
    return diag <= rtol * np.maximum(norms, 1e-300)


# -- fitting -----------------------------------------------------------------

@dataclass
class IRLSResult:
    coef: np.ndarray
    covariance: np.ndarray
    loglik: float
    penalized_loglik: float
    n_iter: int
    converged: bool
    aliased: np.ndarray
    score: np.ndarray
    fitted: np.ndarray = field(repr=False)
    info: np.ndarray = field(repr=False)
    history: list = field(default_factory=list, repr=False)


def _loglik(y, eta, mu, link):
    if link == "logit":
        # log-sigmoid form stays finite for large |eta|
        return float(-np.sum(np.logaddexp(0.0, np.where(y == 1, -eta, eta))))
    p_obs = np.where(y == 1, mu, 1.0 - mu)
    return float(np.sum(np.log(np.maximum(p_obs, 1e-300))))


def _solve_spd(A, b):
    try:
        return linalg.cho_solve(linalg.cho_factor(A, check_finite=False), b, check_finite=False)
    except linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _inv_spd(A):
    try:
        c = linalg.cho_factor(A, check_finite=False)
        return linalg.cho_solve(c, np.eye(A.shape[0]), check_finite=False)
    except linalg.LinAlgError:
        return np.linalg.pinv(A, hermitian=True)


def fit_irls(X, y, penalty=None, max_iter: int = 50, tol: float = 1e-8, link: str = "logit",
             beta0=None, max_halvings: int = 10, penalty_root=None) -> IRLSResult:
    """Maximise the (penalised) binomial log-likelihood by Newton / Fisher scoring.

    The objective is ``l(beta) - beta' S beta / 2`` with ``S = penalty``.
    Iteration stops once the largest absolute score component and the
    relative change of the objective both drop below ``tol`` (the score
    threshold is scaled by ``1 + max|S beta|`` when penalised).  Steps that
    decrease the objective are halved up to ``max_halvings`` times.
    ``penalty_root`` (``R`` with ``R'R = S``) evaluates the penalty as
    ``|R beta|^2``, which avoids cancellation when ``S`` has huge entries.

    Without a penalty, columns that are linear combinations of earlier
    columns are dropped with a warning; their coefficients are NaN.
    """
    if link not in LINKS:
        raise ValueError(f"unknown link {link!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    aliased = np.zeros(p, dtype=bool)
    if penalty is None:
        aliased = aliased_columns(X)
        if aliased.any():
            warnings.warn(f"dropping {aliased.sum()} aliased column(s) at positions "
                          f"{np.flatnonzero(aliased).tolist()}", UserWarning, stacklevel=2)
        S = np.zeros((p, p))
    else:
        S = np.asarray(penalty, dtype=float)
    keep = ~aliased
    Xk, Sk = X[:, keep], S[np.ix_(keep, keep)]
    pk = Xk.shape[1]
    Rk = None if penalty_root is None else np.asarray(penalty_root, dtype=float)[:, keep]

    def evaluate(beta):
        eta = Xk @ beta
        mu = inverse_link(eta, link)
        ll = _loglik(y, eta, mu, link)
        pen = beta @ Sk @ beta if Rk is None else np.sum((Rk @ beta) ** 2)
        return eta, mu, ll, ll - 0.5 * pen

    if beta0 is None:
        beta = np.zeros(pk)
    else:
        beta = np.asarray(beta0, dtype=float)[keep].copy()
    eta, mu, ll, llp = evaluate(beta)
    converged = False
    history = [llp]
    it = 0
    for it in range(1, max_iter + 1):
        d = _mu_eta(eta, link)
        var = np.clip(mu * (1.0 - mu), 1e-300, None)
        w = d * d / var
        score = Xk.T @ ((y - mu) * d / var) - Sk @ beta
        info = (Xk * w[:, None]).T @ Xk + Sk
        step = _solve_spd(info, score)
        for _ in range(max_halvings + 1):
            new = beta + step
            e2, m2, l2, lp2 = evaluate(new)
            if np.isfinite(lp2) and lp2 >= llp - 1e-12 * abs(llp):
                break
            step = step / 2.0
        else:
            logger.debug("step-halving exhausted at iteration %d", it)
            break
        rel = abs(lp2 - llp) / (abs(lp2) + tol)
        beta, eta, mu, ll, llp = new, e2, m2, l2, lp2
        history.append(llp)
        d = _mu_eta(eta, link)
        var = np.clip(mu * (1.0 - mu), 1e-300, None)
        score = Xk.T @ ((y - mu) * d / var) - Sk @ beta
        # penalised fits: rounding in S @ beta sets the attainable score floor
        floor = tol * (1.0 + np.max(np.abs(Sk @ beta), initial=0.0))
        floor += 64 * np.finfo(float).eps * np.max(np.abs(Sk) @ np.abs(beta), initial=0.0)
        if np.max(np.abs(score), initial=0.0) < floor and rel < tol:
            converged = True
            break

    d = _mu_eta(eta, link)
    var = np.clip(mu * (1.0 - mu), 1e-300, None)
    w = d * d / var
    info = (Xk * w[:, None]).T @ Xk + Sk
    cov_k = _inv_spd(info)
    score = Xk.T @ ((y - mu) * d / var) - Sk @ beta
    if not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", ConvergenceWarning,
                      stacklevel=2)
    if penalty is None and pk and np.max(np.abs(beta)) > SEPARATION_BOUND:
        warnings.warn("coefficient magnitude above 15: possible (quasi-)separation",
                      SeparationWarning, stacklevel=2)

    coef = np.full(p, np.nan)
    coef[keep] = beta
    cov = np.full((p, p), np.nan)
    cov[np.ix_(keep, keep)] = cov_k
    full_score = np.full(p, np.nan)
    full_score[keep] = score
    full_info = np.full((p, p), np.nan)
    full_info[np.ix_(keep, keep)] = info
    return IRLSResult(coef, cov, ll, llp, it, converged, aliased, full_score, mu, full_info, history)


# -- model -------------------------------------------------------------------

@dataclass
class ParametricHazardModel:
    """Fitted ``h(gamma_0t + x' gamma)`` model on person-period data."""

    link: str
    param_names: list[str]
    params: np.ndarray
    covariance: np.ndarray
    times: np.ndarray
    covariate_names: list[str]
    covariate_columns: list[str]
    schema: tuple[Covariate, ...]
    horizon: int
    loglik: float
    n_iter: int
    converged: bool
    intercept: bool = False

    @property
    def intercepts(self) -> np.ndarray:
        return self.params[: len(self.times)]

    @property
    def coefficients(self) -> dict[str, float]:
        start = len(self.times) + int(self.intercept)
        return dict(zip(self.covariate_columns, self.params[start:]))

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def linear_predictor(self, time, covariates: Mapping[str, np.ndarray]) -> np.ndarray:
        time = np.atleast_1d(np.asarray(time))
        Xc, _ = encode_covariates(covariates, self.schema, self.covariate_names)
        start = len(self.times) + int(self.intercept)
        gamma = np.nan_to_num(self.params[start:])
        eta = Xc @ gamma if Xc.shape[1] else np.zeros(len(time))
        if self.intercept:
            eta = eta + np.nan_to_num(self.params[len(self.times)])
        elif len(self.times):
            pos = np.searchsorted(self.times, time)
            pos = np.clip(pos, 0, len(self.times) - 1)
            ok = (self.times[pos] == time) | (time >= self.horizon)
            if not ok.all():
                raise ValueError(f"no intercept for time(s) {np.unique(time[~ok]).tolist()}")
            eta = eta + np.nan_to_num(self.intercepts)[pos]
        return eta

    def hazard(self, time, covariates: Mapping[str, np.ndarray]) -> np.ndarray:
        time = np.atleast_1d(np.asarray(time))
        if np.any(time < 1):
            raise ValueError("time must be >= 1")
        lam = inverse_link(self.linear_predictor(time, covariates), self.link)
        return np.where(time >= self.horizon, 1.0, lam)

    __call__ = hazard

    def baseline_hazard(self) -> pd.DataFrame:
        """Hazard per time interval with all encoded covariates at zero."""
        if self.intercept or not len(self.times):
            raise ValueError("model has no time-specific intercepts")
        return pd.DataFrame({TIME: self.times,
                             "intercept": self.intercepts,
                             "hazard": inverse_link(self.intercepts, self.link)})

    def to_dict(self) -> dict:
        n_t = len(self.times)
        return {
            "type": "parametric",
            "link": self.link,
            "horizon": self.horizon,
            "times": self.times.tolist(),
            "intercepts": _jsonable(self.intercepts),
            "intercept": _jsonable(self.params[n_t]) if self.intercept else None,
            "coefficients": {k: _jsonable(v) for k, v in self.coefficients.items()},
            "param_names": self.param_names,
            "covariance": _jsonable(self.covariance.ravel()),
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "covariates": self.covariate_names,
            "schema": [c.to_dict() for c in self.schema],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParametricHazardModel":
        schema = tuple(Covariate.from_dict(c) for c in d["schema"])
        times = np.asarray(d["times"], dtype=np.int64)
        params = list(_unjson(d["intercepts"]))
        if d.get("intercept") is not None:
            params.append(_unjson(d["intercept"]))
        params += [_unjson(v) for v in d["coefficients"].values()]
        p = len(params)
        cov = np.asarray(_unjson(d["covariance"]), dtype=float).reshape(p, p)
        return cls(d["link"], list(d["param_names"]), np.asarray(params, dtype=float), cov, times,
                   list(d["covariates"]), list(d["coefficients"]), schema, int(d["horizon"]),
                   float(d["loglik"]), int(d["n_iter"]), bool(d["converged"]),
                   d.get("intercept") is not None)


def _jsonable(v):
    if np.ndim(v) == 0:
        v = float(v)
        return None if np.isnan(v) else v
    return [None if np.isnan(x) else float(x) for x in np.asarray(v, dtype=float)]


def _unjson(v):
    if isinstance(v, list):
        return [np.nan if x is None else x for x in v]
    return np.nan if v is None else v


def fit_parametric(aug: AugmentedDataset, covariates: Sequence[str] | None = None,
                   encode_time: str = "dummies", link: str = "logit", intercept: bool = False,
                   max_iter: int = 50, tol: float = 1e-8) -> ParametricHazardModel:
    """Fit the proportional continuation ratio model (or its cloglog variant)."""
    design = build_design(aug, encode_time, covariates, intercept)
    res = fit_irls(design.X, design.y, max_iter=max_iter, tol=tol, link=link)
    ncov = design.X.shape[1] - len(design.times) - int(design.intercept)
    return ParametricHazardModel(
        link, design.columns, res.coef, res.covariance, design.times, design.covariates,
        design.columns[len(design.columns) - ncov:], tuple(c for c in aug.schema
                                                           if c.name in design.covariates),
        aug.horizon, res.loglik, res.n_iter, res.converged, design.intercept,
    )


def predict_hazard(model: ParametricHazardModel, t, x: Mapping) -> np.ndarray | float:
    """Hazard at time(s) ``t`` for covariate values ``x`` (scalars or arrays)."""
    scalar = np.ndim(t) == 0 and all(np.ndim(v) == 0 for v in x.values())
    n = max([np.size(t)] + [np.size(v) for v in x.values()])
    t = np.broadcast_to(np.asarray(t), (n,))
    cols = {k: np.broadcast_to(np.asarray(v), (n,)) for k, v in x.items()}
    out = model.hazard(t, cols)
    return float(out[0]) if scalar else out


def continuation_ratio_factor(model: ParametricHazardModel, covariate: str):
    """``exp(gamma_j)``: multiplicative change of the continuation ratio.

    Multi-level factors give a dict with one factor per non-reference level.
    """
    coefs = model.coefficients
    if covariate in coefs:
        return float(np.exp(coefs[covariate]))
    prefix = f"{covariate}["
    multi = {k[len(prefix):-1]: float(np.exp(v)) for k, v in coefs.items() if k.startswith(prefix)}
    if not multi:
        raise KeyError(covariate)
    return multi


def wald_table(model: ParametricHazardModel, covariates_only: bool = False) -> pd.DataFrame:
    """Estimates, standard errors, z statistics and two-sided normal p-values."""
    se = np.sqrt(np.diag(model.covariance))
    coef = model.params
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, coef / se, np.nan)
    z = np.where((coef == 0) & (se > 0), 0.0, z)
    p = 2.0 * stats.norm.sf(np.abs(z))
    if np.any(~(se > 0) & ~np.isnan(coef)):
        warnings.warn("zero standard error: p-value undefined", UserWarning, stacklevel=2)
    table = pd.DataFrame({"coef": coef, "se": se, "z": z, "p": p}, index=model.param_names)
    if covariates_only:
        table = table.loc[model.covariate_columns]
    return table
