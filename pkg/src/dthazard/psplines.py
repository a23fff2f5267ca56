"""P-spline additive discrete hazard models.

Smooth terms use an equally spaced cubic B-spline basis with an m-th order
difference penalty on adjacent coefficients.  The model maximises

    l(beta) - 1/2 * sum_j delta_j * beta_j' K_j beta_j

by penalised IRLS, with each ``delta_j`` chosen by generalised
cross-validation unless fixed by the caller.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .data import TIME, AugmentedDataset, Covariate, DataError
from .glm import ConvergenceWarning, encode_covariates, fit_irls, inverse_link

logger = logging.getLogger(__name__)

LOG10_DELTA_RANGE = (-6.0, 8.0)
DEFAULT_TIME_BASIS = 10
DEFAULT_COVARIATE_BASIS = 20


class SmoothingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SplineBasisSpec:
    """B-spline basis for one variable.

    ``knots`` has ``n_basis + degree + 1`` entries; the basis is a partition
    of unity on ``[knots[degree], knots[n_basis]]``.  Leave it ``None`` and
    call :meth:`with_knots` to place knots for the observed data.
    """

    variable: str
    n_basis: int | None = None
    degree: int = 3
    penalty_order: int = 2
    knots: tuple[float, ...] | None = None
    centered: bool | None = None

    def __post_init__(self):
        if self.n_basis is None:
            nb = DEFAULT_TIME_BASIS if self.variable == TIME else DEFAULT_COVARIATE_BASIS
            object.__setattr__(self, "n_basis", nb)
        if self.centered is None:
            object.__setattr__(self, "centered", self.variable != TIME)
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.n_basis <= self.degree:
            raise ValueError("n_basis must exceed the degree")
        if self.n_basis <= self.penalty_order:
            raise ValueError("n_basis must exceed the penalty order")
        if self.knots is not None:
            k = np.asarray(self.knots, dtype=float)
            if len(k) != self.n_basis + self.degree + 1:
                raise ValueError(f"expected {self.n_basis + self.degree + 1} knots, got {len(k)}")
            if np.any(np.diff(k) <= 0):
                raise ValueError("knots must be strictly increasing")
            object.__setattr__(self, "knots", tuple(float(v) for v in k))

    @property
    def span(self) -> tuple[float, float]:
        return self.knots[self.degree], self.knots[self.n_basis]

    def with_knots(self, x) -> "SplineBasisSpec":
        """Equally spaced knots whose interior span covers ``x`` (padded by 1e-8 of its range)."""
        x = np.asarray(x, dtype=float)
        lo, hi = float(x.min()), float(x.max())
        eps = 1e-8 * (hi - lo if hi > lo else 1.0)
        lo, hi = lo - eps, hi + eps
        h = (hi - lo) / (self.n_basis - self.degree)
        knots = lo + h * np.arange(-self.degree, self.n_basis + 1)
        return replace(self, knots=tuple(knots))

    @property
    def label(self) -> str:
        return f"s({self.variable})"

    def to_dict(self) -> dict:
        return {"variable": self.variable, "n_basis": self.n_basis, "degree": self.degree,
                "penalty_order": self.penalty_order, "knots": list(self.knots or ()),
                "centered": self.centered}


def bspline_basis(spec: SplineBasisSpec, x, clamp: bool = False) -> np.ndarray:
    """Evaluate all ``n_basis`` B-splines at ``x`` by the Cox-de Boor recursion.

    Points outside the interior span raise ``ValueError`` unless ``clamp``
    is set, in which case they are moved to the nearest end of the span.
    """
    if spec.knots is None:
        raise ValueError("basis spec has no knots; call with_knots first")
    t = np.asarray(spec.knots, dtype=float)
    d, nb = spec.degree, spec.n_basis
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = t[d], t[nb]
    outside = (x < lo) | (x > hi)
    if outside.any():
        if not clamp:
            raise ValueError(f"{outside.sum()} point(s) outside the basis span [{lo}, {hi}]")
        x = np.clip(x, lo, hi)
    # degree-0 indicators; the right end of the span belongs to the last interval
    idx = np.clip(np.searchsorted(t, x, side="right") - 1, d, nb - 1)
    B = np.zeros((len(x), len(t) - 1))
    B[np.arange(len(x)), idx] = 1.0
    for p in range(1, d + 1):
        nfun = len(t) - 1 - p
        left_den = t[p:p + nfun] - t[:nfun]
        right_den = t[p + 1:p + 1 + nfun] - t[1:1 + nfun]
        left = (x[:, None] - t[None, :nfun]) / left_den[None, :]
        right = (t[None, p + 1:p + 1 + nfun] - x[:, None]) / right_den[None, :]
        B = left * B[:, :nfun] + right * B[:, 1:nfun + 1]
    return B


def difference_matrix(n_basis: int, order: int) -> np.ndarray:
    return np.diff(np.eye(n_basis), n=order, axis=0)


def difference_penalty(n_basis: int, order: int = 2) -> np.ndarray:
    """``K = D' D`` for the ``order``-th difference operator ``D``."""
    if n_basis <= order:
        raise ValueError("n_basis must exceed the penalty order")
    D = difference_matrix(n_basis, order)
    return D.T @ D


# -- model -------------------------------------------------------------------

@dataclass
class SmoothTerm:
    spec: SplineBasisSpec
    coefficients: np.ndarray
    delta: float
    edf: float

    @property
    def label(self) -> str:
        return self.spec.label

    def to_dict(self) -> dict:
        d = self.spec.to_dict()
        d.update(coefficients=self.coefficients.tolist(), delta=self.delta, edf=self.edf)
        return d


@dataclass
class AdditiveHazardModel:
    """Fitted additive hazard model: smooth terms plus linear covariate effects.

    ``params``/``covariance`` are in the original B-spline coefficient space
    (smooth blocks first, then intercept if present, then linear columns).
    """

    terms: list[SmoothTerm]
    linear_names: list[str]
    covariate_columns: list[str]
    intercept: float | None
    params: np.ndarray
    param_names: list[str]
    covariance: np.ndarray
    schema: tuple[Covariate, ...]
    horizon: int
    link: str
    loglik: float
    penalized_loglik: float
    gcv: float
    converged: bool
    n_iter: int

    @property
    def linear_coefficients(self) -> dict[str, float]:
        start = len(self.params) - len(self.covariate_columns)
        return dict(zip(self.covariate_columns, self.params[start:]))

    coefficients = linear_coefficients

    @property
    def deltas(self) -> np.ndarray:
        return np.array([t.delta for t in self.terms])

    @property
    def edf(self) -> dict[str, float]:
        return {t.label: t.edf for t in self.terms}

    def term(self, name: str) -> tuple[int, SmoothTerm]:
        for i, t in enumerate(self.terms):
            if name in (t.label, t.spec.variable):
                return i, t
        raise KeyError(name)

    def _blocks(self):
        start = 0
        for t in self.terms:
            yield t, slice(start, start + t.spec.n_basis)
            start += t.spec.n_basis

    def linear_predictor(self, time, covariates: Mapping[str, np.ndarray], clamp: bool = False):
        time = np.atleast_1d(np.asarray(time))
        eta = np.zeros(len(time))
        for term in self.terms:
            x = time if term.spec.variable == TIME else covariates[term.spec.variable]
            xb = np.asarray(x, dtype=float)
            if term.spec.variable == TIME:
                # the horizon itself is handled by hazard(); keep it inside the span
                xb = np.where(time >= self.horizon, term.spec.span[0], xb)
            eta += bspline_basis(term.spec, xb, clamp=clamp) @ term.coefficients
        if self.intercept is not None:
            eta += self.intercept
        if self.linear_names:
            X, _ = encode_covariates(covariates, self.schema, self.linear_names)
            eta += X @ np.array(list(self.linear_coefficients.values()))
        return eta

    def hazard(self, time, covariates: Mapping[str, np.ndarray], clamp: bool = False) -> np.ndarray:
        time = np.atleast_1d(np.asarray(time))
        lam = inverse_link(self.linear_predictor(time, covariates, clamp), self.link)
        return np.where(time >= self.horizon, 1.0, lam)

    __call__ = hazard

    def to_dict(self) -> dict:
        return {
            "type": "additive",
            "link": self.link,
            "horizon": self.horizon,
            "smooth_terms": [t.to_dict() for t in self.terms],
            "intercept": self.intercept,
            "coefficients": {k: float(v) for k, v in self.linear_coefficients.items()},
            "covariates": self.linear_names,
            "param_names": self.param_names,
            "covariance": self.covariance.ravel().tolist(),
            "loglik": self.loglik,
            "penalized_loglik": self.penalized_loglik,
            "gcv": self.gcv,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "schema": [c.to_dict() for c in self.schema],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdditiveHazardModel":
        terms = []
        for td in d["smooth_terms"]:
            spec = SplineBasisSpec(td["variable"], td["n_basis"], td["degree"],
                                   td["penalty_order"], tuple(td["knots"]), td["centered"])
            terms.append(SmoothTerm(spec, np.asarray(td["coefficients"], dtype=float),
                                    float(td["delta"]), float(td["edf"])))
        params = np.concatenate([t.coefficients for t in terms]
                                + ([[d["intercept"]]] if d["intercept"] is not None else [])
                                + [np.asarray(list(d["coefficients"].values()), dtype=float)])
        p = len(params)
        return cls(terms, list(d["covariates"]), list(d["coefficients"]), d["intercept"], params,
                   list(d["param_names"]), np.asarray(d["covariance"], dtype=float).reshape(p, p),
                   tuple(Covariate.from_dict(c) for c in d["schema"]), int(d["horizon"]),
                   d["link"], float(d["loglik"]), float(d["penalized_loglik"]), float(d["gcv"]),
                   bool(d["converged"]), int(d["n_iter"]))


# -- fitting -----------------------------------------------------------------

CRITERIA = ("gcv", "ubre")


def smoothing_score(deviance: float, trace: float, n: int, criterion: str = "gcv") -> float:
    """Smoothness selection score.

    ``gcv``: ``n * D / (n - tr(A))**2``.  ``ubre``: ``D / n + 2 tr(A) / n - 1``,
    the unbiased risk estimate for a binary response with unit scale.
    """
    if criterion == "gcv":
        return n * deviance / (n - trace) ** 2
    if criterion == "ubre":
        return deviance / n + 2.0 * trace / n - 1.0
    raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")


def _sum_to_zero_basis(B: np.ndarray) -> np.ndarray:
    """Columns spanning coefficient vectors whose fitted values sum to zero."""
    c = B.sum(axis=0)[:, None]
    Q, _ = linalg.qr(c, mode="full")
    return Q[:, 1:]


@dataclass
class _Problem:
    """Reparameterised penalised regression shared by the fit and the GCV search."""

    X: np.ndarray
    y: np.ndarray
    penalties: list[np.ndarray]
    roots: list[np.ndarray]
    transform: np.ndarray
    specs: list[SplineBasisSpec]
    blocks: list[slice]
    linear_names: list[str]
    linear_columns: list[str]
    has_intercept: bool
    link: str
    beta: np.ndarray | None = field(default=None, repr=False)

    def penalty(self, deltas) -> np.ndarray:
        S = np.zeros((self.X.shape[1],) * 2)
        for d, Sj in zip(deltas, self.penalties):
            S += d * Sj
        return S

    def root(self, deltas) -> np.ndarray:
        """``R`` with ``R'R = penalty(deltas)``, built from the difference matrices."""
        return np.vstack([np.sqrt(d) * Rj for d, Rj in zip(deltas, self.roots)]
                         or [np.zeros((0, self.X.shape[1]))])

    def fit(self, deltas, max_iter=50, tol=1e-8):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = fit_irls(self.X, self.y, penalty=self.penalty(deltas), max_iter=max_iter,
                           tol=tol, link=self.link, beta0=self.beta,
                           penalty_root=self.root(deltas))
        if np.all(np.isfinite(res.coef)):
            self.beta = res.coef
        return res

    def trace(self, res, deltas) -> np.ndarray:
        """Per-column contributions to tr(A) = tr((X'WX + S)^-1 X'WX)."""
        S = self.penalty(deltas)
        return 1.0 - np.sum(res.covariance * S, axis=1)

    def gcv(self, deltas, criterion: str = "gcv") -> tuple[float, object]:
        res = self.fit(deltas)
        return smoothing_score(-2.0 * res.loglik, self.trace(res, deltas).sum(), len(self.y),
                               criterion), res


def _setup(aug: AugmentedDataset, smooths: Sequence[SplineBasisSpec], linear_terms: Sequence[str],
           link: str) -> _Problem:
    blocks, penalties_raw, roots_raw, transforms, specs = [], [], [], [], []
    cols, sl_start = [], 0
    names = set(aug.covariate_names)
    seen = set()
    for spec in smooths:
        if spec.variable != TIME and spec.variable not in names:
            raise DataError(f"unknown smooth variable {spec.variable!r}")
        if spec.variable in seen:
            raise DataError(f"duplicate smooth for {spec.variable!r}")
        seen.add(spec.variable)
        if spec.variable != TIME and aug.covariate(spec.variable).is_factor:
            raise DataError(f"cannot smooth factor {spec.variable!r}")
        x = np.asarray(aug.feature(spec.variable), dtype=float)
        if len(np.unique(x)) < spec.n_basis - spec.penalty_order:
            raise DataError(f"{spec.variable!r} has too few distinct values for {spec.n_basis} basis functions")
        if spec.knots is None:
            spec = spec.with_knots(x)
        B = bspline_basis(spec, x)
        K = difference_penalty(spec.n_basis, spec.penalty_order)
        Z = _sum_to_zero_basis(B) if spec.centered else np.eye(spec.n_basis)
        cols.append(B @ Z)
        penalties_raw.append(Z.T @ K @ Z)
        roots_raw.append(difference_matrix(spec.n_basis, spec.penalty_order) @ Z)
        transforms.append(Z)
        specs.append(spec)
        blocks.append(slice(sl_start, sl_start + Z.shape[1]))
        sl_start += Z.shape[1]
    has_time = any(s.variable == TIME for s in specs)
    n = aug.n_rows
    if not has_time:
        cols.append(np.ones((n, 1)))
        transforms.append(np.ones((1, 1)))
    Xl, lcols = encode_covariates(aug.covariates, aug.schema, linear_terms)
    for name in linear_terms:
        if name in seen:
            raise DataError(f"{name!r} is both smooth and linear")
    cols.append(Xl.reshape(n, -1))
    if Xl.shape[1]:
        transforms.append(np.eye(Xl.shape[1]))
    X = np.hstack(cols)
    p = X.shape[1]
    penalties, roots = [], []
    for Sj, Rj, bl in zip(penalties_raw, roots_raw, blocks):
        S = np.zeros((p, p))
        S[bl, bl] = Sj
        penalties.append(S)
        R = np.zeros((Rj.shape[0], p))
        R[:, bl] = Rj
        roots.append(R)
    return _Problem(X, np.asarray(aug.y, dtype=float), penalties, roots,
                    linalg.block_diag(*transforms),
                    specs, blocks, list(linear_terms), lcols, not has_time, link)


def _golden(f, a, b, tol=1e-3):
    g = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _select(problem: _Problem, criterion: str = "gcv", n_grid: int = 15, tol: float = 1e-6,
            max_cycles: int = 20):
    lo, hi = LOG10_DELTA_RANGE
    m = len(problem.penalties)
    if m == 0:
        return np.zeros(0), problem.gcv(np.zeros(0), criterion)[0]
    logd = np.zeros(m)
    grid = np.linspace(lo, hi, n_grid)

    def score(j, v):
        trial = logd.copy()
        trial[j] = v
        # trial fits at extreme deltas may stall; only the final fit is reported
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return problem.gcv(10.0 ** trial, criterion)[0]

    best = score(0, 0.0)
    step = grid[1] - grid[0]
    for cycle in range(max_cycles):
        prev = best
        for j in range(m):
            profile = np.array([score(j, v) for v in grid])
            if np.ptp(profile) <= 1e-12 * abs(profile.min()):
                warnings.warn(f"flat {criterion.upper()} profile for smooth {j}; using the smallest delta",
                              SmoothingWarning, stacklevel=3)
                logd[j] = lo
                continue
            i = int(np.argmin(profile))
            a, b = max(lo, grid[i] - step), min(hi, grid[i] + step)
            v, fv = _golden(lambda v: score(j, v), a, b)
            if profile[i] < fv:
                v, fv = grid[i], profile[i]
            logd[j] = v
            best = fv
        if abs(prev - best) < tol:
            break
    for j in range(m):
        if logd[j] <= lo + 1e-2 or logd[j] >= hi - 1e-2:
            warnings.warn(f"smoothing parameter {j} at the boundary of its search range "
                          f"(log10 delta = {logd[j]:.2f})", SmoothingWarning, stacklevel=3)
    return 10.0 ** logd, best


def select_smoothing(aug: AugmentedDataset, smooths: Sequence[SplineBasisSpec],
                     linear_terms: Sequence[str] = (), deltas=None, link: str = "logit",
                     criterion: str = "gcv") -> np.ndarray:
    """Score-optimal smoothing parameters, one per smooth term.

    The criterion (see :func:`smoothing_score`) is minimised over
    log10(delta) in [-6, 8], one term at a time, cycling until the score
    settles.  Each one-dimensional search scans a coarse grid and refines
    the best cell by golden-section search.  Supplied ``deltas`` are
    returned unchanged.
    """
    if deltas is not None:
        return np.asarray(deltas, dtype=float)
    problem = _setup(aug, smooths, linear_terms, link)
    return _select(problem, criterion)[0]


def fit_additive(aug: AugmentedDataset, smooths: Sequence[SplineBasisSpec],
                 linear_terms: Sequence[str] = (), deltas=None, link: str = "logit",
                 max_iter: int = 50, tol: float = 1e-8, criterion: str = "gcv") -> AdditiveHazardModel:
    """Fit an additive hazard model by penalised IRLS.

    A smooth in ``timeInt`` is the baseline and carries the intercept;
    without one an explicit intercept column is added.  Covariate smooths
    are constrained to sum to zero over the training rows.  Without
    ``deltas`` the smoothing parameters are chosen by ``criterion``.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    problem = _setup(aug, smooths, linear_terms, link)
    if deltas is None:
        deltas, _ = _select(problem, criterion)
    deltas = np.asarray(deltas, dtype=float)
    if len(deltas) != len(problem.specs):
        raise ValueError(f"expected {len(problem.specs)} smoothing parameters, got {len(deltas)}")
    if np.any(deltas < 0):
        raise ValueError("smoothing parameters must be >= 0")
    res = problem.fit(deltas, max_iter=max_iter, tol=tol)
    if not res.converged:
        warnings.warn("penalised IRLS did not converge", ConvergenceWarning, stacklevel=2)
    n = len(problem.y)
    tr = problem.trace(res, deltas)
    gcv = n * (-2.0 * res.loglik) / (n - tr.sum()) ** 2

    T = problem.transform
    params = T @ res.coef
    cov = T @ res.covariance @ T.T
    terms, names, start = [], [], 0
    for spec, bl, delta in zip(problem.specs, problem.blocks, deltas):
        coef = params[start:start + spec.n_basis]
        terms.append(SmoothTerm(spec, coef, float(delta), float(tr[bl].sum())))
        names += [f"{spec.label}.{i + 1}" for i in range(spec.n_basis)]
        start += spec.n_basis
    intercept = None
    if problem.has_intercept:
        intercept = float(params[start])
        names.append("(Intercept)")
    names += problem.linear_columns
    schema = tuple(c for c in aug.schema if c.name in problem.linear_names
                   or any(s.variable == c.name for s in problem.specs))
    return AdditiveHazardModel(terms, problem.linear_names, problem.linear_columns, intercept,
                               params, names, cov, schema, aug.horizon, link, res.loglik,
                               res.penalized_loglik, float(gcv), res.converged, res.n_iter)


def evaluate_smooth(model: AdditiveHazardModel, term: str, grid, clamp: bool = False,
                    level: float = 0.95) -> pd.DataFrame:
    """Fitted smooth on ``grid`` with pointwise Wald bands.

    Returns a frame with columns ``grid, fit, se, lower, upper``.
    """
    idx, t = model.term(term)
    blocks = list(model._blocks())
    sl = blocks[idx][1]
    B = bspline_basis(t.spec, grid, clamp=clamp)
    fit = B @ t.coefficients
    V = model.covariance[sl, sl]
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", B, V, B), 0, None))
    z = stats.norm.ppf(0.5 + level / 2.0)
    return pd.DataFrame({"grid": np.asarray(grid, dtype=float), "fit": fit, "se": se,
                         "lower": fit - z * se, "upper": fit + z * se})
