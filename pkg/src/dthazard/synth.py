"""Seeded simulation of censored discrete survival data.

Event times follow ``hazard(t | x) = logistic(alpha_t + eta(x))`` for
``t = 1..k-1``; subjects without an event by then get ``T = k``.  Censoring
is drawn independently of ``T`` and ties ``T == C`` count as events.  All
randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), whose
stream is stable across platforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .data import Covariate, Dataset, factor

CENSORING = ("none", "uniform", "geometric")


@dataclass(frozen=True)
class CovariateLaw:
    """Sampling law of one covariate.

    ``kind`` is ``normal`` (params mean, sd), ``uniform`` (low, high),
    ``binary`` (p) or ``categorical`` (level probabilities, in ``levels``
    order).  Binary and categorical draws become factors; their effect is
    keyed ``name[level]`` for non-reference levels.
    """

    kind: str
    params: tuple[float, ...] = ()
    levels: tuple[str, ...] = ()

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "normal":
            mean, sd = self.params or (0.0, 1.0)
            return rng.normal(mean, sd, n)
        if self.kind == "uniform":
            lo, hi = self.params or (0.0, 1.0)
            return rng.uniform(lo, hi, n)
        if self.kind == "binary":
            (p,) = self.params or (0.5,)
            levels = self.levels or ("0", "1")
            return np.where(rng.random(n) < p, levels[1], levels[0])
        if self.kind == "categorical":
            probs = np.asarray(self.params, dtype=float)
            return np.asarray(self.levels)[rng.choice(len(probs), size=n, p=probs / probs.sum())]
        raise ValueError(f"unknown covariate law {self.kind!r}")

    def covariate(self, name: str) -> Covariate:
        if self.kind == "binary":
            return factor(name, self.levels or ("0", "1"))
        if self.kind == "categorical":
            return factor(name, self.levels)
        return Covariate(name)


Effect = float | Callable[[np.ndarray], np.ndarray]


@dataclass
class GeneratorSpec:
    """Data-generating law.

    ``baseline`` holds ``alpha_1..alpha_{k-1}`` on the log-odds scale.
    ``effects`` maps a covariate name (or ``name[level]`` for factor
    levels) to a coefficient or to a function of the covariate values.
    """

    n_subjects: int
    horizon: int
    baseline: np.ndarray
    effects: Mapping[str, Effect] = field(default_factory=dict)
    covariate_law: Mapping[str, CovariateLaw] = field(default_factory=dict)
    censoring: str = "none"
    censoring_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=float)
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.baseline.shape != (self.horizon - 1,):
            raise ValueError(f"baseline needs {self.horizon - 1} values, got {self.baseline.shape}")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.censoring not in CENSORING:
            raise ValueError(f"censoring must be one of {CENSORING}")
        if self.censoring == "geometric" and not 0.0 < self.censoring_p < 1.0:
            raise ValueError("geometric censoring needs p in (0, 1)")
        names = set(self.covariate_law)
        for key in self.effects:
            base = key.split("[", 1)[0]
            if base not in names:
                raise ValueError(f"effect {key!r} has no covariate law")


def linear_effect(spec: GeneratorSpec, covariates: Mapping[str, np.ndarray]) -> np.ndarray:
    """``eta(x)`` for every subject."""
    n = len(next(iter(covariates.values()))) if covariates else spec.n_subjects
    eta = np.zeros(n)
    for key, eff in spec.effects.items():
        if "[" in key:
            name, level = key[:-1].split("[", 1)
            x = (np.asarray(covariates[name]) == level).astype(float)
        else:
            law = spec.covariate_law[key]
            x = covariates[key]
            if law.kind == "binary":
                x = (x == (law.levels or ("0", "1"))[1]).astype(float)
        eta += eff(np.asarray(x)) if callable(eff) else float(eff) * np.asarray(x, dtype=float)
    return eta


def simulate(spec: GeneratorSpec) -> Dataset:
    """Draw a censored dataset from ``spec``; identical output per seed."""
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_subjects, spec.horizon
    covariates = {name: law.draw(rng, n) for name, law in spec.covariate_law.items()}
    eta = linear_effect(spec, covariates)
    hazard = expit(spec.baseline[None, :] + eta[:, None])
    event = rng.random((n, k - 1)) < hazard
    T = np.where(event.any(axis=1), event.argmax(axis=1) + 1, k)
    if spec.censoring == "none":
        C = np.full(n, k)
    elif spec.censoring == "uniform":
        C = rng.integers(1, k + 1, n)
    else:
        C = np.minimum(rng.geometric(spec.censoring_p, n), k)
    time = np.minimum(T, C)
    status = (T <= C).astype(np.int64)
    schema = [law.covariate(name) for name, law in spec.covariate_law.items()]
    return Dataset.from_arrays(time, status, covariates, schema, horizon=k)


def true_hazard(spec: GeneratorSpec):
    """Generating hazard as a ``hazard_fn(t, covariates)`` callable."""
    def fn(t, covariates):
        t = np.asarray(t, dtype=np.int64)
        eta = linear_effect(spec, covariates) if spec.effects else np.zeros(len(t))
        alpha = np.append(spec.baseline, np.inf)
        return expit(alpha[np.clip(t, 1, spec.horizon) - 1] + eta)
    return fn
