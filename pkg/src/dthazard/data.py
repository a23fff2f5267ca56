"""Person-period data handling for discrete time-to-event records.

A :class:`Dataset` holds one row per subject (observed period, event
indicator, covariates).  :func:`augment` expands it into the long
person-period layout in which every at-risk period becomes a binary
response row, so hazard models can be fitted as binary regressions.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

#: Column name used for the time interval in person-period data.
TIME = "timeInt"

#: Lower clip applied to the probability of the observed outcome.
HAZARD_CLIP = 1e-10

NUMERIC = "numeric"
BINARY_FACTOR = "binary-factor"
MULTI_FACTOR = "multi-factor"

HazardFn = Callable[[np.ndarray, Mapping[str, np.ndarray]], np.ndarray]


class DataError(ValueError):
    """Raised for malformed or inconsistent survival input."""


@dataclass(frozen=True)
class Covariate:
    """Schema entry for one covariate.

    For factors ``levels`` is the ordered level set and ``levels[0]`` is the
    reference level used by dummy coding.
    """

    name: str
    kind: str = NUMERIC
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERIC, BINARY_FACTOR, MULTI_FACTOR):
            raise DataError(f"unknown covariate kind {self.kind!r}")
        if self.kind == BINARY_FACTOR and len(self.levels) != 2:
            raise DataError(f"binary factor {self.name!r} needs exactly 2 levels")
        if self.kind == MULTI_FACTOR and len(self.levels) < 2:
            raise DataError(f"factor {self.name!r} needs at least 2 levels")
        if self.name == TIME:
            raise DataError(f"{TIME!r} is reserved for the time interval")

    @property
    def is_factor(self) -> bool:
        return self.kind != NUMERIC

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "levels": list(self.levels)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Covariate":
        return cls(d["name"], d["kind"], tuple(d.get("levels", ())))


def factor(name: str, levels: Sequence[str]) -> Covariate:
    levels = tuple(str(v) for v in levels)
    kind = BINARY_FACTOR if len(levels) == 2 else MULTI_FACTOR
    return Covariate(name, kind, levels)


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: object
    observed_time: int
    status: int
    covariates: dict


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _check_covariates(covariates: Mapping[str, np.ndarray], schema: Sequence[Covariate], n: int) -> dict:
    out = {}
    for cov in schema:
        if cov.name not in covariates:
            raise DataError(f"covariate {cov.name!r} missing")
        v = np.asarray(covariates[cov.name])
        if v.shape != (n,):
            raise DataError(f"covariate {cov.name!r} has shape {v.shape}, expected ({n},)")
        if cov.is_factor:
            v = v.astype(str)
            bad = set(np.unique(v)) - set(cov.levels)
            if bad:
                raise DataError(f"covariate {cov.name!r} has undeclared levels {sorted(bad)}")
        else:
            v = v.astype(float)
            if not np.all(np.isfinite(v)):
                raise DataError(f"covariate {cov.name!r} has non-finite values")
        out[cov.name] = _frozen(v)
    return out


@dataclass(frozen=True)
class Dataset:
    """Subject-level censored discrete survival data (columnar, immutable)."""

    time: np.ndarray
    status: np.ndarray
    covariates: Mapping[str, np.ndarray]
    schema: tuple[Covariate, ...]
    horizon: int
    subject_id: np.ndarray
    n_dropped: int = 0

    def __post_init__(self):
        time = np.asarray(self.time)
        if time.ndim != 1 or len(time) == 0:
            raise DataError("empty dataset")
        if not np.all(np.equal(np.mod(time, 1), 0)):
            raise DataError("observed times must be integers")
        time = time.astype(np.int64)
        status = np.asarray(self.status).astype(np.int64)
        n = len(time)
        if status.shape != (n,):
            raise DataError("status length differs from time length")
        if not np.isin(status, (0, 1)).all():
            raise DataError("status must be coded 0/1")
        if time.min() < 1:
            raise DataError("observed times must be >= 1")
        if self.horizon < 2:
            raise DataError("horizon must be >= 2")
        if time.max() > self.horizon:
            raise DataError(f"observed time {time.max()} exceeds horizon {self.horizon}")
        schema = tuple(self.schema)
        sid = np.arange(1, n + 1) if self.subject_id is None else np.asarray(self.subject_id)
        if sid.shape != (n,):
            raise DataError("subject_id length differs from time length")
        object.__setattr__(self, "time", _frozen(time))
        object.__setattr__(self, "status", _frozen(status))
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "subject_id", _frozen(sid))
        object.__setattr__(self, "covariates", _check_covariates(self.covariates, schema, n))

    @classmethod
    def from_arrays(cls, time, status, covariates=None, schema=None, horizon=None,
                    subject_id=None) -> "Dataset":
        """Build a dataset, inferring a numeric schema and the horizon if absent."""
        covariates = dict(covariates or {})
        if schema is None:
            schema = [Covariate(name) for name in covariates]
        time = np.asarray(time)
        if horizon is None:
            horizon = int(np.max(time)) if len(time) else 0
        return cls(time, status, covariates, tuple(schema), int(horizon), subject_id)

    def __len__(self) -> int:
        return len(self.time)

    @property
    def n(self) -> int:
        return len(self.time)

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.schema]

    def covariate(self, name: str) -> Covariate:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    def records(self) -> Iterator[SurvivalRecord]:
        for i in range(self.n):
            yield SurvivalRecord(
                self.subject_id[i], int(self.time[i]), int(self.status[i]),
                {name: v[i] for name, v in self.covariates.items()},
            )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return replace(
            self,
            time=self.time[index],
            status=self.status[index],
            covariates={k: v[index] for k, v in self.covariates.items()},
            subject_id=self.subject_id[index],
        )

    def select(self, names: Sequence[str]) -> "Dataset":
        """Restrict the dataset to the named covariates."""
        schema = tuple(self.covariate(n) for n in names)
        return replace(self, schema=schema, covariates={n: self.covariates[n] for n in names})

    def to_frame(self, time_column: str = "time", status_column: str = "status") -> pd.DataFrame:
        cols = {"obj": self.subject_id, time_column: self.time}
        cols.update(self.covariates)
        cols[status_column] = self.status
        return pd.DataFrame(cols)


def _parse_status(raw: pd.Series, event_label: str | None) -> np.ndarray:
    values = raw.astype(str).str.strip()
    levels = sorted(set(values))
    if len(levels) > 2:
        raise DataError(f"status column has more than 2 levels: {levels}")
    if event_label is not None:
        if event_label not in levels:
            raise DataError(f"event label {event_label!r} not among status levels {levels}")
        return (values == event_label).to_numpy().astype(np.int64)
    num = pd.to_numeric(raw, errors="coerce")
    if num.isna().any() or not num.isin([0, 1]).all():
        raise DataError(f"status levels {levels} are not 0/1; pass an event label")
    return num.to_numpy().astype(np.int64)


def infer_schema(frame: pd.DataFrame, columns: Sequence[str], factors: Sequence[str] = ()) -> list[Covariate]:
    schema = []
    for name in columns:
        col = frame[name]
        if name in factors or not pd.api.types.is_numeric_dtype(col):
            levels = sorted(set(col.astype(str)))
            if len(levels) < 2:
                raise DataError(f"factor {name!r} has fewer than 2 levels")
            schema.append(factor(name, levels))
        else:
            schema.append(Covariate(name))
    return schema


def ingest_csv(path, time_column: str, status_column: str, schema: Sequence[Covariate] | None = None,
               *, covariates: Sequence[str] | None = None, factors: Sequence[str] = (),
               event_label: str | None = None, id_column: str | None = None,
               horizon: int | None = None) -> Dataset:
    """Read a subject-level CSV into a :class:`Dataset`.

    Rows with a missing value in any used column are dropped; the count is
    stored as ``Dataset.n_dropped``.  Without an explicit ``schema`` every
    column other than time/status/id (or the ``covariates`` subset) is used;
    non-numeric columns and those named in ``factors`` become factors with
    sorted levels, the first being the reference.
    """
    try:
        frame = pd.read_csv(path, sep=",", decimal=".", skipinitialspace=True)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise DataError("empty dataset") from exc
    frame.columns = [str(c).strip() for c in frame.columns]

    if schema is not None:
        names = [c.name for c in schema]
    elif covariates is not None:
        names = list(covariates)
    else:
        names = [c for c in frame.columns if c not in (time_column, status_column, id_column)]
    used = [time_column, status_column] + names + ([id_column] if id_column else [])
    unknown = [c for c in used if c not in frame.columns]
    if unknown:
        raise DataError(f"unknown column(s): {unknown}")

    n_raw = len(frame)
    frame = frame[used].dropna()
    n_dropped = n_raw - len(frame)
    if len(frame) == 0:
        raise DataError("empty dataset")
    if n_dropped:
        logger.info("dropped %d row(s) with missing values", n_dropped)

    time = pd.to_numeric(frame[time_column], errors="coerce").to_numpy()
    if np.isnan(time).any() or np.any(time != np.round(time)):
        raise DataError(f"time column {time_column!r} has non-integer values")
    if time.min() < 1:
        raise DataError(f"time column {time_column!r} has values < 1")
    status = _parse_status(frame[status_column], event_label)

    if schema is None:
        schema = infer_schema(frame, names, factors)
    covs = {}
    for cov in schema:
        col = frame[cov.name]
        if cov.is_factor:
            covs[cov.name] = col.astype(str).str.strip().to_numpy()
        else:
            v = pd.to_numeric(col, errors="coerce")
            if v.isna().any():
                raise DataError(f"covariate {cov.name!r} is not numeric")
            covs[cov.name] = v.to_numpy(dtype=float)
    sid = frame[id_column].to_numpy() if id_column else np.arange(1, len(frame) + 1)
    k = int(time.max()) if horizon is None else int(horizon)
    return Dataset(time.astype(np.int64), status, covs, tuple(schema), k, sid, n_dropped)


def censoring_rate(ds: Dataset) -> float:
    return float(np.mean(ds.status == 0))


def recode_last_period(ds: Dataset) -> Dataset:
    """Map every event observed at the horizon ``k`` to censoring at ``k - 1``.

    The hazard at ``k`` is one by definition, so this leaves the likelihood
    unchanged while removing the degenerate last period.
    """
    k = ds.horizon
    at_k = (ds.time == k) & (ds.status == 1)
    if not at_k.any():
        return ds
    time = np.where(at_k, k - 1, ds.time)
    status = np.where(at_k, 0, ds.status)
    return replace(ds, time=time, status=status)


@dataclass(frozen=True)
class AugmentedDataset:
    """Person-period rows: one binary response per subject and at-risk period."""

    subject_id: np.ndarray
    time: np.ndarray
    y: np.ndarray
    covariates: Mapping[str, np.ndarray]
    schema: tuple[Covariate, ...]
    horizon: int
    row_subject: np.ndarray = field(repr=False)
    source: Dataset | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.schema]

    def covariate(self, name: str) -> Covariate:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    def feature(self, name: str) -> np.ndarray:
        """Column by name; ``timeInt`` returns the time interval."""
        return self.time if name == TIME else self.covariates[name]

    def subset(self, mask) -> "AugmentedDataset":
        mask = np.asarray(mask)
        return replace(
            self,
            subject_id=self.subject_id[mask],
            time=self.time[mask],
            y=self.y[mask],
            covariates={k: v[mask] for k, v in self.covariates.items()},
            row_subject=self.row_subject[mask],
            source=None,
        )

    def to_frame(self) -> pd.DataFrame:
        cols = {"obj": self.subject_id, TIME: self.time, "y": self.y}
        cols.update(self.covariates)
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")


def augment(ds: Dataset) -> AugmentedDataset:
    """Expand subjects into person-period rows.

    Subject ``i`` contributes rows ``t = 1..T_i``; the response is 1 only in
    the last row of a subject with an observed event.  Call
    :func:`recode_last_period` first.
    """
    reps = ds.time
    row_subject = np.repeat(np.arange(ds.n), reps)
    starts = np.cumsum(reps) - reps
    time = np.arange(len(row_subject)) - np.repeat(starts, reps) + 1
    y = ((time == ds.time[row_subject]) & (ds.status[row_subject] == 1)).astype(np.int64)
    covs = {k: _frozen(v[row_subject]) for k, v in ds.covariates.items()}
    return AugmentedDataset(
        _frozen(ds.subject_id[row_subject]), _frozen(time), _frozen(y), covs,
        ds.schema, ds.horizon, _frozen(row_subject), ds,
    )


def hazard_to_survival(hazard) -> np.ndarray:
    """Survival ``S(t) = prod_{s<=t} (1 - hazard(s))`` for ``t = 1..len(hazard)``.

    Works along the last axis, so a matrix of per-subject hazard curves is
    accepted.
    """
    h = np.asarray(hazard, dtype=float)
    if np.any((h < 0) | (h > 1)):
        raise ValueError("hazards must lie in [0, 1]")
    return np.cumprod(1.0 - h, axis=-1)


def log_likelihood(aug: AugmentedDataset, hazard_fn: HazardFn, clip: float = HAZARD_CLIP) -> float:
    """Binary log-likelihood of the person-period rows under ``hazard_fn``.

    ``hazard_fn(time, covariates)`` is evaluated once on the full columns.
    The probability of each observed outcome is clipped from below at
    ``clip``; an outcome with probability exactly zero (hazard 0 with an
    event, or hazard 1 without) makes the result ``-inf`` and emits a
    warning.
    """
    lam = np.asarray(hazard_fn(aug.time, aug.covariates), dtype=float)
    return binary_loglik(aug.y, lam, clip)


def binary_loglik(y, lam, clip: float = HAZARD_CLIP) -> float:
    y = np.asarray(y)
    lam = np.asarray(lam, dtype=float)
    if np.any((lam < 0) | (lam > 1)) or np.isnan(lam).any():
        raise ValueError("hazards must lie in [0, 1]")
    p_obs = np.where(y == 1, lam, 1.0 - lam)
    if np.any(p_obs == 0.0):
        warnings.warn("an observed outcome has probability zero; log-likelihood is -inf",
                      RuntimeWarning, stacklevel=3)
        return -np.inf
    return float(np.sum(np.log(np.maximum(p_obs, clip))))
