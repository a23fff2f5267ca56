"""Discrete survival trees grown on person-period data.

The hazard ``f(t, x)`` is a classification tree for the binary response of
the augmented rows.  Splits maximise the Gini impurity decrease, tree size
is controlled only by the minimal node size, and terminal hazards use the
Laplace correction ``(events + 1) / (rows + 2)``.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .data import TIME, AugmentedDataset, Covariate, DataError, Dataset, augment, binary_loglik

NUMERIC = "numeric"
ORDINAL = "ordinal"
FACTOR = "factor"
CRITERIA = ("AIC", "BIC", "ll")
MAX_DEFAULT_GRID = 200

# gains below this count as no improvement (float noise on tied proportions)
GAIN_TOL = 1e-12


class TreeWarning(UserWarning):
    pass


def gini(n_events, n_rows):
    """Gini impurity ``2 pi (1 - pi)`` of a node with ``pi = n_events / n_rows``."""
    pi = np.asarray(n_events, dtype=float) / np.asarray(n_rows, dtype=float)
    return 2.0 * pi * (1.0 - pi)


def laplace(n_events, n_rows):
    """Laplace-corrected event proportion ``(n_events + 1) / (n_rows + 2)``."""
    return (np.asarray(n_events, dtype=float) + 1.0) / (np.asarray(n_rows, dtype=float) + 2.0)


@dataclass(frozen=True)
class SplitRule:
    """Binary split; rows satisfying the rule go left.

    Threshold rules send ``x < threshold`` left.  Factor rules send the
    levels in ``levels`` left.
    """

    variable: str
    kind: str
    threshold: float | None = None
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind in (NUMERIC, ORDINAL):
            if self.threshold is None or not np.isfinite(self.threshold):
                raise ValueError("threshold rule needs a finite threshold")
        elif self.kind == FACTOR:
            if not self.levels:
                raise ValueError("factor rule needs a non-empty level subset")
        else:
            raise ValueError(f"unknown split kind {self.kind!r}")

    def goes_left(self, values) -> np.ndarray:
        if self.kind == FACTOR:
            return np.isin(np.asarray(values).astype(str), self.levels)
        return np.asarray(values, dtype=float) < self.threshold

    def describe(self, negate: bool = False) -> str:
        if self.kind == FACTOR:
            op = "not in" if negate else "in"
            return f"{self.variable} {op} {{{','.join(self.levels)}}}"
        op = ">=" if negate else "<"
        return f"{self.variable} {op} {self.threshold:.6g}"

    def to_dict(self) -> dict:
        d = {"variable": self.variable, "kind": self.kind}
        if self.kind == FACTOR:
            d["levels"] = list(self.levels)
        else:
            d["threshold"] = self.threshold
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitRule":
        levels = tuple(d["levels"]) if "levels" in d else None
        return cls(d["variable"], d["kind"], d.get("threshold"), levels)


@dataclass
class Node:
    n_rows: int
    n_events: int
    rule: SplitRule | None = None
    left: "Node | None" = None
    right: "Node | None" = None
    gain: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.rule is None

    @property
    def hazard(self) -> float:
        return float(laplace(self.n_events, self.n_rows))

    def walk(self) -> Iterator["Node"]:
        yield self
        if not self.is_leaf:
            yield from self.left.walk()
            yield from self.right.walk()

    def to_dict(self) -> dict:
        d = {"n_rows": self.n_rows, "n_events": self.n_events, "hazard": self.hazard}
        if not self.is_leaf:
            d.update(split=self.rule.to_dict(), gain=self.gain,
                     left=self.left.to_dict(), right=self.right.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Node":
        node = cls(int(d["n_rows"]), int(d["n_events"]))
        if "split" in d:
            node.rule = SplitRule.from_dict(d["split"])
            node.gain = float(d.get("gain", 0.0))
            node.left = cls.from_dict(d["left"])
            node.right = cls.from_dict(d["right"])
        return node


@dataclass
class SurvivalTree:
    """Fitted tree: internal nodes carry split rules, leaves Laplace hazards."""

    root: Node
    min_node_size: int
    candidates: tuple[str, ...]
    schema: tuple[Covariate, ...]
    horizon: int
    split_ratio: float = 2.0

    @property
    def leaves(self) -> list[Node]:
        return [nd for nd in self.root.walk() if nd.is_leaf]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def n_splits(self) -> int:
        return self.n_leaves - 1

    def split_variables(self) -> list[str]:
        """Variables used in splits, in depth-first order (with repeats)."""
        return [nd.rule.variable for nd in self.root.walk() if not nd.is_leaf]

    def _factor_levels(self) -> dict[str, tuple[str, ...]]:
        return {c.name: c.levels for c in self.schema if c.is_factor}

    def _route(self, columns: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        levels = self._factor_levels()
        for name, lv in levels.items():
            if name in columns:
                bad = set(np.unique(np.asarray(columns[name]).astype(str))) - set(lv)
                if bad:
                    raise DataError(f"unseen levels {sorted(bad)} for factor {name!r}")
        out = np.empty(n)
        stack = [(self.root, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.hazard
                continue
            if len(idx) == 0:
                continue
            left = node.rule.goes_left(np.asarray(columns[node.rule.variable])[idx])
            stack.append((node.left, idx[left]))
            stack.append((node.right, idx[~left]))
        return out

    def predict(self, aug: AugmentedDataset) -> np.ndarray:
        """Hazard of every augmented row."""
        cols = dict(aug.covariates)
        cols[TIME] = aug.time
        return self._route(cols, aug.n_rows)

    def hazard(self, t, x: Mapping[str, object] | None = None):
        """Hazard at time(s) ``t`` for covariate values ``x``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < 1):
            raise ValueError("time must be >= 1")
        x = dict(x or {})
        cols = {TIME: t}
        for name in self.candidates:
            if name == TIME:
                continue
            if name not in x:
                raise DataError(f"missing covariate {name!r}")
            cols[name] = np.broadcast_to(np.asarray(x[name]), t.shape)
        h = self._route(cols, len(t))
        return float(h[0]) if h.size == 1 else h

    __call__ = hazard

    def hazard_fn(self):
        """Adapter to the ``hazard_fn(t, covariates)`` convention."""
        def fn(t, covariates):
            cols = dict(covariates)
            cols[TIME] = np.asarray(t)
            return self._route(cols, len(cols[TIME]))
        return fn

    def to_dict(self) -> dict:
        return {
            "type": "tree",
            "min_node_size": self.min_node_size,
            "n_splits": self.n_splits,
            "candidates": list(self.candidates),
            "schema": [c.to_dict() for c in self.schema],
            "horizon": self.horizon,
            "split_ratio": self.split_ratio,
            "root": self.root.to_dict(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SurvivalTree":
        return cls(Node.from_dict(d["root"]), int(d["min_node_size"]), tuple(d["candidates"]),
                   tuple(Covariate.from_dict(c) for c in d["schema"]), int(d["horizon"]),
                   float(d.get("split_ratio", 2.0)))

    def to_text(self) -> str:
        """Indented rendering: one line per node, ``*`` marks leaves."""
        lines = ["node) split, n, events, hazard  (* = terminal)"]

        def rec(node, label, idx, depth):
            star = " *" if node.is_leaf else ""
            lines.append(f"{'  ' * depth}{idx}) {label} {node.n_rows} {node.n_events} "
                         f"{node.hazard:.4f}{star}")
            if not node.is_leaf:
                rec(node.left, node.rule.describe(), 2 * idx, depth + 1)
                rec(node.right, node.rule.describe(negate=True), 2 * idx + 1, depth + 1)

        rec(self.root, "root", 1, 0)
        return "\n".join(lines)


# -- growing -----------------------------------------------------------------

@dataclass
class _Columns:
    """Per-variable numeric codes and the order of the full data."""

    names: list[str]
    kinds: list[str]
    values: list[np.ndarray]
    levels: list[tuple[str, ...] | None]
    y: np.ndarray
    order: list[np.ndarray] = field(default_factory=list)


def _columns(aug: AugmentedDataset, candidates: Sequence[str]) -> _Columns:
    names, kinds, values, levels = [], [], [], []
    for name in candidates:
        if name == TIME:
            names.append(name)
            kinds.append(ORDINAL)
            values.append(np.asarray(aug.time, dtype=float))
            levels.append(None)
            continue
        if name not in aug.covariates:
            raise DataError(f"unknown candidate variable {name!r}")
        cov = aug.covariate(name)
        names.append(name)
        if cov.is_factor:
            kinds.append(FACTOR)
            lv = cov.levels
            codes = np.searchsorted(np.asarray(lv), aug.covariates[name]) if list(lv) == sorted(lv) \
                else np.array([lv.index(v) for v in aug.covariates[name]])
            values.append(codes.astype(np.int64))
            levels.append(lv)
        else:
            kinds.append(NUMERIC)
            values.append(np.asarray(aug.covariates[name], dtype=float))
            levels.append(None)
    y = np.asarray(aug.y, dtype=np.int64)
    cols = _Columns(names, kinds, values, levels, y)
    cols.order = [np.argsort(v, kind="stable") if k != FACTOR else np.arange(len(y))
                  for v, k in zip(values, kinds)]
    return cols


def _threshold_split(v: np.ndarray, y: np.ndarray, m: int, g_parent: float):
    """Best ``x < c`` split of sorted ``v``; returns (gain, position) or None."""
    n = len(v)
    cy = np.cumsum(y)[:-1]
    n_left = np.arange(1, n)
    ok = (v[1:] > v[:-1]) & (n_left >= m) & (n - n_left >= m)
    if not ok.any():
        return None
    nl = n_left[ok].astype(float)
    el = cy[ok].astype(float)
    e = float(y.sum())
    gl = 2.0 * (el / nl) * (1.0 - el / nl)
    pr = (e - el) / (n - nl)
    gr = 2.0 * pr * (1.0 - pr)
    gain = g_parent - (nl / n) * gl - ((n - nl) / n) * gr
    best = gain.max()
    j = int(np.flatnonzero(gain >= best - GAIN_TOL)[0])
    pos = int(np.flatnonzero(ok)[j])
    return float(gain[j]), pos


def best_split(aug: AugmentedDataset, candidates: Sequence[str], min_node_size: int,
               rows=None) -> tuple[SplitRule, float] | None:
    """Admissible split with the largest Gini decrease, or ``None``.

    Ties go to the earlier candidate, then to the smaller threshold.
    """
    cols = _columns(aug, candidates)
    idx = np.arange(aug.n_rows) if rows is None else np.asarray(rows)
    sorted_idx = [o[np.isin(o, idx)] for o in cols.order]
    found = _best(cols, sorted_idx, min_node_size)
    return None if found is None else found[:2]


def _best(cols: _Columns, sorted_idx: list[np.ndarray], m: int, min_split: int | None = None):
    rows = sorted_idx[0]
    n = len(rows)
    if n < max(2 * m, 2, min_split or 0):
        return None
    e = int(cols.y[rows].sum())
    g_parent = float(gini(e, n))
    if g_parent == 0.0:
        return None
    best = None
    for j, (name, kind) in enumerate(zip(cols.names, cols.kinds)):
        si = sorted_idx[j]
        if kind == FACTOR:
            codes = cols.values[j][si]
            present = np.unique(codes)
            if len(present) < 2:
                continue
            cnt = np.array([(codes == c).sum() for c in present])
            ev = np.array([cols.y[si][codes == c].sum() for c in present])
            rank = np.lexsort((present, ev / cnt))
            ordered = present[rank]
            pos_of = np.empty(int(present.max()) + 1, dtype=float)
            pos_of[ordered] = np.arange(len(ordered))
            key = pos_of[codes]
            o = np.argsort(key, kind="stable")
            res = _threshold_split(key[o], cols.y[si][o], m, g_parent)
            if res is None:
                continue
            gain, pos = res
            k = int(key[o][pos])
            rule = SplitRule(name, FACTOR, levels=tuple(cols.levels[j][c] for c in ordered[:k + 1]))
        else:
            v = cols.values[j][si]
            res = _threshold_split(v, cols.y[si], m, g_parent)
            if res is None:
                continue
            gain, pos = res
            rule = SplitRule(name, kind, threshold=float((v[pos] + v[pos + 1]) / 2.0))
        if best is None or gain > best[1] + GAIN_TOL:
            best = (rule, gain, j)
    if best is None or best[1] <= GAIN_TOL:
        return None
    return best


def _left_mask(cols: _Columns, j: int, rule: SplitRule, n_total: int, rows: np.ndarray) -> np.ndarray:
    vals = cols.values[j][rows]
    if rule.kind == FACTOR:
        codes = [cols.levels[j].index(v) for v in rule.levels]
        left = np.isin(vals, codes)
    else:
        left = vals < rule.threshold
    mask = np.zeros(n_total, dtype=bool)
    mask[rows[left]] = True
    return mask


def grow(aug: AugmentedDataset, candidates: Sequence[str] | None = None,
         min_node_size: int = 1, split_ratio: float = 2.0) -> SurvivalTree:
    """Grow a tree depth first until no node admits a split.

    A split is admissible when both children keep at least
    ``min_node_size`` rows and it lowers the Gini impurity.  Nodes with
    fewer than ``ceil(split_ratio * min_node_size)`` rows are not split;
    the default 2 adds no restriction, 3 mimics common CART software.
    """
    if candidates is None:
        candidates = [TIME] + aug.covariate_names
    candidates = tuple(candidates)
    n = aug.n_rows
    if n < 1:
        raise DataError("no rows to grow a tree on")
    if min_node_size < 1:
        raise ValueError("min_node_size must be >= 1")
    if split_ratio < 2.0:
        raise ValueError("split_ratio must be >= 2")
    cols = _columns(aug, candidates)
    min_split = int(np.ceil(split_ratio * min_node_size))

    def build(sorted_idx):
        rows = sorted_idx[0]
        node = Node(len(rows), int(cols.y[rows].sum()))
        found = _best(cols, sorted_idx, min_node_size, min_split)
        if found is None:
            return node
        rule, gain, j = found
        mask = _left_mask(cols, j, rule, n, rows)
        node.rule, node.gain = rule, gain
        node.left = build([s[mask[s]] for s in sorted_idx])
        node.right = build([s[~mask[s]] for s in sorted_idx])
        return node

    root = build([o.copy() for o in cols.order])
    return SurvivalTree(root, int(min_node_size), candidates,
                        tuple(c for c in aug.schema if c.name in candidates), aug.horizon,
                        float(split_ratio))


# -- criteria and tuning -----------------------------------------------------

def tree_loglik(tree: SurvivalTree, aug: AugmentedDataset) -> float:
    return binary_loglik(aug.y, tree.predict(aug))


def information_criterion(tree: SurvivalTree, aug: AugmentedDataset, kind: str = "BIC") -> float:
    """``-2 l + penalty * n_s`` with ``l`` from the Laplace hazards.

    BIC uses ``log(n_rows)`` per split, AIC uses 2.
    """
    ll = tree_loglik(tree, aug)
    if kind == "BIC":
        return -2.0 * ll + np.log(aug.n_rows) * tree.n_splits
    if kind == "AIC":
        return -2.0 * ll + 2.0 * tree.n_splits
    raise ValueError(f"kind must be AIC or BIC, got {kind!r}")


def stratified_folds(time, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold label per subject, stratified by observed time.

    Strata smaller than ``folds`` are merged with the next larger times; a
    short tail joins the last complete group.
    """
    if folds < 2:
        raise ValueError("need ≥2 folds")
    time = np.asarray(time)
    values, counts = np.unique(time, return_counts=True)
    groups, cur, size = [], [], 0
    for v, c in zip(values, counts):
        cur.append(v)
        size += c
        if size >= folds:
            groups.append(cur)
            cur, size = [], 0
    if cur:
        if not groups:
            raise DataError(f"empty fold: {len(time)} subjects for {folds} folds")
        groups[-1] = groups[-1] + cur
    label = np.empty(len(time), dtype=np.int64)
    offset = 0
    for g in groups:
        idx = np.flatnonzero(np.isin(time, g))
        idx = rng.permutation(idx)
        label[idx] = (offset + np.arange(len(idx))) % folds
        offset = (offset + len(idx)) % folds
    return label


def predictive_loglik_cv(ds: Dataset, candidates: Sequence[str] | None = None,
                         min_node_size: int = 1, folds: int = 5, seed: int = 0,
                         fold_labels: np.ndarray | None = None, split_ratio: float = 2.0) -> float:
    """Mean held-out log-likelihood of trees over subject-level folds."""
    if folds < 2:
        raise ValueError("need ≥2 folds")
    if fold_labels is None:
        fold_labels = stratified_folds(ds.time, folds, np.random.default_rng(seed))
    out = []
    for f in range(folds):
        test = fold_labels == f
        if not test.any() or test.all():
            raise DataError(f"fold {f} is empty")
        tr = augment(ds.subset(~test))
        te = augment(ds.subset(test))
        tree = grow(tr, candidates, min_node_size, split_ratio)
        out.append(tree_loglik(tree, te))
    return float(np.mean(out))


@dataclass
class TuningResult:
    grid: np.ndarray
    criterion_values: np.ndarray
    chosen: int
    criterion: str
    n_splits: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"min_node_size": self.grid, "criterion_value": self.criterion_values,
                             "n_splits": self.n_splits})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")


def default_grid(n_rows: int) -> np.ndarray:
    """Node sizes ``1..floor(n/2)``, thinned to at most 200 values."""
    top = max(1, n_rows // 2)
    if top <= MAX_DEFAULT_GRID:
        return np.arange(1, top + 1)
    warnings.warn(f"default node-size grid 1..{top} thinned to {MAX_DEFAULT_GRID} points",
                  TreeWarning, stacklevel=3)
    return np.unique(np.round(np.linspace(1, top, MAX_DEFAULT_GRID)).astype(np.int64))


def _choose(grid, values, criterion: str) -> int:
    v = values if criterion == "ll" else -values
    best = np.max(v)
    tie = np.abs(v - best) <= 1e-9 * max(1.0, abs(best))
    return int(grid[np.flatnonzero(tie)[-1]])


def tune(ds: Dataset, candidates: Sequence[str] | None = None, grid=None, criterion: str = "BIC",
         seed: int = 0, folds: int = 5, n_jobs: int = 1,
         split_ratio: float = 2.0) -> tuple[TuningResult, SurvivalTree]:
    """Pick the minimal node size over ``grid`` and refit on all data.

    AIC and BIC are minimised on the training data; ``ll`` maximises the
    cross-validated predictive log-likelihood.  Ties go to the larger size.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    aug = augment(ds)
    grid = default_grid(aug.n_rows) if grid is None else np.asarray(grid, dtype=np.int64)
    if grid.size == 0:
        raise ValueError("empty node-size grid")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("node-size grid must be strictly ascending")
    if np.any(grid < 1):
        raise ValueError("node sizes must be >= 1")
    labels = None
    if criterion == "ll":
        labels = stratified_folds(ds.time, folds, np.random.default_rng(seed))

    def evaluate(m):
        tree = grow(aug, candidates, int(m), split_ratio)
        if criterion == "ll":
            val = predictive_loglik_cv(ds, candidates, int(m), folds, fold_labels=labels,
                                       split_ratio=split_ratio)
        else:
            val = information_criterion(tree, aug, criterion)
        return val, tree.n_splits

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            results = list(ex.map(evaluate, grid))
    else:
        results = [evaluate(m) for m in grid]
    values = np.array([r[0] for r in results])
    splits = np.array([r[1] for r in results])
    chosen = _choose(grid, values, criterion)
    tree = grow(aug, candidates, chosen, split_ratio)
    if np.all(splits == 0):
        warnings.warn("every tree on the grid is root-only", TreeWarning, stacklevel=2)
    return TuningResult(grid, values, chosen, criterion, splits), tree
