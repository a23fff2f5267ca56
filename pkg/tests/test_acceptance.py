"""Acceptance criteria 1-14.

Each test records one ``CRITERION n: PASS|FAIL ...`` line, printed at the
end of the session.  Criteria 1-7 need data/UnempDur.csv.
"""
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest

from dthazard import (CovariateLaw, GeneratorSpec, SplineBasisSpec, augment, calibration,
                      censoring_rate, continuation_ratio_factor, difference_penalty, evaluate_smooth,
                      fit_additive, fit_parametric, ingest_csv, log_likelihood, recode_last_period,
                      simulate, tune)
from dthazard.data import TIME, Dataset
from dthazard.glm import SeparationWarning, build_design, fit_irls
from dthazard.psplines import SmoothingWarning, bspline_basis
from dthazard.tree import gini

import conftest
from conftest import UNEMPDUR, random_dataset, sim_dataset
from test_data import subject_loglik, table_fn, with_index
from test_glm import direct_max
from tree_oracle import check_against_brute_force, enumerated_datasets

COVARIATES = ["age", "reprate", "disrate", "logwage", "tenure", "ui"]
needs_data = pytest.mark.skipif(not UNEMPDUR.exists(), reason="UnempDur data not available")


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def unemp():
    return recode_last_period(ingest_csv(UNEMPDUR, "spell", "status", horizon=21))


@pytest.fixture(scope="module")
def model1(unemp):
    t0 = time.perf_counter()
    m = fit_parametric(augment(unemp), COVARIATES)
    return m, time.perf_counter() - t0


# -- UnempDur ------------------------------------------------------------------------

@needs_data
def test_criterion_01_censoring_rate():
    t0 = time.perf_counter()
    ds = ingest_csv(UNEMPDUR, "spell", "status", horizon=21)
    rate = censoring_rate(ds)
    dt = time.perf_counter() - t0
    ok = ds.n == 3210 and abs(rate - 0.3909657) <= 5e-7 and dt < 1.0
    record(1, ok, f"n={ds.n} censoring rate {rate:.7f} (target 0.3909657) in {dt:.2f}s")


@needs_data
def test_criterion_02_model1_table(model1):
    m, dt = model1
    target = {"age": (-0.012, 0.003), "reprate": (0.285, 0.342), "disrate": (-0.764, 0.383),
              "logwage": (0.231, 0.072), "tenure": (-0.005, 0.005), "ui": (-1.151, 0.052)}
    se = dict(zip(m.param_names, m.standard_errors()))
    worst = max(max(abs(m.coefficients[k] - c), abs(se[k] - s)) for k, (c, s) in target.items())
    ok = worst <= 0.005 and m.converged and dt < 10.0
    coefs = ", ".join(f"{k} {m.coefficients[k]:.4f} ({se[k]:.4f})" for k in target)
    record(2, ok, f"max abs deviation {worst:.4f} in {dt:.2f}s: {coefs}")


@needs_data
def test_criterion_03_ui_factor(model1):
    m, _ = model1
    f = continuation_ratio_factor(m, "ui")
    f = f["yes"] if isinstance(f, dict) else f
    record(3, abs(f - 0.316) <= 0.005, f"exp(gamma_ui) = {f:.4f} (target 0.316)")


def local_extrema(f):
    mins = [i for i in range(1, len(f) - 1) if f[i - 1] > f[i] < f[i + 1]]
    maxs = [i for i in range(1, len(f) - 1) if f[i - 1] < f[i] > f[i + 1]]
    return mins, maxs


@needs_data
def test_criterion_04_model2(unemp):
    aug = augment(unemp)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmoothingWarning)
        m = fit_additive(aug, [SplineBasisSpec(TIME, 5)], COVARIATES)
    target = {"age": -0.012, "reprate": 0.301, "disrate": -0.755, "logwage": 0.236,
              "tenure": -0.006, "ui": -1.175}
    dev = {k: abs(m.linear_coefficients[k] - v) for k, v in target.items()}
    t = np.arange(1.0, 21.0)
    f = evaluate_smooth(m, TIME, t).fit.to_numpy()
    mins, maxs = local_extrema(f)
    first_min = t[mins[0]] if mins else None
    shape = (first_min is not None and 8 <= first_min <= 12
             and any(14 <= t[i] <= 18 and t[i] > first_min for i in maxs))
    coef_ok = max(dev.values()) <= 0.02
    worst = max(dev, key=dev.get)
    record(4, coef_ok and shape,
           f"coefficients {'ok' if coef_ok else 'off'} (worst {worst} "
           f"{m.linear_coefficients[worst]:.4f} vs {target[worst]}, |diff| {dev[worst]:.4f}, "
           f"tolerance 0.02); baseline first minimum t={first_min}, local maxima "
           f"{[float(t[i]) for i in maxs]}, shape {'ok' if shape else 'off'}; "
           f"delta {m.deltas[0]:.4g}")


@needs_data
def test_criterion_05_model3_age(unemp):
    aug = augment(unemp)
    linear = [c for c in COVARIATES if c != "age"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmoothingWarning)
        m = fit_additive(aug, [SplineBasisSpec(TIME, 5), SplineBasisSpec("age", 25)], linear,
                         criterion="ubre")
    ages = np.arange(20.0, 62.0)
    f = evaluate_smooth(m, "age", ages).fit.to_numpy()
    peak = ages[np.argmax(f)]
    tail = f[ages >= 35]
    ok = 20 <= peak <= 30 and np.all(np.diff(tail) < 0)
    record(5, ok, f"age smooth peak at {peak:.0f}, decreasing on [35, 61]: "
                  f"{bool(np.all(np.diff(tail) < 0))}; deltas {np.round(m.deltas, 4).tolist()}")


@needs_data
def test_criterion_06_tree(unemp):
    grid = np.arange(100, 1501, 10)
    cand = [TIME] + COVARIATES
    t0 = time.perf_counter()
    res, tree = tune(unemp, cand, grid, "BIC", split_ratio=3.0, n_jobs=4)
    dt = time.perf_counter() - t0
    med = {c: float(np.median(unemp.covariates[c])) for c in COVARIATES if c != "ui"}
    h_yes = tree.hazard(15, {**med, "ui": "yes", "age": 30.0})
    h_no = tree.hazard(2, {**med, "ui": "no", "logwage": 6.0})
    used = tree.split_variables()
    ok = (used[0] == "ui" and "reprate" not in used and "disrate" not in used
          and abs(h_yes - 0.110) <= 0.02 and abs(h_no - 0.302) <= 0.02
          and 700 <= res.chosen <= 1000 and abs(tree.n_leaves - 12) <= 2 and dt < 120)
    record(6, ok, f"chosen {res.chosen} (point target 840), {tree.n_leaves} leaves, first split "
                  f"{used[0]}, split variables {sorted(set(used))}, hazards {h_yes:.4f} "
                  f"(0.110) and {h_no:.4f} (0.302), {dt:.1f}s; node-split ratio 3")


@needs_data
def test_criterion_07_calibration(unemp, model1):
    m, _ = model1
    tab = calibration(augment(unemp), m.hazard, K=10)
    record(7, tab.n_groups == 10 and tab.max_gap < 0.05,
           f"{tab.n_groups} groups, max |fitted - empirical| {tab.max_gap:.4f} (< 0.05)")


# -- standalone ---------------------------------------------------------------------

def test_criterion_08_likelihood_oracle():
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(1000 + seed)
        n, k = int(rng.integers(1, 21)), int(rng.integers(2, 6))
        ds = with_index(recode_last_period(random_dataset(rng, n, k)))
        table = rng.uniform(0.01, 0.99, (n, k))
        diff = abs(log_likelihood(augment(ds), table_fn(ds, table)) - subject_loglik(ds, table))
        worst = max(worst, diff)
    record(8, worst <= 1e-12, f"200 datasets, max |augmented - subject-level| {worst:.2e}")


def test_criterion_09_recode_invariance():
    worst, n_inf, n_finite, seed = 0.0, 0, 0, 0
    while n_finite < 100:
        seed += 1
        rng = np.random.default_rng(2000 + seed)
        n, k = int(rng.integers(1, 21)), int(rng.integers(2, 6))
        raw = random_dataset(rng, n, k)
        table = rng.uniform(0.01, 0.99, (n, k))
        table[:, -1] = 1.0
        a, b = with_index(raw), with_index(recode_last_period(raw))
        with warnings.catch_warnings():
            # censoring at k has probability zero once hazard(k) = 1
            warnings.simplefilter("ignore", RuntimeWarning)
            l1 = log_likelihood(augment(a), table_fn(a, table))
            l2 = log_likelihood(augment(b), table_fn(b, table))
        if l1 == l2 == -np.inf:
            n_inf += 1
            continue
        n_finite += 1
        worst = max(worst, abs(l1 - l2))
    record(9, worst <= 1e-12, f"100 datasets, max |l_before - l_after| {worst:.2e} "
                              f"({n_inf} more with a censoring at k gave -inf on both sides)")


def test_criterion_10_irls():
    worst_score, worst_coef, used, skipped, seed = 0.0, 0.0, 0, 0, 0
    while used < 50:
        seed += 1
        ds = sim_dataset(3000 + seed, 40, 3, n_cov=2)
        d = build_design(augment(ds))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = fit_irls(d.X, d.y)
        if any(w.category is SeparationWarning for w in caught) or not res.converged \
                or np.isnan(res.coef).any():
            skipped += 1  # no finite maximum to compare against
            continue
        used += 1
        worst_score = max(worst_score, float(np.max(np.abs(d.X.T @ (d.y - res.fitted)))))
        worst_coef = max(worst_coef, float(np.max(np.abs(res.coef - direct_max(d.X, d.y, res.coef + 0.1)))))
    ok = worst_score <= 1e-6 and worst_coef <= 1e-4
    record(10, ok, f"50 instances ({skipped} separated skipped): max score {worst_score:.1e}, "
                   f"max |IRLS - direct| {worst_coef:.1e}")


def test_criterion_11_psplines():
    rng = np.random.default_rng(11)
    spec = SplineBasisSpec("x", 12).with_knots(np.array([0.0, 10.0]))
    B = bspline_basis(spec, rng.uniform(0.0, 10.0, 1000))
    pou = float(np.max(np.abs(B.sum(axis=1) - 1.0)))
    K = difference_penalty(12, 2)
    # exact zero needs exactly representable sequences; floats are checked relative to scale
    annih = max(abs(float(c @ K @ c)) for a in range(-3, 4) for b in range(-3, 4)
                for c in [a + b * np.arange(12.0)])
    lin = 3.0 - 0.7 * np.arange(12)
    annih_float = abs(float(lin @ K @ lin)) / float(lin @ lin)

    aug = augment(sim_dataset(21, 600, 8, n_cov=2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmoothingWarning)
        m = fit_additive(aug, [SplineBasisSpec("x1", 12)], ["x2"], deltas=[1e8])
    grid = np.unique(aug.covariates["x1"])
    fit = evaluate_smooth(m, "x1", grid).fit.to_numpy()
    sup = float(np.max(np.abs(fit - np.polyval(np.polyfit(grid, fit, 1), grid))))
    ok = pou <= 1e-12 and annih == 0.0 and annih_float <= 1e-14 and sup <= 1e-3 and m.converged
    record(11, ok, f"partition of unity {pou:.1e}, integer linear sequences penalty {annih}, "
                   f"float sequence {annih_float:.1e} relative, "
                   f"delta=1e8 sup distance to a line {sup:.1e}")


def test_criterion_12_tree_oracles():
    rng = np.random.default_rng(12)
    identity = True
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        e = int(rng.integers(0, n + 1))
        pi = Fraction(e, n)
        brier = (e * (1 - pi) ** 2 + (n - e) * pi ** 2) / n
        identity &= brier == 2 * pi * (1 - pi) / 2
        identity &= abs(float(gini(e, n)) / 2 - float(brier)) <= 1e-15
    checked, bad = 0, 0
    for ds in enumerated_datasets(max_subjects=4, max_rows=10):
        for m in (1, 2, 3):
            checked += 1
            bad += not check_against_brute_force(ds, m)
    record(12, identity and bad == 0,
           f"Gini/Brier identity on 1000 nodes {'exact' if identity else 'broken'}; "
           f"{checked} enumerated trees, {bad} mismatches")


def test_criterion_13_recovery():
    gamma = np.array([0.5, -1.0])
    t0 = time.perf_counter()
    hits = 0
    for rep in range(100):
        spec = GeneratorSpec(5000, 10, np.linspace(-2.5, -1.5, 9),
                             {"x1": gamma[0], "x2": gamma[1]},
                             {"x1": CovariateLaw("normal"), "x2": CovariateLaw("normal")},
                             "uniform", seed=13_000 + rep)
        m = fit_parametric(augment(recode_last_period(simulate(spec))))
        est = np.array([m.coefficients["x1"], m.coefficients["x2"]])
        se = m.standard_errors()[-2:]
        hits += bool(np.all(np.abs(est - gamma) <= 3 * se))
    dt = time.perf_counter() - t0
    record(13, hits >= 95 and dt < 120, f"{hits}/100 replications within 3 SE, {dt:.1f}s")


def test_criterion_14_calibration_oracle():
    spec = GeneratorSpec(16_000, 10, np.linspace(-2.0, -1.0, 9), {"x1": 0.5, "x2": -1.0},
                         {"x1": CovariateLaw("normal"), "x2": CovariateLaw("normal")},
                         "uniform", seed=14)
    aug = augment(recode_last_period(simulate(spec)))
    m = fit_parametric(aug)
    tab = calibration(aug, m.hazard, K=10)
    ok = aug.n_rows >= 50_000 and tab.max_gap < 0.02
    record(14, ok, f"{aug.n_rows} rows, max group gap {tab.max_gap:.4f} (< 0.02)")
