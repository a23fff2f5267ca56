import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from dthazard import augment, fit_parametric, recode_last_period
from dthazard.data import TIME
from dthazard.psplines import (AdditiveHazardModel, SmoothingWarning, SplineBasisSpec, _setup,
                               bspline_basis, difference_matrix, difference_penalty,
                               evaluate_smooth, fit_additive, select_smoothing, smoothing_score)
from dthazard.synth import CovariateLaw, GeneratorSpec, simulate

from conftest import sim_dataset


def cox_de_boor(i: int, d: int, t, x: float) -> float:
    """Scalar recursion, written independently of the vectorised basis."""
    if d == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    out = 0.0
    if t[i + d] != t[i]:
        out += (x - t[i]) / (t[i + d] - t[i]) * cox_de_boor(i, d - 1, t, x)
    if t[i + d + 1] != t[i + 1]:
        out += (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * cox_de_boor(i + 1, d - 1, t, x)
    return out


def uniform_spec(lo, hi, n_basis, degree=3, order=2, variable="x"):
    h = (hi - lo) / (n_basis - degree)
    knots = lo + h * np.arange(-degree, n_basis + 1)
    return SplineBasisSpec(variable, n_basis, degree, order, tuple(knots))


# -- basis -----------------------------------------------------------------------

def test_degree_zero_indicators():
    spec = SplineBasisSpec("x", 2, 0, 1, (0.0, 1.0, 2.0))
    np.testing.assert_array_equal(bspline_basis(spec, [0.5, 1.5]), [[1, 0], [0, 1]])


def test_against_scalar_recursion():
    spec = uniform_spec(0.0, 10.0, 7)
    assert spec.span == (0.0, 10.0)
    row = bspline_basis(spec, [5.0])[0]
    oracle = [cox_de_boor(i, 3, spec.knots, 5.0) for i in range(7)]
    np.testing.assert_allclose(row, oracle, atol=1e-12)


def test_against_scipy():
    spec = uniform_spec(-2.0, 3.0, 9)
    x = np.linspace(-2.0, 3.0, 57)[:-1]
    ref = BSpline.design_matrix(x, np.array(spec.knots), 3).toarray()
    np.testing.assert_allclose(bspline_basis(spec, x), ref, atol=1e-12)


def test_outside_span():
    spec = uniform_spec(0.0, 1.0, 6)
    with pytest.raises(ValueError, match="outside"):
        bspline_basis(spec, [1.5])
    np.testing.assert_allclose(bspline_basis(spec, [1.5], clamp=True), bspline_basis(spec, [1.0]))


def test_knot_placement():
    x = np.array([2.0, 5.0, 9.0])
    spec = SplineBasisSpec("x", 8).with_knots(x)
    assert len(spec.knots) == 8 + 3 + 1
    lo, hi = spec.span
    assert lo < 2.0 and hi > 9.0
    assert 2.0 - lo == pytest.approx(7e-8) and hi - 9.0 == pytest.approx(7e-8)
    assert np.allclose(np.diff(spec.knots), np.diff(spec.knots)[0])


def test_spec_validation():
    with pytest.raises(ValueError):
        SplineBasisSpec("x", 3, 3)
    with pytest.raises(ValueError):
        SplineBasisSpec("x", 5, 3, 2, (0, 1, 2))
    with pytest.raises(ValueError):
        SplineBasisSpec("x", 4, 3, 2, (0, 1, 2, 3, 3, 5, 6, 7, 8))
    assert SplineBasisSpec(TIME).n_basis == 10 and not SplineBasisSpec(TIME).centered
    assert SplineBasisSpec("age").n_basis == 20 and SplineBasisSpec("age").centered


@settings(max_examples=40)
@given(st.integers(4, 25), st.integers(0, 4), st.floats(-100, 100), st.floats(0.1, 50),
       st.integers(0, 2**32 - 1))
def test_partition_of_unity_and_local_support(n_basis, degree, lo, width, seed):
    if n_basis <= degree:
        n_basis = degree + 1
    spec = uniform_spec(lo, lo + width, max(n_basis, 2), degree, order=1)
    x = np.random.default_rng(seed).uniform(lo, lo + width, 1000)
    B = bspline_basis(spec, x)
    assert np.all(B >= -1e-15)
    assert np.max(np.abs(B.sum(axis=1) - 1.0)) <= 1e-12
    assert np.all((np.abs(B) > 0).sum(axis=1) <= degree + 1)


# -- penalty ---------------------------------------------------------------------

def test_difference_penalty_examples():
    K = difference_penalty(4, 2)
    c = np.arange(1.0, 5.0)
    assert c @ K @ c == 0.0
    c = np.array([0.0, 1.0, 0.0])
    assert c @ difference_penalty(3, 2) @ c == 4.0
    assert np.ones(5) @ difference_penalty(5, 1) @ np.ones(5) == 0.0
    assert difference_matrix(6, 2).shape == (4, 6)


@given(st.integers(3, 30), st.floats(-10, 10), st.floats(-10, 10))
def test_second_order_annihilates_linear(n, a, b):
    c = a + b * np.arange(n)
    assert abs(c @ difference_penalty(n, 2) @ c) <= 1e-9 * (1 + a * a + b * b * n * n)


@given(st.integers(3, 15), st.integers(1, 2))
def test_penalty_psd_with_polynomial_null_space(n, m):
    if n <= m:
        return
    K = difference_penalty(n, m)
    ev = np.linalg.eigvalsh(K)
    assert ev.min() > -1e-10
    assert np.sum(ev < 1e-10) == m


# -- fitting ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def sim_aug():
    return augment(sim_dataset(21, 600, 8, n_cov=2))


def test_penalised_score_equations(sim_aug):
    smooths = [SplineBasisSpec(TIME, 6), SplineBasisSpec("x1", 8)]
    P = _setup(sim_aug, smooths, ["x2"], "logit")
    for deltas in ([0.1, 1.0], [10.0, 100.0]):
        res = P.fit(np.array(deltas))
        assert res.converged
        g = P.X.T @ (P.y - res.fitted) - P.penalty(deltas) @ res.coef
        assert np.max(np.abs(g)) <= 1e-6


def test_centering_and_fixed_deltas(sim_aug):
    smooths = [SplineBasisSpec(TIME, 6), SplineBasisSpec("x1", 8)]
    m = fit_additive(sim_aug, smooths, ["x2"], deltas=[1.0, 3.0])
    np.testing.assert_array_equal(m.deltas, [1.0, 3.0])
    np.testing.assert_array_equal(select_smoothing(sim_aug, smooths, ["x2"], deltas=[1.0, 3.0]),
                                  [1.0, 3.0])
    _, term = m.term("x1")
    f = bspline_basis(term.spec, sim_aug.covariates["x1"]) @ term.coefficients
    assert abs(f.sum()) <= 1e-6 * sim_aug.n_rows
    assert m.converged and m.intercept is None


def test_edf_decreases_with_delta(sim_aug):
    smooths = [SplineBasisSpec(TIME, 6), SplineBasisSpec("x1", 8)]
    P = _setup(sim_aug, smooths, ["x2"], "logit")
    traces = []
    for ld in np.arange(-3, 7.0):
        deltas = np.array([1.0, 10.0 ** ld])
        res = P.fit(deltas)
        traces.append(P.trace(res, deltas).sum())
    assert np.all(np.diff(traces) < 0)


def test_large_delta_gives_straight_line(sim_aug):
    smooths = [SplineBasisSpec("x1", 12)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SmoothingWarning)
        m = fit_additive(sim_aug, smooths, ["x2"], deltas=[1e8])
    x = np.asarray(sim_aug.covariates["x1"])
    grid = np.sort(np.unique(x))
    fit = evaluate_smooth(m, "x1", grid).fit.to_numpy()
    line = np.polyval(np.polyfit(grid, fit, 1), grid)
    assert np.max(np.abs(fit - line)) < 1e-3
    lin = fit_parametric(sim_aug, ["x1", "x2"], encode_time="none", intercept=True)
    assert m.loglik == pytest.approx(lin.loglik, abs=1e-2)
    assert m.linear_coefficients["x2"] == pytest.approx(lin.coefficients["x2"], abs=1e-3)


def test_adding_smooth_never_increases_deviance():
    aug = augment(sim_dataset(4, 150, 5, n_cov=1))
    base = fit_additive(aug, [SplineBasisSpec(TIME, 5)], deltas=[0.0])
    more = fit_additive(aug, [SplineBasisSpec(TIME, 5), SplineBasisSpec("x1", 6)], deltas=[0.0, 0.0])
    assert -2 * more.loglik <= -2 * base.loglik + 1e-6


def test_quadratic_baseline_recovered():
    k = 15
    t = np.arange(1, k)
    alpha = -2.0 + 0.04 * (t - 7.0) ** 2
    spec = GeneratorSpec(2000, k, alpha, {"x1": 0.5}, {"x1": CovariateLaw("normal")},
                         "uniform", seed=7)
    aug = augment(recode_last_period(simulate(spec)))
    m = fit_additive(aug, [SplineBasisSpec(TIME)], ["x1"])
    grid = np.arange(1.0, aug.time.max() + 1)
    fit = evaluate_smooth(m, TIME, grid).fit.to_numpy()
    r = np.corrcoef(fit, alpha[: len(grid)])[0, 1]
    assert r > 0.95


def test_straight_line_truth_smooths_more():
    def selected(effect):
        spec = GeneratorSpec(3000, 5, np.full(4, -1.5), {"x1": effect},
                             {"x1": CovariateLaw("uniform", (-2.0, 2.0))}, "uniform", seed=13)
        aug = augment(recode_last_period(simulate(spec)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SmoothingWarning)
            return np.log10(select_smoothing(aug, [SplineBasisSpec("x1", 10)])[0])

    line = selected(0.8)
    curve = selected(lambda x: 1.2 * np.sin(2.0 * x))
    assert line > 1.0
    assert line > curve


def test_gcv_and_ubre_scores():
    assert smoothing_score(100.0, 5.0, 200, "gcv") == pytest.approx(200 * 100 / 195**2)
    assert smoothing_score(100.0, 5.0, 200, "ubre") == pytest.approx(0.5 + 0.05 - 1.0)
    with pytest.raises(ValueError):
        smoothing_score(1.0, 1.0, 10, "aic")


def test_selected_fit_is_interior(sim_aug):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        m = fit_additive(sim_aug, [SplineBasisSpec(TIME, 6)], ["x1", "x2"])
    ld = np.log10(m.deltas[0])
    if -6 < ld < 8:
        assert not any(issubclass(w.category, SmoothingWarning) for w in caught)
    assert np.isfinite(m.gcv)


def test_evaluate_smooth_bands_and_zero(sim_aug):
    m = fit_additive(sim_aug, [SplineBasisSpec(TIME, 6), SplineBasisSpec("x1", 8)], ["x2"],
                     deltas=[1.0, 1.0])
    lo, hi = m.term("x1")[1].spec.span
    e = evaluate_smooth(m, "x1", np.linspace(lo, hi, 20))
    assert list(e.columns) == ["grid", "fit", "se", "lower", "upper"]
    assert np.all(e.lower <= e.fit) and np.all(e.fit <= e.upper)
    with pytest.raises(ValueError):
        evaluate_smooth(m, "x1", [hi + 1.0])
    m.terms[1].coefficients = np.zeros(8)
    assert np.all(evaluate_smooth(m, "x1", np.linspace(lo, hi, 5)).fit == 0.0)


def test_json_roundtrip(sim_aug):
    m = fit_additive(sim_aug, [SplineBasisSpec(TIME, 6), SplineBasisSpec("x1", 8)], ["x2"],
                     deltas=[1.0, 5.0])
    d = json.loads(m.to_json())
    for term in d["smooth_terms"]:
        for key in ("knots", "coefficients", "delta", "edf"):
            assert key in term
    m2 = AdditiveHazardModel.from_dict(d)
    np.testing.assert_allclose(m2.hazard(sim_aug.time, sim_aug.covariates),
                               m.hazard(sim_aug.time, sim_aug.covariates), rtol=1e-14)
