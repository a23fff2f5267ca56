"""Command-line front end.

Subcommands ``augment``, ``fit``, ``tree``, ``diagnose`` and ``simulate``
read and write flat CSV/JSON files.  Every run leaves a ``run.json``
manifest in its output directory; feeding the recorded ``argv`` back to
:func:`main` reproduces all outputs byte for byte.

Exit codes: 0 success, 2 usage or input error, 3 fit did not converge.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .data import (TIME, DataError, Dataset, augment, censoring_rate, ingest_csv,
                   recode_last_period)
from .diagnostics import calibration, martingale_residuals, residual_trend
from .glm import ConvergenceWarning, ParametricHazardModel, fit_parametric, inverse_link, wald_table
from .psplines import AdditiveHazardModel, SplineBasisSpec, evaluate_smooth, fit_additive
from .synth import CovariateLaw, GeneratorSpec, simulate
from .tree import SurvivalTree, tune

log = logging.getLogger("dthazard")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 2, 3
FLOAT_FORMAT = "%.6g"


class UsageError(Exception):
    pass


# -- formula -----------------------------------------------------------------

@dataclass
class Formula:
    """Parsed ``y ~ ...`` right-hand side."""

    time: str | None = None
    time_spline: SplineBasisSpec | None = None
    smooths: list[SplineBasisSpec] = field(default_factory=list)
    linear: list[str] = field(default_factory=list)

    @property
    def additive(self) -> bool:
        return self.time == "spline" or bool(self.smooths)

    @property
    def variables(self) -> list[str]:
        return [s.variable for s in self.smooths] + self.linear


def _split_terms(rhs: str) -> list[str]:
    terms, depth, cur = [], 0, ""
    for ch in rhs:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise UsageError("unbalanced parentheses in formula")
        if ch == "+" and depth == 0:
            terms.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if depth:
        raise UsageError("unbalanced parentheses in formula")
    terms.append(cur.strip())
    if any(t == "" for t in terms):
        raise UsageError("empty term in formula")
    return terms


def _basis_args(name: str, args: list[str]) -> SplineBasisSpec:
    try:
        nums = [int(a) for a in args]
    except ValueError:
        raise UsageError(f"basis options for {name!r} must be integers: {args}") from None
    if len(nums) > 3:
        raise UsageError(f"too many basis options for {name!r}")
    keys = ("n_basis", "degree", "penalty_order")
    try:
        return SplineBasisSpec(name, **dict(zip(keys, nums)))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


_CALL = re.compile(r"^([A-Za-z_][\w.]*)\s*\((.*)\)$")
_NAME = re.compile(r"^[A-Za-z_][\w.]*$")


def parse_formula(text: str) -> Formula:
    """Parse ``y ~ time(dummies|spline[,n,d,m]) + s(name[,n,d,m]) + name``.

    ``timeInt(...)`` is accepted for ``time(...)``; a bare ``timeInt`` means
    dummies.  ``y ~ 1`` fits an intercept only.
    """
    if "~" not in text:
        raise UsageError("formula must contain '~'")
    lhs, rhs = (s.strip() for s in text.split("~", 1))
    if lhs != "y":
        raise UsageError(f"formula response must be 'y', got {lhs!r}")
    f = Formula()
    for term in _split_terms(rhs):
        m = _CALL.match(term)
        if term in ("1", "0"):
            continue
        if term == TIME:
            f.time = "dummies"
            continue
        if m and m.group(1) in ("time", TIME):
            args = [a.strip() for a in m.group(2).split(",") if a.strip()]
            if not args or args[0] not in ("dummies", "spline"):
                raise UsageError(f"time term must be dummies or spline: {term!r}")
            if f.time is not None:
                raise UsageError("more than one time term")
            f.time = args[0]
            if args[0] == "spline":
                f.time_spline = _basis_args(TIME, args[1:])
            elif len(args) > 1:
                raise UsageError("dummies take no options")
            continue
        if m and m.group(1) == "s":
            args = [a.strip() for a in m.group(2).split(",")]
            if not _NAME.match(args[0]):
                raise UsageError(f"bad smooth term {term!r}")
            if args[0] == TIME:
                if f.time is not None:
                    raise UsageError("more than one time term")
                f.time, f.time_spline = "spline", _basis_args(TIME, args[1:])
            else:
                f.smooths.append(_basis_args(args[0], args[1:]))
            continue
        if _NAME.match(term):
            f.linear.append(term)
            continue
        raise UsageError(f"cannot parse formula term {term!r}")
    names = f.variables
    if len(set(names)) != len(names):
        raise UsageError("a variable appears twice in the formula")
    return f


# -- model files -------------------------------------------------------------

def load_model(d: dict):
    kind = d.get("type")
    if kind == "parametric":
        return ParametricHazardModel.from_dict(d)
    if kind == "additive":
        return AdditiveHazardModel.from_dict(d)
    if kind == "tree":
        return SurvivalTree.from_dict(d)
    raise DataError(f"unknown model type {kind!r}")


def _check_schema(model, ds: Dataset) -> None:
    for cov in model.schema:
        if cov.name not in ds.covariates:
            raise DataError(f"model covariate {cov.name!r} missing from data")
        dcov = ds.covariate(cov.name)
        if dcov.is_factor != cov.is_factor:
            raise DataError(f"covariate {cov.name!r}: factor/numeric mismatch between model and data")
        if cov.is_factor:
            bad = set(np.unique(ds.covariates[cov.name])) - set(cov.levels)
            if bad:
                raise DataError(f"covariate {cov.name!r} has levels unknown to the model: {sorted(bad)}")


def _hazard_fn(model):
    return model.hazard_fn() if isinstance(model, SurvivalTree) else model


# -- helpers -----------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(frame: pd.DataFrame, path: Path, outputs: list) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    outputs.append(path.name)


def _write_text(text: str, path: Path, outputs: list) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n")
    outputs.append(path.name)


def _load(args, covariates: Sequence[str] | None = None) -> Dataset:
    if args.covariates:
        covariates = [c.strip() for c in args.covariates.split(",") if c.strip()]
    factors = [c.strip() for c in (args.factor or "").split(",") if c.strip()]
    ds = ingest_csv(args.input, args.time, args.status, covariates=covariates, factors=factors,
                    event_label=args.event_label, horizon=args.horizon)
    return recode_last_period(ds)


def _parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"grid must be a:b:step or a:b, got {text!r}") from None
    if len(nums) == 1:
        return np.array(nums)
    if len(nums) not in (2, 3):
        raise UsageError(f"grid must be a:b:step, got {text!r}")
    a, b = nums[:2]
    step = nums[2] if len(nums) == 3 else 1
    if step < 1 or b < a or a < 1:
        raise UsageError(f"invalid grid {text!r}")
    return np.arange(a, b + 1, step)


# -- subcommands -------------------------------------------------------------

def cmd_augment(args, out: Path, outputs: list) -> dict:
    ds = _load(args)
    aug = augment(ds)
    frame = aug.to_frame()
    _write_csv(frame, out / "augmented.csv", outputs)
    info = {"n_subjects": ds.n, "n_rows": aug.n_rows, "censoring_rate": censoring_rate(ds),
            "n_dropped": ds.n_dropped}
    print(f"rows {aug.n_rows}  subjects {ds.n}  censoring rate {info['censoring_rate']:.7f}  "
          f"dropped {ds.n_dropped}")
    return info


def cmd_fit(args, out: Path, outputs: list) -> dict:
    f = parse_formula(args.formula)
    ds = _load(args, covariates=f.variables)
    missing = [v for v in f.variables if v not in ds.covariates]
    if missing:
        raise DataError(f"formula variables not in data: {missing}")
    aug = augment(ds)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if f.additive:
            smooths = ([f.time_spline] if f.time == "spline" else []) + f.smooths
            if f.time == "dummies":
                raise UsageError("time dummies cannot be combined with smooth terms; use time(spline)")
            model = fit_additive(aug, smooths, f.linear, link=args.link, criterion=args.smoothing)
        else:
            encode = "dummies" if f.time == "dummies" else "none"
            model = fit_parametric(aug, f.linear, encode_time=encode, link=args.link,
                                   intercept=f.time is None)
    for w in caught:
        log.warning("%s", w.message)
    nonconverged = any(issubclass(w.category, ConvergenceWarning) for w in caught) or not model.converged

    _write_text(model.to_json(), out / "model.json", outputs)
    wald = wald_table(model, covariates_only=f.additive)
    _write_csv(wald.reset_index(names="term"), out / "wald.csv", outputs)
    if isinstance(model, ParametricHazardModel):
        if f.time == "dummies":
            _write_csv(model.baseline_hazard(), out / "baseline.csv", outputs)
    else:
        for term in model.terms:
            var = term.spec.variable
            if var == TIME:
                grid = np.arange(1, aug.horizon, dtype=float)
                grid = grid[(grid >= term.spec.span[0]) & (grid <= term.spec.span[1])]
                sm = evaluate_smooth(model, TIME, grid)
                base = pd.DataFrame({TIME: grid.astype(int), "fit": sm.fit, "se": sm.se,
                                     "hazard": inverse_link(sm.fit, model.link)})
                _write_csv(base, out / "baseline.csv", outputs)
            else:
                x = np.asarray(ds.covariates[var], dtype=float)
                grid = np.linspace(x.min(), x.max(), 100)
                _write_csv(evaluate_smooth(model, var, grid), out / f"smooth_{var}.csv", outputs)
    print(wald.to_string(float_format=lambda v: f"{v:.6g}"))
    print(f"loglik {model.loglik:.6g}  converged {model.converged}")
    return {"loglik": model.loglik, "converged": bool(not nonconverged), "_exit":
            EXIT_NONCONVERGED if nonconverged else EXIT_OK}


def cmd_tree(args, out: Path, outputs: list) -> dict:
    ds = _load(args)
    candidates = [TIME] + ds.covariate_names
    grid = _parse_grid(args.grid) if args.grid else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res, tree = tune(ds, candidates, grid, args.criterion, seed=args.seed, folds=args.folds,
                         n_jobs=args.threads, split_ratio=args.split_ratio)
    for w in caught:
        log.warning("%s", w.message)
    _write_text(tree.to_json(indent=2), out / "tree.json", outputs)
    _write_text(tree.to_text(), out / "tree.txt", outputs)
    _write_csv(res.to_frame(), out / "tuning.csv", outputs)
    print(f"chosen min node size {res.chosen}  splits {tree.n_splits}  terminal nodes {tree.n_leaves}")
    return {"chosen": res.chosen, "n_splits": tree.n_splits, "n_leaves": tree.n_leaves}


def cmd_diagnose(args, out: Path, outputs: list) -> dict:
    with open(args.model) as fh:
        model = load_model(json.load(fh))
    ds = _load(args)
    _check_schema(model, ds)
    if args.residual_vs and args.residual_vs not in ds.covariates:
        raise DataError(f"unknown covariate {args.residual_vs!r}")
    aug = augment(ds)
    hf = _hazard_fn(model)
    if args.groups < 2:
        raise UsageError("--groups must be >= 2")
    K = args.groups
    if K > aug.n_rows:
        log.warning("%d groups for %d rows: groups merged down to %d", K, aug.n_rows, aug.n_rows)
        K = aug.n_rows
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cal = calibration(aug, hf, K)
        res = martingale_residuals(ds, hf)
        trend = None
        if args.residual_vs:
            x = np.asarray(ds.covariates[args.residual_vs], dtype=float)
            trend = residual_trend(x, res.residual, args.bandwidth)
    for w in caught:
        log.warning("%s", w.message)
    _write_csv(cal.to_frame(), out / "calibration.csv", outputs)
    _write_csv(res.to_frame(args.residual_vs), out / "residuals.csv", outputs)
    if trend is not None:
        _write_csv(trend.to_frame(), out / "trend.csv", outputs)
    print(cal.to_frame().to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    info = {"groups": cal.n_groups, "max_gap": cal.max_gap, "tie_policy": cal.tie_policy}
    if trend is not None:
        info["trend_range"] = trend.range
    return info


def _parse_law(text: str) -> tuple[str, CovariateLaw]:
    name, _, law = text.partition("=")
    kind, _, params = law.partition(":")
    if not name or not kind:
        raise UsageError(f"covariate law must be name=kind[:p1,p2,...], got {text!r}")
    try:
        vals = tuple(float(p) for p in params.split(",") if p)
    except ValueError:
        raise UsageError(f"bad parameters in {text!r}") from None
    levels = ()
    if kind == "categorical":
        levels = tuple(str(i) for i in range(len(vals)))
    return name, CovariateLaw(kind, vals, levels)


def cmd_simulate(args, out: Path, outputs: list) -> dict:
    k = args.horizon
    if k is None:
        raise UsageError("simulate needs --horizon")
    try:
        baseline = [float(v) for v in args.baseline.split(",")]
    except ValueError:
        raise UsageError("--baseline must be comma-separated numbers") from None
    if len(baseline) == 1:
        baseline = baseline * (k - 1)
    laws = dict(_parse_law(t) for t in args.law or [])
    effects = {}
    for t in args.effect or []:
        name, _, v = t.partition("=")
        try:
            effects[name] = float(v)
        except ValueError:
            raise UsageError(f"effect must be name=value, got {t!r}") from None
    cens, _, p = args.censoring.partition(":")
    try:
        spec = GeneratorSpec(args.n, k, np.array(baseline), effects, laws, cens,
                             float(p) if p else 0.1, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = simulate(spec)
    frame = ds.to_frame("time", "status")
    _write_csv(frame, out / "simulated.csv", outputs)
    print(f"subjects {ds.n}  censoring rate {censoring_rate(ds):.6g}")
    return {"n_subjects": ds.n, "censoring_rate": censoring_rate(ds)}


COMMANDS = {"augment": cmd_augment, "fit": cmd_fit, "tree": cmd_tree, "diagnose": cmd_diagnose,
            "simulate": cmd_simulate}


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dthazard", description="Discrete time hazard models.")
    p.add_argument("--version", action="version", version=f"dthazard {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("input", help="subject-level CSV")
            sp.add_argument("--time", required=True, help="observed time column")
            sp.add_argument("--status", required=True, help="event indicator column")
            sp.add_argument("--event-label", help="status value that marks an event")
            sp.add_argument("--covariates", help="comma-separated covariate columns (default: all)")
            sp.add_argument("--factor", help="comma-separated columns to treat as factors")
        sp.add_argument("--horizon", type=int, help="number of time intervals k")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1, help="worker cap for tuning")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("augment", help="expand to person-period rows"))

    sp = sub.add_parser("fit", help="fit a parametric or additive hazard model")
    common(sp)
    sp.add_argument("--formula", required=True)
    sp.add_argument("--link", choices=("logit", "cloglog"), default="logit")
    sp.add_argument("--smoothing", choices=("gcv", "ubre"), default="gcv",
                    help="smoothing-parameter criterion")

    sp = sub.add_parser("tree", help="grow and tune a survival tree")
    common(sp)
    sp.add_argument("--criterion", choices=("AIC", "BIC", "ll"), default="BIC")
    sp.add_argument("--grid", help="node sizes a:b:step (default 1..n/2, thinned)")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--split-ratio", type=float, default=2.0,
                    help="nodes need ratio * min size rows to be split")

    sp = sub.add_parser("diagnose", help="calibration table and martingale residuals")
    common(sp)
    sp.add_argument("--model", required=True, help="model JSON written by fit or tree")
    sp.add_argument("--groups", type=int, default=10, help="calibration groups K")
    sp.add_argument("--residual-vs", help="covariate for the residual trend")
    sp.add_argument("--bandwidth", type=float, help="trend smoother bandwidth")

    sp = sub.add_parser("simulate", help="simulate censored discrete survival data")
    common(sp, data=False)
    sp.add_argument("--n", type=int, default=1000, help="number of subjects")
    sp.add_argument("--baseline", default="-2", help="alpha_1..alpha_{k-1}, or one value for all")
    sp.add_argument("--law", action="append", help="name=normal:mean,sd | uniform:lo,hi | "
                    "binary:p | categorical:p1,p2,...")
    sp.add_argument("--effect", action="append", help="name=coefficient (factors: name[level])")
    sp.add_argument("--censoring", default="none", help="none | uniform | geometric:p")
    return p


def _manifest(args, argv: list[str], info: dict, outputs: list) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    m = {
        "argv": argv,
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "versions": {"dthazard": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "pandas": pd.__version__},
        "outputs": sorted(outputs),
        "result": {k: v for k, v in info.items() if not k.startswith("_")},
    }
    for key in ("input", "model"):
        if getattr(args, key, None):
            m[f"{key}_sha256"] = _sha256(getattr(args, key))
    return m


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    out = Path(args.out)
    outputs: list[str] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        info = COMMANDS[args.command](args, out, outputs)
    except (UsageError, DataError, ValueError, KeyError, OSError) as exc:
        print(f"dthazard {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    manifest = _manifest(args, argv, info, outputs)
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return int(info.get("_exit", EXIT_OK))


if __name__ == "__main__":
    sys.exit(main())
