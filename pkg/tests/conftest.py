from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dthazard import Dataset
from dthazard.data import Covariate, factor

ROOT = Path(__file__).resolve().parents[1]
UNEMPDUR = ROOT / "data" / "UnempDur.csv"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(rng: np.random.Generator, n: int, k: int, n_cov: int = 1,
                   with_factor: bool = False) -> Dataset:
    """Small random dataset with times in 1..k and at least one time < k."""
    time = rng.integers(1, k + 1, n)
    time[0] = rng.integers(1, k)
    status = rng.integers(0, 2, n)
    covs, schema = {}, []
    for j in range(n_cov):
        covs[f"x{j + 1}"] = np.round(rng.normal(size=n), 3)
        schema.append(Covariate(f"x{j + 1}"))
    if with_factor:
        covs["g"] = rng.choice(["a", "b", "c"], n)
        schema.append(factor("g", ["a", "b", "c"]))
    return Dataset.from_arrays(time, status, covs, schema, horizon=k)


@pytest.fixture
def toy3() -> Dataset:
    return Dataset.from_arrays([2, 1, 3], [1, 0, 1], {"x": [1.0, 0.0, -1.0]}, horizon=3)


@pytest.fixture
def toy3_csv(tmp_path) -> Path:
    p = tmp_path / "toy3.csv"
    p.write_text("time,status,x\n2,1,1.0\n1,0,0.0\n3,1,-1.0\n")
    return p


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def sim_dataset(seed: int, n: int, k: int, n_cov: int = 1, with_factor: bool = False) -> Dataset:
    """Recoded dataset from a logit hazard law with uniform censoring."""
    from dthazard import recode_last_period
    from dthazard.synth import CovariateLaw, GeneratorSpec, simulate

    rng = np.random.default_rng(seed)
    laws = {f"x{j + 1}": CovariateLaw("normal") for j in range(n_cov)}
    effects = {name: float(rng.uniform(-1, 1)) for name in laws}
    if with_factor:
        laws["g"] = CovariateLaw("categorical", (0.4, 0.3, 0.3), ("a", "b", "c"))
        effects["g[b]"], effects["g[c]"] = 0.5, -0.5
    spec = GeneratorSpec(n, k, rng.uniform(-1.5, -0.5, k - 1), effects, laws, "uniform",
                         seed=seed)
    return recode_last_period(simulate(spec))
