import numpy as np
import pytest

from postcal.frame import (
    CalibrationSpec,
    DomainSpec,
    SampleSet,
    StratumSpec,
    UnitRecord,
)


def make_random_sample(
    n: int,
    n_variables: int,
    n_domains: int,
    seed: int,
    n_strata: int = 2,
    binary_first: bool = True,
):
    """Random but reproducible sample with full-rank calibration support."""
    rng = np.random.default_rng(seed)
    domains = tuple(DomainSpec(f"d{j + 1}", j + 1) for j in range(n_domains))
    strata = tuple(
        StratumSpec(f"s{h + 1}", population_size=10 * n) for h in range(n_strata)
    )
    spec = CalibrationSpec(
        variable_names=tuple(f"v{k + 1}" for k in range(n_variables)),
        domain_order=tuple(d.id for d in domains),
    )
    records = []
    for i in range(n):
        values = []
        for k in range(n_variables):
            if binary_first and k == 0:
                values.append(float(rng.random() < 0.6))
            else:
                values.append(float(rng.uniform(0.5, 40.0)))
        records.append(
            UnitRecord(
                stratum=strata[i % n_strata].id,
                domain=domains[i % n_domains].id,
                design_weight=float(rng.uniform(1.0, 5.0)),
                calib_values=tuple(values),
                attributes={"group": "a" if rng.random() < 0.5 else "b"},
                outcomes={"u": float(rng.normal(10.0, 3.0))},
            )
        )
    return SampleSet(records, strata, domains), spec


@pytest.fixture
def small_sample():
    """30 records, 2 variables (binary + continuous), 2 domains, 2 strata."""
    return make_random_sample(30, 2, 2, seed=42)
