import numpy as np
import pytest

from survinfer.popframe import CONTINUOUS, FeatureSchema, FinitePopulation, Unit


def build_population(x1, x2=None, y=None, domains=None):
    """Hand-built population; x values given explicitly for exact oracles."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.zeros_like(x1) if x2 is None else np.asarray(x2, dtype=float)
    units = []
    for i in range(len(x1)):
        dom = {} if domains is None else {"stratum": domains[i]}
        units.append(Unit(
            id=f"u{i}",
            x=(float(x1[i]), float(x2[i])),
            y=None if y is None else float(y[i]),
            domain_labels=dom,
        ))
    schema = FeatureSchema(names=("x1", "x2"), kinds=(CONTINUOUS, CONTINUOUS))
    return FinitePopulation(units, schema)


@pytest.fixture
def linear_pop6():
    """N=6 population with y = x1 + x2, distinct x1 (keeps OLS full rank)."""
    rng = np.random.default_rng(202)
    x1 = rng.lognormal(1.0, 1.0, 6)
    x2 = rng.poisson(5, 6).astype(float)
    y = x1 + x2 + rng.normal(0, 1.0, 6)
    return build_population(x1, x2, y)
