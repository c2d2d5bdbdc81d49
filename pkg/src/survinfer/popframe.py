"""Finite populations: unit records, schemas, file ingestion, synthetic generation.

A population is an immutable, ordered collection of units sharing one feature
schema. Categorical features are dictionary-coded integers with the label
table kept on the schema; missing target values are plain ``None`` on the
unit, never sentinel numbers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import derive_rng

_MISSING_TOKENS = {"", "na", "nan", "none", "null"}

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


class SchemaError(ValueError):
    """Input data does not match the declared schema."""


@dataclass(frozen=True)
class FeatureSchema:
    """Names and kinds of the unit feature vector.

    ``kinds[i]`` is ``"continuous"`` or ``"categorical"``. Categorical
    features are stored as integer codes; ``categories[name]`` maps code ->
    label (position in the tuple is the code).
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    categories: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.names) != len(self.kinds):
            raise SchemaError("feature names and kinds must have equal length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("duplicate feature names")
        for kind in self.kinds:
            if kind not in (CONTINUOUS, CATEGORICAL):
                raise SchemaError(f"unknown feature kind {kind!r}")
        for name in self.categories:
            if name not in self.names:
                raise SchemaError(f"category table for unknown feature {name!r}")

    @property
    def arity(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None

    def decode(self, name: str, code: float) -> str:
        labels = self.categories[name]
        return labels[int(code)]


@dataclass(frozen=True)
class Unit:
    """One population unit: id, features, optional target and admin value."""

    id: str
    x: tuple[float, ...]
    y: Optional[float] = None
    domain_labels: dict[str, str] = field(default_factory=dict)
    admin_value: Optional[float] = None


class FinitePopulation:
    """Ordered, immutable collection of units with a shared feature schema."""

    def __init__(self, units: Sequence[Unit], feature_schema: FeatureSchema):
        units = tuple(units)
        if not units:
            raise SchemaError("population must contain at least one unit")
        seen: set[str] = set()
        for u in units:
            if u.id in seen:
                raise SchemaError(f"duplicate unit id {u.id!r}")
            seen.add(u.id)
            if len(u.x) != feature_schema.arity:
                raise SchemaError(
                    f"unit {u.id!r} has {len(u.x)} features, schema declares {feature_schema.arity}"
                )
        scheme_keys = frozenset(units[0].domain_labels)
        for u in units:
            if frozenset(u.domain_labels) != scheme_keys:
                raise SchemaError(
                    f"unit {u.id!r} domain schemes {sorted(u.domain_labels)} differ from "
                    f"{sorted(scheme_keys)}"
                )
        self._units = units
        self._schema = feature_schema
        self._index = {u.id: i for i, u in enumerate(units)}
        self._X = np.array([u.x for u in units], dtype=float)
        self._y = np.array([math.nan if u.y is None else u.y for u in units], dtype=float)
        self._y_mask = np.array([u.y is not None for u in units], dtype=bool)

    @property
    def units(self) -> tuple[Unit, ...]:
        return self._units

    @property
    def N(self) -> int:
        return len(self._units)

    @property
    def feature_schema(self) -> FeatureSchema:
        return self._schema

    @property
    def feature_matrix(self) -> np.ndarray:
        """(N, arity) float matrix; categorical columns hold integer codes."""
        return self._X

    @property
    def y_values(self) -> np.ndarray:
        """(N,) target vector with NaN where the unit has no observed y."""
        return self._y

    @property
    def y_observed(self) -> np.ndarray:
        return self._y_mask

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(u.id for u in self._units)

    def position(self, unit_id: str) -> int:
        return self._index[unit_id]

    def feature_column(self, name: str) -> np.ndarray:
        return self._X[:, self._schema.index_of(name)]

    def domain_values(self, scheme: str) -> np.ndarray:
        if scheme not in self._units[0].domain_labels:
            raise SchemaError(f"unknown domain scheme {scheme!r}")
        return np.array([u.domain_labels[scheme] for u in self._units])

    def total_y(self) -> float:
        if not self._y_mask.all():
            missing = [u.id for u in self._units if u.y is None]
            raise SchemaError(f"population total undefined, y missing for {missing[:5]}")
        return float(self._y.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FinitePopulation):
            return NotImplemented
        return self._schema == other._schema and self._units == other._units

    def __repr__(self) -> str:
        return f"FinitePopulation(N={self.N}, features={list(self._schema.names)})"


@dataclass(frozen=True)
class SimulationConfig:
    """Configuration of the linear synthetic population and the MSE study."""

    N: int = 1000
    n: int = 100
    beta1: float = 1.0
    beta2: float = 1.0
    T: int = 1000
    replicates: int = 250
    n2_grid: tuple[int, ...] = (2, 20, 30)
    seed: int = 0
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.N <= 0 or self.n <= 0 or self.n > self.N:
            raise SchemaError(f"need 0 < n <= N, got n={self.n}, N={self.N}")
        if self.T < 1 or self.replicates < 1:
            raise SchemaError("T and replicates must be positive")
        for n2 in self.n2_grid:
            if not 1 <= n2 < self.n:
                raise SchemaError(f"every n2 must satisfy 1 <= n2 < n, got {n2}")
        if self.noise_scale < 0:
            raise SchemaError("noise_scale must be nonnegative")


def generate_linear_population(
    cfg: SimulationConfig, rng_seed: Optional[int] = None
) -> FinitePopulation:
    """Synthetic population y = b1*x1 + b2*x2 + eps.

    x1 is lognormal with log-mean 1 and log-sd 1, x2 is Poisson(5), and eps is
    centred normal with variance sigma^2/4 where sigma^2 is the realized
    population variance (divisor N) of x1, scaled by ``cfg.noise_scale``.
    Bit-identical for equal seeds.
    """
    rng = derive_rng(cfg.seed if rng_seed is None else rng_seed, 0)
    x1 = rng.lognormal(mean=1.0, sigma=1.0, size=cfg.N)
    x2 = rng.poisson(lam=5.0, size=cfg.N).astype(float)
    sigma2 = float(x1.var())  # population variance, divisor N
    eps = rng.normal(0.0, cfg.noise_scale * math.sqrt(sigma2) / 2.0, size=cfg.N)
    y = cfg.beta1 * x1 + cfg.beta2 * x2 + eps
    schema = FeatureSchema(names=("x1", "x2"), kinds=(CONTINUOUS, CONTINUOUS))
    units = [
        Unit(id=f"u{i:06d}", x=(float(x1[i]), float(x2[i])), y=float(y[i]))
        for i in range(cfg.N)
    ]
    return FinitePopulation(units, schema)


@dataclass(frozen=True)
class PopulationSchema:
    """Column mapping for population files."""

    features: FeatureSchema
    id_column: str = "id"
    y_column: Optional[str] = "y"
    admin_column: Optional[str] = None
    domain_columns: tuple[str, ...] = ()


def _parse_float(token: str, column: str, row_index: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise SchemaError(
            f"row {row_index}: non-numeric value {token!r} in numeric column {column!r}"
        ) from None


def _parse_optional(token: Optional[str], column: str, row_index: int) -> Optional[float]:
    if token is None or token.strip().lower() in _MISSING_TOKENS:
        return None
    return _parse_float(token, column, row_index)


def _rows_from_file(path: Path) -> list[dict]:
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise SchemaError("JSON population file must be an array of objects")
        return [
            {k: ("" if v is None else str(v)) for k, v in row.items()} for row in data
        ]
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def ingest_population(path: str | Path, schema: PopulationSchema) -> FinitePopulation:
    """Read a CSV or JSON population file against ``schema``.

    Malformed rows are rejected with their (1-based, header-excluded) row
    index; duplicate ids and unknown categorical labels are schema errors.
    Missing y values are allowed and become ``None``.
    """
    path = Path(path)
    rows = _rows_from_file(path)
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    feats = schema.features
    required = {schema.id_column, *feats.names, *schema.domain_columns}
    present = set(rows[0].keys())
    missing_cols = required - present
    if missing_cols:
        raise SchemaError(f"{path}: missing columns {sorted(missing_cols)}")

    # Label tables for categorical features: use declared ones, otherwise
    # build them from the data in sorted order so re-ingestion is stable.
    categories = dict(feats.categories)
    for name, kind in zip(feats.names, feats.kinds):
        if kind == CATEGORICAL and name not in categories:
            labels = sorted({row[name].strip() for row in rows})
            categories[name] = tuple(labels)
    feats = FeatureSchema(feats.names, feats.kinds, categories)
    code_maps = {
        name: {label: float(code) for code, label in enumerate(labels)}
        for name, labels in categories.items()
    }

    units = []
    for i, row in enumerate(rows, start=1):
        uid = row.get(schema.id_column, "").strip()
        if not uid:
            raise SchemaError(f"row {i}: empty id")
        x = []
        for name, kind in zip(feats.names, feats.kinds):
            token = row[name].strip()
            if kind == CATEGORICAL:
                try:
                    x.append(code_maps[name][token])
                except KeyError:
                    raise SchemaError(
                        f"row {i}: unknown label {token!r} for categorical feature {name!r}"
                    ) from None
            else:
                x.append(_parse_float(token, name, i))
        y = None
        if schema.y_column is not None and schema.y_column in row:
            y = _parse_optional(row[schema.y_column], schema.y_column, i)
        admin = None
        if schema.admin_column is not None and schema.admin_column in row:
            admin = _parse_optional(row[schema.admin_column], schema.admin_column, i)
        domains = {d: row[d].strip() for d in schema.domain_columns}
        units.append(Unit(id=uid, x=tuple(x), y=y, domain_labels=domains, admin_value=admin))

    return FinitePopulation(units, feats)


def export_population(
    pop: FinitePopulation, path: str | Path, schema: Optional[PopulationSchema] = None
) -> None:
    """Write ``pop`` to CSV or JSON (by extension); inverse of ingestion."""
    path = Path(path)
    if schema is None:
        schema = PopulationSchema(features=pop.feature_schema,
                                  domain_columns=tuple(sorted(pop.units[0].domain_labels)))
    feats = pop.feature_schema

    def row_of(u: Unit) -> dict:
        row: dict[str, object] = {schema.id_column: u.id}
        for j, (name, kind) in enumerate(zip(feats.names, feats.kinds)):
            row[name] = feats.decode(name, u.x[j]) if kind == CATEGORICAL else repr(u.x[j])
        if schema.y_column is not None:
            row[schema.y_column] = "" if u.y is None else repr(u.y)
        if schema.admin_column is not None:
            row[schema.admin_column] = "" if u.admin_value is None else repr(u.admin_value)
        for d in schema.domain_columns:
            row[d] = u.domain_labels[d]
        return row

    rows = [row_of(u) for u in pop.units]
    if path.suffix.lower() == ".json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=1)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
