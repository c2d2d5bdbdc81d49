"""Pluggable prediction algorithms trained on samples.

Three families — OLS, k-nearest-neighbours, bagged trees — behind one spec
type and one fitted-predictor type. Regression predictors return reals;
probability predictors return class-probability vectors that sum to one.
Fitted predictors are immutable, deterministic given (spec, data, seed), and
serializable to a versioned JSON container.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .forest import CLASSIFICATION, REGRESSION, BaggedTrees
from .popframe import FinitePopulation
from .designs import Sample

OLS = "ols"
KNN = "knn"
BAGGED_TREES = "bagged_trees"

_KINDS = (OLS, KNN, BAGGED_TREES)
_LOSSES = ("squared", "absolute")
_TASKS = ("regression", "probability")

_FORMAT = "survinfer-predictor"
_VERSION = 1


class FitError(RuntimeError):
    """Model training failed."""


class RankDeficiencyError(FitError):
    """OLS design matrix is rank deficient."""


@dataclass(frozen=True)
class TrainSpec:
    """What to fit: model kind, target/feature selectors, loss, weighting.

    ``target`` is ``"y"``, ``"admin"``, or a feature column name; ``features``
    of None selects every schema feature. ``weight`` of ``"design"`` uses the
    sampling weights of the training sample. ``loss`` is the model-selection
    metric (fitting itself is least-squares / impurity based).
    """

    kind: str = OLS
    target: str = "y"
    features: Optional[tuple[str, ...]] = None
    loss: str = "squared"
    weight: Optional[str] = None
    task: str = "regression"
    k: int = 5
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 1

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise FitError(f"unknown predictor kind {self.kind!r}")
        if self.loss not in _LOSSES:
            raise FitError(f"unknown loss {self.loss!r}")
        if self.task not in _TASKS:
            raise FitError(f"unknown task {self.task!r}")
        if self.weight not in (None, "design"):
            raise FitError(f"unknown weight selector {self.weight!r}")
        if self.kind == OLS and self.task == "probability":
            raise FitError("OLS has no probability mode; use knn or bagged_trees")
        if self.k < 1 or self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise FitError("invalid hyperparameters")
        if self.features is not None:
            object.__setattr__(self, "features", tuple(self.features))

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind, "target": self.target, "loss": self.loss,
            "task": self.task, "weight": self.weight,
            "features": None if self.features is None else list(self.features),
        }
        if self.kind == KNN:
            d["k"] = self.k
        if self.kind == BAGGED_TREES:
            d.update(n_trees=self.n_trees, max_depth=self.max_depth, min_leaf=self.min_leaf)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        if "features" in d and d["features"] is not None:
            d["features"] = tuple(d["features"])
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise FitError(f"unknown TrainSpec keys {sorted(unknown)}")
        return cls(**d)


# -- model backends ----------------------------------------------------------


@dataclass(frozen=True)
class OLSModel:
    coef: np.ndarray  # intercept first

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, w: Optional[np.ndarray]) -> "OLSModel":
        Xa = np.column_stack([np.ones(len(X)), X])
        if w is not None:
            sw = np.sqrt(w)
            Xa = Xa * sw[:, None]
            y = y * sw
        coef, _, rank, _ = np.linalg.lstsq(Xa, y, rcond=None)
        if rank < Xa.shape[1]:
            raise RankDeficiencyError(
                f"design matrix rank {rank} < {Xa.shape[1]} columns (collinear features?)"
            )
        return cls(coef=coef)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.coef[0] + X @ self.coef[1:]

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "OLSModel":
        return cls(coef=np.asarray(d["coef"], dtype=float))


@dataclass(frozen=True)
class KNNModel:
    X: np.ndarray
    y: np.ndarray             # targets, or class indices in probability mode
    w: Optional[np.ndarray]
    k: int
    task: str
    n_classes: int = 0

    @classmethod
    def fit(cls, X, y, w, k, task, n_classes=0) -> "KNNModel":
        if k > len(y):
            raise FitError(f"k={k} exceeds training size {len(y)}")
        return cls(X=X.copy(), y=y.copy(), w=None if w is None else w.copy(),
                   k=k, task=task, n_classes=n_classes)

    def _neighbours(self, Q: np.ndarray) -> np.ndarray:
        d2 = ((self.X[None, :, :] - Q[:, None, :]) ** 2).sum(axis=2)
        # stable sort: ties resolved by training order
        return np.argsort(d2, axis=1, kind="stable")[:, : self.k]

    def predict(self, Q: np.ndarray) -> np.ndarray:
        nn = self._neighbours(Q)
        if self.w is None:
            return self.y[nn].mean(axis=1)
        wn = self.w[nn]
        return (wn * self.y[nn]).sum(axis=1) / wn.sum(axis=1)

    def predict_proba(self, Q: np.ndarray) -> np.ndarray:
        nn = self._neighbours(Q)
        w = np.ones_like(nn, dtype=float) if self.w is None else self.w[nn]
        out = np.zeros((len(Q), self.n_classes))
        cls_idx = self.y[nn].astype(np.intp)
        for i in range(len(Q)):
            np.add.at(out[i], cls_idx[i], w[i])
        return out / out.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"X": self.X.tolist(), "y": self.y.tolist(),
                "w": None if self.w is None else self.w.tolist(),
                "k": self.k, "task": self.task, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "KNNModel":
        return cls(X=np.asarray(d["X"], dtype=float), y=np.asarray(d["y"], dtype=float),
                   w=None if d["w"] is None else np.asarray(d["w"], dtype=float),
                   k=d["k"], task=d["task"], n_classes=d["n_classes"])


@dataclass(frozen=True)
class Predictor:
    """A fitted model plus the schema slice it expects."""

    spec: TrainSpec
    model: Union[OLSModel, KNNModel, BaggedTrees]
    feature_names: tuple[str, ...]
    classes: Optional[tuple[float, ...]] = None  # probability mode label set

    def _as_matrix(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.shape[1] != len(self.feature_names):
            raise FitError(
                f"expected {len(self.feature_names)} features {list(self.feature_names)}, "
                f"got {arr.shape[1]}"
            )
        return arr

    def predict(self, x) -> np.ndarray | float:
        arr = self._as_matrix(x)
        out = self.model.predict(arr)
        if not np.isfinite(out).all():
            raise FitError("non-finite prediction")
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def predict_proba(self, x) -> np.ndarray:
        if self.spec.task != "probability":
            raise FitError("predictor was fitted in regression mode")
        arr = self._as_matrix(x)
        out = self.model.predict_proba(arr)
        return out[0] if np.asarray(x).ndim == 1 else out

    def error_probability(self, x) -> np.ndarray | float:
        """P(class == classes[1]) for binary probability predictors."""
        proba = self.predict_proba(np.atleast_2d(np.asarray(x, dtype=float)))
        if len(self.classes or ()) != 2:
            raise FitError("error_probability needs a binary target")
        out = proba[:, 1]
        return float(out[0]) if np.asarray(x).ndim == 1 else out


def fit_arrays(
    spec: TrainSpec,
    X: np.ndarray,
    y: np.ndarray,
    w: Optional[np.ndarray] = None,
    rng_seed: int = 0,
    feature_names: Optional[Sequence[str]] = None,
) -> Predictor:
    """Fit ``spec`` on explicit arrays. Rows are training units."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise FitError("X must be (n, p) with one row per target value")
    if len(y) == 0:
        raise FitError("empty training sample")
    if np.isnan(y).any():
        raise FitError("training units without observed target")
    if feature_names is None:
        feature_names = tuple(f"f{j}" for j in range(X.shape[1]))
    feature_names = tuple(feature_names)

    classes: Optional[tuple[float, ...]] = None
    if spec.task == "probability":
        labels = np.unique(y)
        classes = tuple(float(c) for c in labels)
        y = np.searchsorted(labels, y).astype(float)

    weights = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    if spec.kind == OLS:
        model: Union[OLSModel, KNNModel, BaggedTrees] = OLSModel.fit(X, y, w)
    elif spec.kind == KNN:
        model = KNNModel.fit(X, y, w, spec.k,
                             task=spec.task, n_classes=0 if classes is None else len(classes))
    else:
        task = CLASSIFICATION if spec.task == "probability" else REGRESSION
        ens = BaggedTrees(task, n_classes=0 if classes is None else len(classes))
        ens.fit(X, y, weights, n_trees=spec.n_trees, max_depth=spec.max_depth,
                min_leaf=spec.min_leaf, seed=rng_seed)
        model = ens
    return Predictor(spec=spec, model=model, feature_names=feature_names, classes=classes)


def _feature_indices(spec: TrainSpec, population: FinitePopulation) -> tuple[np.ndarray, tuple[str, ...]]:
    schema = population.feature_schema
    names = schema.names if spec.features is None else spec.features
    idx = np.array([schema.index_of(name) for name in names], dtype=np.intp)
    return idx, tuple(names)


def _target_values(spec: TrainSpec, population: FinitePopulation) -> np.ndarray:
    if spec.target == "y":
        return population.y_values
    if spec.target == "admin":
        vals = np.array(
            [np.nan if u.admin_value is None else u.admin_value for u in population.units]
        )
        return vals
    return population.feature_column(spec.target)


def fit(spec: TrainSpec, sample: Sample, population: FinitePopulation,
        rng_seed: int = 0) -> Predictor:
    """Train on the sampled units of ``population`` per ``spec``."""
    if sample.design.population is not population:
        raise FitError("sample was drawn from a different population")
    idx, names = _feature_indices(spec, population)
    X = population.feature_matrix[np.ix_(sample.positions, idx)]
    y = _target_values(spec, population)[sample.positions]
    if np.isnan(y).any():
        raise FitError("training units without observed target")
    w = sample.weights if spec.weight == "design" else None
    return fit_arrays(spec, X, y, w, rng_seed=rng_seed, feature_names=names)


def predict(predictor: Predictor, x) -> np.ndarray | float:
    return predictor.predict(x)


def predict_proba(predictor: Predictor, x) -> np.ndarray:
    return predictor.predict_proba(x)


# -- serialization -----------------------------------------------------------


def predictor_to_json(predictor: Predictor) -> str:
    payload = {
        "format": _FORMAT,
        "version": _VERSION,
        "spec": predictor.spec.to_dict(),
        "feature_names": list(predictor.feature_names),
        "classes": None if predictor.classes is None else list(predictor.classes),
        "state": predictor.model.to_dict(),
    }
    return json.dumps(payload)


def predictor_from_json(text: str) -> Predictor:
    payload = json.loads(text)
    if payload.get("format") != _FORMAT:
        raise FitError("not a predictor container")
    if payload.get("version") != _VERSION:
        raise FitError(f"unsupported predictor container version {payload.get('version')}")
    spec = TrainSpec.from_dict(payload["spec"])
    state = payload["state"]
    if spec.kind == OLS:
        model: Union[OLSModel, KNNModel, BaggedTrees] = OLSModel.from_dict(state)
    elif spec.kind == KNN:
        model = KNNModel.from_dict(state)
    else:
        model = BaggedTrees.from_dict(state)
    classes = payload["classes"]
    return Predictor(
        spec=spec, model=model,
        feature_names=tuple(payload["feature_names"]),
        classes=None if classes is None else tuple(classes),
    )


def save_predictor(predictor: Predictor, path: str | Path) -> None:
    Path(path).write_text(predictor_to_json(predictor), encoding="utf-8")


def load_predictor(path: str | Path) -> Predictor:
    return predictor_from_json(Path(path).read_text(encoding="utf-8"))
