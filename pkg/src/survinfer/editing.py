"""Selective editing scores and evaluation curves.

Local scores are design-weighted conditional expectations of measurement
error: an error-probability model for categorical variables, and a two-part
probability-times-magnitude decomposition for semicontinuous ones. Units are
revised in descending global-score order; the curves quantify how fast that
ordering finds errors (detection rate) and removes estimate distortion
(pseudo-bias).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .predictors import TrainSpec, fit_arrays

RawValue = Union[float, str, None]


class ScoringError(ValueError):
    """Scoring preconditions not met."""


@dataclass(frozen=True)
class EditingRecord:
    """One unit-variable observation in an editing batch.

    ``y_valid`` is present on historic (training) records only; records with
    it set act as training data for the error models.
    """

    id: str
    d: float                      # design weight
    y_raw: RawValue
    z: tuple[float, ...]          # auxiliary features
    y_valid: RawValue = None

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ScoringError(f"record {self.id!r}: design weight must be >= 1, got {self.d}")


@dataclass(frozen=True)
class ScoreTable:
    """Per-unit global scores with priority ranks and revision flags."""

    ids: tuple[str, ...]
    scores: np.ndarray
    local: dict[str, np.ndarray]
    ranks: np.ndarray             # 1 = highest priority; a permutation of 1..n
    threshold: float
    flags: np.ndarray             # score >= threshold

    @property
    def priority_order(self) -> np.ndarray:
        """Record indices in revision order (best first)."""
        return np.argsort(self.ranks, kind="stable")


def make_score_table(
    ids: Sequence[str],
    local: dict[str, np.ndarray],
    combine: str = "max",
    threshold: Optional[float] = None,
    target_fraction: Optional[float] = None,
) -> ScoreTable:
    """Combine per-variable local scores into a global score table.

    The default combination is the max over variables (conservative); "sum"
    is available. The threshold is either supplied or derived from a target
    revision fraction; flagged units are those at or above it.
    """
    ids = tuple(ids)
    n = len(ids)
    arrays = {k: np.asarray(v, dtype=float) for k, v in local.items()}
    for k, v in arrays.items():
        if v.shape != (n,):
            raise ScoringError(f"local scores {k!r} have shape {v.shape}, expected ({n},)")
        if (v < 0).any():
            raise ScoringError(f"local scores {k!r} contain negative values")
    stacked = np.vstack(list(arrays.values()))
    if combine == "max":
        scores = stacked.max(axis=0)
    elif combine == "sum":
        scores = stacked.sum(axis=0)
    else:
        raise ScoringError(f"unknown combination {combine!r}")

    order = np.argsort(-scores, kind="stable")  # ties keep input order
    ranks = np.empty(n, dtype=int)
    ranks[order] = np.arange(1, n + 1)
    if threshold is None:
        if target_fraction is None:
            threshold = float("inf")  # nothing flagged unless asked
        else:
            if not 0 < target_fraction <= 1:
                raise ScoringError("target_fraction must lie in (0, 1]")
            k = max(1, int(np.ceil(target_fraction * n)))
            threshold = float(scores[order[k - 1]])
    flags = scores >= threshold
    return ScoreTable(ids=ids, scores=scores, local=arrays, ranks=ranks,
                      threshold=float(threshold), flags=flags)


# -- helpers -------------------------------------------------------------------


def _feature_matrix(records: Sequence[EditingRecord]) -> np.ndarray:
    arity = len(records[0].z)
    for r in records:
        if len(r.z) != arity:
            raise ScoringError(f"record {r.id!r} has {len(r.z)} features, expected {arity}")
    return np.array([r.z for r in records], dtype=float)


def _training_mask(records: Sequence[EditingRecord]) -> np.ndarray:
    return np.array([r.y_valid is not None for r in records], dtype=bool)


def _as_float(value: RawValue, rec_id: str, what: str) -> float:
    if value is None or isinstance(value, str):
        raise ScoringError(f"record {rec_id!r}: {what} must be numeric, got {value!r}")
    return float(value)


# -- scoring operations --------------------------------------------------------


def categorical_score(
    records: Sequence[EditingRecord],
    spec: TrainSpec,
    rng_seed: int = 0,
    variable: str = "value",
    threshold: Optional[float] = None,
    target_fraction: Optional[float] = None,
) -> ScoreTable:
    """Error-probability scores for a categorical variable.

    Records carrying a validated value train a probability model of the error
    indicator raw != validated on the auxiliary features; every record is
    then scored d_k times its predicted error probability.
    """
    if not records:
        raise ScoringError("no records to score")
    Z = _feature_matrix(records)
    train = _training_mask(records)
    if not train.any():
        raise ScoringError("no historic records with validated values")
    for r, t in zip(records, train):
        if t and r.y_raw is None:
            raise ScoringError(f"training record {r.id!r} lacks a raw value")
    indicator = np.array(
        [1.0 if r.y_raw != r.y_valid else 0.0 for r, t in zip(records, train) if t]
    )
    if indicator.sum() == 0:
        raise ScoringError(
            "no measurement errors in the historic data; the error-probability "
            "model is degenerate (all indicators zero)"
        )
    if spec.task != "probability":
        raise ScoringError("categorical scoring needs a probability-mode spec")
    if indicator.sum() == len(indicator):
        proba = np.ones(len(records))
    else:
        model = fit_arrays(spec, Z[train], indicator, rng_seed=rng_seed)
        proba = np.asarray(model.error_probability(Z))
    d = np.array([r.d for r in records])
    return make_score_table(
        [r.id for r in records], {variable: d * proba},
        threshold=threshold, target_fraction=target_fraction,
    )


def continuous_score(
    records: Sequence[EditingRecord],
    p_spec: TrainSpec,
    m_spec: TrainSpec,
    miss_spec: Optional[TrainSpec] = None,
    rng_seed: int = 0,
    variable: str = "value",
    threshold: Optional[float] = None,
    target_fraction: Optional[float] = None,
) -> ScoreTable:
    """Two-part scores for a semicontinuous variable.

    Observed raw values get d_k * P(error) * E[|error| given error]; records
    with a missing raw value get d_k times a dedicated magnitude model (a
    missing value contributes nothing to a total until revised, so its error
    magnitude is the absolute validated value).
    """
    if not records:
        raise ScoringError("no records to score")
    Z = _feature_matrix(records)
    train = _training_mask(records)
    if not train.any():
        raise ScoringError("no historic records with validated values")
    raw_missing = np.array([r.y_raw is None for r in records], dtype=bool)
    d = np.array([r.d for r in records])

    obs_train = train & ~raw_missing
    eps = np.array([
        _as_float(r.y_raw, r.id, "raw value") - _as_float(r.y_valid, r.id, "validated value")
        for r, t in zip(records, obs_train) if t
    ])
    delta = (eps != 0).astype(float)

    scores = np.zeros(len(records))
    observed = ~raw_missing
    if observed.any() and obs_train.any():
        if delta.sum() == 0:
            p_hat = np.zeros(int(observed.sum()))   # no historic errors: scores stay 0
            m_hat = np.zeros(int(observed.sum()))
        else:
            if p_spec.task != "probability":
                raise ScoringError("p-model needs a probability-mode spec")
            if delta.sum() == len(delta):
                p_hat = np.ones(int(observed.sum()))
            else:
                p_model = fit_arrays(p_spec, Z[obs_train], delta, rng_seed=rng_seed)
                p_hat = np.asarray(p_model.error_probability(Z[observed]))
            err_mask = np.zeros(len(records), dtype=bool)
            err_mask[obs_train] = delta == 1
            m_model = fit_arrays(m_spec, Z[err_mask], np.abs(eps[delta == 1]),
                                 rng_seed=rng_seed)
            m_hat = np.maximum(np.asarray(m_model.predict(Z[observed])), 0.0)
        scores[observed] = d[observed] * p_hat * m_hat

    if raw_missing.any():
        miss_train = train & raw_missing
        if not miss_train.any():
            raise ScoringError(
                "records with missing raw values present but no historic "
                "missing-raw records to train their magnitude model"
            )
        if miss_spec is None:
            raise ScoringError("missing raw values present but no miss_spec given")
        target = np.array([
            abs(_as_float(r.y_valid, r.id, "validated value"))
            for r, t in zip(records, miss_train) if t
        ])
        miss_model = fit_arrays(miss_spec, Z[miss_train], target, rng_seed=rng_seed)
        preds = np.maximum(np.asarray(miss_model.predict(Z[raw_missing])), 0.0)
        scores[raw_missing] = d[raw_missing] * preds

    return make_score_table(
        [r.id for r in records], {variable: scores},
        threshold=threshold, target_fraction=target_fraction,
    )


# -- evaluation curves ----------------------------------------------------------


def pseudo_bias_curve(
    records: Sequence[EditingRecord],
    priority: Sequence[str],
    estimator_weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Relative pseudo-bias |Y_hat(n_ed) - Y_valid| / Y_valid vs units revised.

    Retrospective: every record needs a validated value. The estimate mixes
    validated values for revised units with raw values (0 when missing) for
    the rest, revising in the given priority order. Entry i of the returned
    array is the pseudo-bias after revising i units; the last entry is 0.
    """
    if not records:
        raise ScoringError("no records")
    by_id = {r.id: r for r in records}
    if set(priority) != set(by_id) or len(priority) != len(records):
        raise ScoringError("priority must be a permutation of the record ids")
    w = (np.array([r.d for r in records]) if estimator_weights is None
         else np.asarray(estimator_weights, dtype=float))
    valid = np.array([_as_float(r.y_valid, r.id, "validated value") for r in records])
    raw = np.array([
        0.0 if r.y_raw is None else _as_float(r.y_raw, r.id, "raw value")
        for r in records
    ])
    y_val = float((w * valid).sum())
    if y_val == 0:
        raise ScoringError("validated estimate is zero; relative pseudo-bias undefined")

    index = {r.id: i for i, r in enumerate(records)}
    order = np.array([index[pid] for pid in priority])
    estimate = float((w * raw).sum())
    curve = np.empty(len(records) + 1)
    curve[0] = abs(estimate - y_val) / abs(y_val)
    for step, i in enumerate(order, start=1):
        estimate += w[i] * (valid[i] - raw[i])
        curve[step] = abs(estimate - y_val) / abs(y_val)
    return curve


def detection_rate_curve(
    table: ScoreTable, truth: Union[dict[str, bool], np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Step curve: fraction of errors found vs fraction of units revised.

    Revision follows the table's priority order. Returns (x, y) arrays of
    length n+1 running from (0, 0) to (1, 1).
    """
    n = len(table.ids)
    if isinstance(truth, dict):
        flags = np.array([bool(truth[i]) for i in table.ids])
    else:
        flags = np.asarray(truth, dtype=bool)
        if flags.shape != (n,):
            raise ScoringError("truth flags must align with the score table")
    total = flags.sum()
    if total == 0:
        raise ScoringError("no true errors; detection curve undefined")
    found = np.concatenate([[0], np.cumsum(flags[table.priority_order])])
    x = np.arange(n + 1) / n
    y = found / total
    return x, y


def area_under_priority(curve: tuple[np.ndarray, np.ndarray]) -> float:
    """Trapezoidal area under a detection curve; 1.0 is a perfect ordering
    of a single error, 0.5 is the uninformative diagonal."""
    x, y = curve
    return float(np.trapezoid(y, x))
