"""Time disaggregation of a quarterly rotating-panel design to weeks.

The quarterly sample partitions into 13 weekly samples by an operational
assignment procedure. A deliberately overfitted bagged-trees classifier
measures each unit's week-assignment probabilities from past first-selection
records; multiplying by the quarterly inclusion probability gives weekly
inclusion probabilities whose sum over weeks reproduces the quarterly one
exactly. Weekly Horvitz-Thompson estimates are raked to known margins and
combined into monthly figures with a delete-one-week jackknife variance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .predictors import TrainSpec, fit_arrays
from .rng import derive_rng

N_WEEKS = 13
MONTH_WEEKS = ((1, 2, 3, 4), (5, 6, 7, 8), (9, 10, 11, 12, 13))


class DisaggError(ValueError):
    """Panel data does not support the requested operation."""


class CalibrationError(RuntimeError):
    """Raking failed to reproduce the margins."""


@dataclass(frozen=True)
class QuarterRecords:
    """One quarter's sample with week assignments and collected indicators."""

    quarter: str
    ids: tuple[str, ...]
    pi_q: np.ndarray
    week: np.ndarray
    x: np.ndarray
    x_names: tuple[str, ...]
    first_selection: np.ndarray
    responded: np.ndarray
    domain: np.ndarray
    classes: dict[str, np.ndarray] = field(default_factory=dict)
    calib: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.ids)
        if not ((self.week >= 1) & (self.week <= N_WEEKS)).all():
            raise DisaggError(f"weeks must lie in 1..{N_WEEKS}")
        if ((self.pi_q <= 0) | (self.pi_q > 1)).any():
            raise DisaggError("quarterly inclusion probabilities must lie in (0, 1]")
        for name, arr in (("pi_q", self.pi_q), ("week", self.week),
                          ("first_selection", self.first_selection),
                          ("responded", self.responded), ("domain", self.domain)):
            if len(arr) != n:
                raise DisaggError(f"{name} must have one entry per unit")
        if self.x.shape != (n, len(self.x_names)):
            raise DisaggError("covariate matrix shape mismatch")


class RotatingPanel:
    """Ordered collection of quarterly samples."""

    def __init__(self, quarters: Sequence[QuarterRecords]):
        self._quarters = {q.quarter: q for q in quarters}
        if len(self._quarters) != len(quarters):
            raise DisaggError("duplicate quarter labels")
        self._order = tuple(sorted(self._quarters))

    @property
    def quarters(self) -> tuple[str, ...]:
        return self._order

    def get(self, quarter: str) -> QuarterRecords:
        try:
            return self._quarters[quarter]
        except KeyError:
            raise DisaggError(f"quarter {quarter!r} not in panel") from None

    def training_window(self, quarter: str, window: int) -> tuple[QuarterRecords, ...]:
        """The most recent ``window`` quarters up to and including ``quarter``."""
        if quarter not in self._quarters:
            raise DisaggError(f"quarter {quarter!r} not in panel")
        upto = [q for q in self._order if q <= quarter]
        return tuple(self._quarters[q] for q in upto[-window:])


@dataclass(frozen=True)
class WeeklyDesign:
    """Measured assignment probabilities and derived weekly inclusion probs."""

    quarter: str
    ids: tuple[str, ...]
    assignment_probs: np.ndarray   # (n, 13), rows sum to 1
    pi_q: np.ndarray
    pi_w: np.ndarray               # (n, 13): assignment prob * pi_q
    uniform_fallback: np.ndarray   # unseen covariate combination
    floor_clipped: np.ndarray      # some probability hit the floor

    def pi_month(self, weeks: Sequence[int]) -> np.ndarray:
        cols = [w - 1 for w in weeks]
        return self.pi_w[:, cols].sum(axis=1)


DEFAULT_FOREST_SPEC = TrainSpec(kind="bagged_trees", task="probability",
                                n_trees=300, max_depth=12, min_leaf=1)


def measure_assignment_probs(
    panel: RotatingPanel,
    quarter: str,
    forest_spec: TrainSpec = DEFAULT_FOREST_SPEC,
    window: int = 6,
    prob_floor: float = 1e-4,
    rng_seed: int = 0,
) -> WeeklyDesign:
    """Measure P(assigned to week W | sampled) for every unit of a quarter.

    The classifier trains on first-selection records of the trailing quarters
    and is applied to the full training data deliberately without a holdout:
    the goal is to measure the realized assignment mechanism, so overfitting
    helps rather than hurts. Units whose covariate combination never occurs
    in the training data fall back to uniform 1/13, flagged. Probabilities
    are floored at ``prob_floor`` and renormalised so weekly weights stay
    bounded without breaking the sum-to-quarterly identity.
    """
    if forest_spec.task != "probability":
        raise DisaggError("assignment measurement needs a probability-mode spec")
    records = panel.get(quarter)
    train_quarters = panel.training_window(quarter, window)
    X_parts, w_parts = [], []
    for q in train_quarters:
        rows = q.first_selection
        if rows.any():
            X_parts.append(q.x[rows])
            w_parts.append(q.week[rows])
    if not X_parts:
        raise DisaggError("no first-selection records in the training window")
    X_train = np.vstack(X_parts)
    weeks_train = np.concatenate(w_parts).astype(float)

    model = fit_arrays(forest_spec, X_train, weeks_train, rng_seed=rng_seed)
    raw = np.asarray(model.predict_proba(records.x))
    probs = np.zeros((len(records.ids), N_WEEKS))
    for col, label in enumerate(model.classes or ()):
        probs[:, int(label) - 1] = raw[:, col]

    seen = {row.tobytes() for row in np.ascontiguousarray(X_train)}
    unseen = np.array([row.tobytes() not in seen
                       for row in np.ascontiguousarray(records.x)])
    probs[unseen] = 1.0 / N_WEEKS

    clipped = (probs < prob_floor).any(axis=1)
    probs = np.maximum(probs, prob_floor)
    probs = probs / probs.sum(axis=1, keepdims=True)

    pi_w = probs * records.pi_q[:, None]
    return WeeklyDesign(quarter=quarter, ids=records.ids, assignment_probs=probs,
                        pi_q=records.pi_q, pi_w=pi_w,
                        uniform_fallback=unseen, floor_clipped=clipped)


# -- calibration ----------------------------------------------------------------


def rake_weights(
    d: np.ndarray,
    categories: dict[str, np.ndarray],
    margins: dict[str, dict[str, float]],
    tol: float = 1e-8,
    max_iter: int = 500,
) -> np.ndarray:
    """Iterative proportional fitting of weights to marginal totals.

    Multiplicatively adjusts ``d`` until, for every calibration variable, the
    weighted count of each category matches its margin to ``tol`` relative.
    """
    if not margins:
        raise CalibrationError("empty margins")
    w = np.asarray(d, dtype=float).copy()
    masks: list[tuple[np.ndarray, float]] = []
    for var in sorted(margins):
        if var not in categories:
            raise CalibrationError(f"no category column for margin variable {var!r}")
        col = np.asarray(categories[var])
        cells = margins[var]
        uncovered = set(np.unique(col)) - set(cells)
        if uncovered:
            raise CalibrationError(f"categories without margins for {var!r}: {sorted(uncovered)}")
        for label in sorted(cells):
            mask = col == label
            target = float(cells[label])
            if target < 0:
                raise CalibrationError(f"negative margin for {var}={label}")
            if not mask.any():
                if target > 0:
                    raise CalibrationError(f"margin cell {var}={label} has no respondents")
                continue
            masks.append((mask, target))

    for _ in range(max_iter):
        for mask, target in masks:
            cur = w[mask].sum()
            if cur <= 0:
                raise CalibrationError("zero weighted count in a margin cell")
            w[mask] *= target / cur
        err = 0.0
        for mask, target in masks:
            if target > 0:
                err = max(err, abs(w[mask].sum() - target) / target)
        if err <= tol:
            return w
    raise CalibrationError(f"raking did not converge within {max_iter} iterations "
                           f"(residual {err:.3e} > {tol:.0e})")


# -- weekly and monthly estimation -------------------------------------------------


@dataclass(frozen=True)
class WeeklyEstimate:
    quarter: str
    week: int
    class_name: str
    domain: Optional[str]
    total: float
    n_respondents: int


def _weekly_rows(records: QuarterRecords, week: int) -> np.ndarray:
    if not 1 <= week <= N_WEEKS:
        raise DisaggError(f"week must lie in 1..{N_WEEKS}")
    return np.flatnonzero((records.week == week) & records.responded)


def _estimate_on_rows(
    records: QuarterRecords,
    rows: np.ndarray,
    d: np.ndarray,
    class_name: str,
    domain: Optional[str],
    margins: Optional[dict[str, dict[str, float]]],
    tol: float,
    max_iter: int,
) -> tuple[float, int]:
    try:
        delta = records.classes[class_name][rows].astype(float)
    except KeyError:
        raise DisaggError(f"unknown class indicator {class_name!r}") from None
    if margins is not None:
        cats = {var: np.asarray(col)[rows] for var, col in records.calib.items()}
        w = rake_weights(d, cats, margins, tol=tol, max_iter=max_iter)
    else:
        w = d
    if domain is None:
        keep = np.ones(len(rows), dtype=bool)
    else:
        keep = records.domain[rows] == domain
    return float((w[keep] * delta[keep]).sum()), int(keep.sum())


def weekly_estimate(
    records: QuarterRecords,
    design: WeeklyDesign,
    week: int,
    class_name: str,
    domain: Optional[str] = None,
    margins: Optional[dict[str, dict[str, float]]] = None,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> WeeklyEstimate:
    """Weekly class total: HT with weekly design weights, raked if margins given.

    Calibration runs over the week's full respondent set; the domain filter
    applies to the final total only.
    """
    if design.quarter != records.quarter or design.ids != records.ids:
        raise DisaggError("weekly design does not match the quarter records")
    rows = _weekly_rows(records, week)
    if domain is not None and not (records.domain[rows] == domain).any():
        raise DisaggError(f"no respondents in domain {domain!r} for week {week}")
    if len(rows) == 0:
        raise DisaggError(f"no respondents in week {week}")
    d = 1.0 / design.pi_w[rows, week - 1]
    total, n_dom = _estimate_on_rows(records, rows, d, class_name, domain,
                                     margins, tol, max_iter)
    return WeeklyEstimate(quarter=records.quarter, week=week, class_name=class_name,
                          domain=domain, total=total, n_respondents=n_dom)


def weekly_variance_bootstrap(
    records: QuarterRecords,
    design: WeeklyDesign,
    week: int,
    class_name: str,
    domain: Optional[str] = None,
    margins: Optional[dict[str, dict[str, float]]] = None,
    n_boot: int = 500,
    rng_seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> float:
    """Bootstrap-over-respondents variance of the weekly estimate."""
    rows = _weekly_rows(records, week)
    if len(rows) < 2:
        raise DisaggError("bootstrap needs at least 2 respondents in the week")
    d = 1.0 / design.pi_w[rows, week - 1]
    estimates = np.empty(n_boot)
    for b in range(n_boot):
        rng = derive_rng(rng_seed, week, b)
        take = rng.integers(0, len(rows), size=len(rows))
        estimates[b], _ = _estimate_on_rows(records, rows[take], d[take], class_name,
                                            domain, margins, tol, max_iter)
    return float(estimates.var(ddof=1))


def monthly_estimate(weekly_estimates: Sequence[float]) -> float:
    """Average of the month's weekly estimates."""
    vals = [v for v in weekly_estimates]
    if not vals or any(v is None for v in vals):
        raise DisaggError("missing weekly estimate in month")
    return float(np.mean([float(v) for v in vals]))


def monthly_estimate_pooled(
    records: QuarterRecords,
    design: WeeklyDesign,
    month_weeks: Sequence[int],
    class_name: str,
    domain: Optional[str] = None,
    margins: Optional[dict[str, dict[str, float]]] = None,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> float:
    """Pooled monthly total from monthly inclusion probabilities.

    Treats each unit's weekly collected value as valid for the whole month
    and weights by the inverse of pi_k^M = sum of its weekly inclusion
    probabilities over the month's weeks.
    """
    if design.quarter != records.quarter or design.ids != records.ids:
        raise DisaggError("weekly design does not match the quarter records")
    month_weeks = tuple(month_weeks)
    in_month = np.isin(records.week, month_weeks)
    rows = np.flatnonzero(in_month & records.responded)
    if len(rows) == 0:
        raise DisaggError("no respondents in the month")
    pi_m = design.pi_month(month_weeks)[rows]
    d = 1.0 / pi_m
    total, _ = _estimate_on_rows(records, rows, d, class_name, domain,
                                 margins, tol, max_iter)
    return total


def monthly_variance(weekly_estimates: Sequence[float],
                     weekly_variances: Sequence[float]) -> float:
    """Delete-one-week jackknife of the monthly mean plus mean weekly variance."""
    est = np.asarray(list(weekly_estimates), dtype=float)
    var = np.asarray(list(weekly_variances), dtype=float)
    m = len(est)
    if m < 2:
        raise DisaggError("jackknife needs at least 2 weeks in the month")
    if len(var) != m:
        raise DisaggError("one weekly variance per weekly estimate required")
    total = est.sum()
    theta_del = (total - est) / (m - 1)
    v_jk = (m - 1) / m * ((theta_del - theta_del.mean()) ** 2).sum()
    return float(v_jk + var.mean())


# -- CSV ingestion -----------------------------------------------------------------


def quarter_records_from_csv(path: str | Path) -> RotatingPanel:
    """Long-format rotating-panel file, one row per unit-quarter.

    Fixed columns: id, quarter, week, pi_q, first_selection, responded,
    domain. Prefixes: x_<name> covariates, y_<class> 0/1 indicators,
    c_<var> calibration categories.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        required = {"id", "quarter", "week", "pi_q", "first_selection", "responded", "domain"}
        if required - set(cols):
            raise DisaggError(f"panel needs columns {sorted(required)}")
        x_cols = [c for c in cols if c.startswith("x_")]
        y_cols = [c for c in cols if c.startswith("y_")]
        c_cols = [c for c in cols if c.startswith("c_")]
        rows = list(reader)
    if not rows:
        raise DisaggError("empty panel file")

    def truthy(tok: str) -> bool:
        return tok.strip() in ("1", "true", "True")

    quarters = []
    for label in sorted({r["quarter"] for r in rows}):
        sub = [r for r in rows if r["quarter"] == label]
        quarters.append(QuarterRecords(
            quarter=label,
            ids=tuple(r["id"] for r in sub),
            pi_q=np.array([float(r["pi_q"]) for r in sub]),
            week=np.array([int(r["week"]) for r in sub]),
            x=np.array([[float(r[c]) for c in x_cols] for r in sub]),
            x_names=tuple(c[2:] for c in x_cols),
            first_selection=np.array([truthy(r["first_selection"]) for r in sub]),
            responded=np.array([truthy(r["responded"]) for r in sub]),
            domain=np.array([r["domain"] for r in sub]),
            classes={c[2:]: np.array([truthy(r[c]) for r in sub]) for c in y_cols},
            calib={c[2:]: np.array([r[c] for r in sub]) for c in c_cols},
        ))
    return RotatingPanel(quarters)


def margins_from_csv(path: str | Path) -> dict[str, dict[str, float]]:
    """Margins file with columns var, category, total."""
    margins: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"var", "category", "total"} - set(reader.fieldnames):
            raise DisaggError("margins file needs columns var, category, total")
        for r in reader:
            margins.setdefault(r["var"], {})[r["category"]] = float(r["total"])
    if not margins:
        raise DisaggError("empty margins file")
    return margins
