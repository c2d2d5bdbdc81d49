"""Administrative data as a primary source: unit selection and diagnostics.

Units with erratic behaviour over the nine monthly history periods stay in
the survey (six selection criteria, union semantics); the rest are modelled,
their statistical values synthesised from the administrative value plus
auxiliary features. Elbow thresholds cut each criterion's sorted score curve
at the point of maximum distance to the chord, with a conservative tie-break
that keeps more units in the survey.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .predictors import TrainSpec, fit_arrays
from .quantiles import nearest_rank_quantile, weighted_nearest_rank_quantile

N_HISTORY = 9
CRITERIA = ("c1", "c2", "c3", "c4", "c5", "c6")

SURVEY = "survey"
MODEL = "model"
OUT_OF_FRAME = "out_of_frame"

DEFAULT_QUANTILE_GRID = tuple(round(p, 2) for p in
                              (0.01, *[i / 20 for i in range(1, 20)], 0.99))


class AdminDataError(ValueError):
    """Admin panel does not support the requested operation."""


class AdminPanel:
    """Per-unit, per-period administrative and survey values.

    History arrays are (n_units, n_periods), ordered oldest to newest; NaN
    marks a missing observation (not surveyed, or absent from the register).
    """

    def __init__(
        self,
        ids: Sequence[str],
        periods: Sequence[str],
        y_adm: np.ndarray,
        y_stat: np.ndarray,
        omega: np.ndarray,
        domain: Sequence[str],
        in_frame: Optional[np.ndarray] = None,
        new_unit: Optional[np.ndarray] = None,
        frame_turnover: Optional[np.ndarray] = None,
        current_period: Optional[str] = None,
        current_y_adm: Optional[np.ndarray] = None,
    ):
        self.ids = tuple(ids)
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise AdminDataError("duplicate unit ids")
        self.periods = tuple(periods)
        shape = (n, len(self.periods))
        for name, arr in (("y_adm", y_adm), ("y_stat", y_stat), ("omega", omega)):
            if np.asarray(arr).shape != shape:
                raise AdminDataError(f"{name} must have shape {shape}")
        self.y_adm = np.asarray(y_adm, dtype=float)
        self.y_stat = np.asarray(y_stat, dtype=float)
        self.omega = np.asarray(omega, dtype=float)
        if np.nanmin(self.omega, initial=1.0) < 1:
            raise AdminDataError("weights omega must be >= 1")
        self.domain = np.asarray(domain)
        if self.domain.shape != (n,):
            raise AdminDataError("one domain label per unit required")
        self.in_frame = (np.ones(n, dtype=bool) if in_frame is None
                         else np.asarray(in_frame, dtype=bool))
        self.new_unit = (np.zeros(n, dtype=bool) if new_unit is None
                         else np.asarray(new_unit, dtype=bool))
        self.frame_turnover = (np.zeros(n) if frame_turnover is None
                               else np.asarray(frame_turnover, dtype=float))
        self.current_period = current_period
        self.current_y_adm = (None if current_y_adm is None
                              else np.asarray(current_y_adm, dtype=float))

    @property
    def n_units(self) -> int:
        return len(self.ids)

    def domain_totals(self) -> np.ndarray:
        """(n_units, n_periods) matrix of the unit's domain total per period.

        The total is the omega-weighted sum of surveyed values in the unit's
        domain, the denominator of the impact and gap scores.
        """
        totals = np.zeros((self.n_units, len(self.periods)))
        for d in np.unique(self.domain):
            rows = self.domain == d
            contrib = np.where(np.isnan(self.y_stat[rows]), 0.0,
                               self.omega[rows] * self.y_stat[rows])
            totals[rows] = contrib.sum(axis=0)
        return totals


@dataclass(frozen=True)
class CriteriaParams:
    """Paper-default knobs: median quantile, 10-million frame threshold."""

    p: float = 0.5
    t_frame: float = 1e7


@dataclass(frozen=True)
class CriteriaScores:
    ids: tuple[str, ...]
    scores: dict[str, np.ndarray]          # criterion -> per-unit score (NaN: no data)
    thresholds: dict[str, float]           # elbow criteria only
    selected: dict[str, np.ndarray]        # criterion -> boolean mask
    flag: tuple[str, ...]                  # survey / model / out_of_frame
    reasons: tuple[str, ...]               # why a unit is survey-reporting

    @property
    def n_survey(self) -> int:
        return sum(f == SURVEY for f in self.flag)

    @property
    def n_model(self) -> int:
        return sum(f == MODEL for f in self.flag)


def elbow_threshold(scores: Sequence[float]) -> float:
    """Score value at the elbow of the descending sorted-score curve.

    The curve is normalized to the unit square, the elbow is the point of
    maximum perpendicular distance to the chord, and ties resolve to the
    threshold that keeps MORE units above it (selection is strict >). With
    all values equal there is no elbow and the threshold sits above the max,
    so the criterion selects nobody.
    """
    arr = np.asarray(scores, dtype=float)
    if arr.size == 0 or np.isnan(arr).any():
        raise AdminDataError("elbow needs nonempty, non-NaN scores")
    if np.unique(arr).size == 1:
        return float(np.inf)
    if arr.size < 3:
        raise AdminDataError(f"elbow needs >= 3 scores, got {arr.size}")
    s = np.sort(arr)[::-1]
    m = s.size
    x = np.arange(m) / (m - 1)
    y = (s - s[-1]) / (s[0] - s[-1])
    dist = np.abs(x + y - 1.0)  # distance to the (0,1)-(1,0) chord, scaled by sqrt(2)
    best = dist.max()
    ties = np.flatnonzero(dist == best)
    return float(s[ties[-1]])  # largest index = smallest threshold = more selected


def _row_quantile(matrix: np.ndarray, p: float) -> np.ndarray:
    out = np.full(len(matrix), np.nan)
    for i, row in enumerate(matrix):
        if not np.isnan(row).any():
            out[i] = nearest_rank_quantile(row, p)
    return out


def criteria_scores(panel: AdminPanel, params: CriteriaParams = CriteriaParams()) -> CriteriaScores:
    """All six survey/model selection criteria over exactly nine periods.

    Units missing any required observation in the history go to survey
    reporting with a data-gap reason and are excluded from the elbow curves.
    Survey-reporting units satisfy at least one criterion; the rest are
    modelled.
    """
    if len(panel.periods) != N_HISTORY:
        raise AdminDataError(
            f"criteria need exactly {N_HISTORY} history periods, panel has {len(panel.periods)}"
        )
    n = panel.n_units
    totals = panel.domain_totals()
    if (totals <= 0).any():
        raise AdminDataError("nonpositive domain total in some period")

    complete = ~(np.isnan(panel.y_adm) | np.isnan(panel.y_stat) | np.isnan(panel.omega)).any(axis=1)

    weighted = panel.omega * panel.y_stat
    impact = weighted / totals
    gap = panel.omega * np.abs(panel.y_adm - panel.y_stat) / totals

    scores: dict[str, np.ndarray] = {}
    scores["c1"] = _row_quantile(impact, params.p)
    omega_last = panel.omega[:, -1]
    scores["c2"] = ((omega_last == 1.0) | (panel.frame_turnover > params.t_frame)).astype(float)
    scores["c2"][np.isnan(omega_last)] = np.nan
    with np.errstate(invalid="ignore"):
        scores["c3"] = np.where(complete, np.std(weighted, axis=1, ddof=1), np.nan)
        scores["c4"] = np.where(complete, np.std(gap, axis=1, ddof=1), np.nan)
    scores["c5"] = _row_quantile(gap, params.p)
    scores["c6"] = np.where(
        np.isnan(panel.y_adm).any(axis=1), np.nan, (panel.y_adm == 0).any(axis=1).astype(float)
    )

    elig = complete & panel.in_frame
    thresholds: dict[str, float] = {}
    selected: dict[str, np.ndarray] = {}
    for crit in ("c1", "c3", "c4", "c5"):
        vals = scores[crit][elig]
        if vals.size == 0:
            thresholds[crit] = float(np.inf)
        else:
            thresholds[crit] = elbow_threshold(vals)
        mask = np.zeros(n, dtype=bool)
        mask[elig] = scores[crit][elig] > thresholds[crit]
        selected[crit] = mask
    for crit in ("c2", "c6"):
        mask = np.zeros(n, dtype=bool)
        mask[elig] = scores[crit][elig] == 1.0
        selected[crit] = mask

    flag: list[str] = []
    reasons: list[str] = []
    for i in range(n):
        if not panel.in_frame[i]:
            flag.append(OUT_OF_FRAME)
            reasons.append("not in frame population")
            continue
        if not complete[i]:
            flag.append(SURVEY)
            reasons.append("data gap in history periods")
            continue
        hits = [c for c in CRITERIA if selected[c][i]]
        if hits:
            flag.append(SURVEY)
            reasons.append("criteria: " + ",".join(hits))
        else:
            flag.append(MODEL)
            reasons.append("")
    return CriteriaScores(ids=panel.ids, scores=scores, thresholds=thresholds,
                          selected=selected, flag=tuple(flag), reasons=tuple(reasons))


# -- synthetic statistical values ----------------------------------------------

SYNTH_FEATURES = ("y_adm", "adm_ma3", "domain_p95_adm")


def _synth_feature_rows(panel: AdminPanel, t: int, y_adm_t: np.ndarray) -> np.ndarray:
    """Features at period index t (or the current period when t == n_periods)."""
    hist = panel.y_adm[:, :t]
    if hist.shape[1] == 0:
        ma3 = y_adm_t.copy()
    else:
        tail = hist[:, -3:]
        with np.errstate(invalid="ignore"):
            ma3 = np.nanmean(tail, axis=1)
        ma3 = np.where(np.isnan(ma3), y_adm_t, ma3)
    p95 = np.full(len(y_adm_t), np.nan)
    for d in np.unique(panel.domain):
        rows = panel.domain == d
        vals = y_adm_t[rows]
        vals = vals[~np.isnan(vals)]
        if vals.size:
            p95[rows] = nearest_rank_quantile(vals, 0.95)
    return np.column_stack([y_adm_t, ma3, p95])


def synthetic_values(
    panel: AdminPanel,
    spec: TrainSpec,
    flags: Optional[CriteriaScores] = None,
    rng_seed: int = 0,
) -> dict[str, float]:
    """Predicted statistical values for the model-reporting units.

    Trains on every historic (unit, period) pair holding both the survey and
    the administrative value, with the administrative value itself as the
    leading feature; predicts the current reference period for units flagged
    for model reporting.
    """
    if panel.current_y_adm is None:
        raise AdminDataError("panel has no current-period administrative values")
    if flags is None:
        flags = criteria_scores(panel)

    X_parts, y_parts = [], []
    for t in range(len(panel.periods)):
        y_adm_t = panel.y_adm[:, t]
        feats = _synth_feature_rows(panel, t, y_adm_t)
        usable = ~np.isnan(panel.y_stat[:, t]) & ~np.isnan(y_adm_t) & ~np.isnan(feats).any(axis=1)
        if usable.any():
            X_parts.append(feats[usable])
            y_parts.append(panel.y_stat[usable, t])
    if not X_parts:
        raise AdminDataError("no historic overlap of survey and administrative values")
    model = fit_arrays(spec, np.vstack(X_parts), np.concatenate(y_parts),
                       rng_seed=rng_seed, feature_names=SYNTH_FEATURES)

    target_rows = np.array([f == MODEL for f in flags.flag])
    if not target_rows.any():
        return {}
    feats_now = _synth_feature_rows(panel, len(panel.periods), panel.current_y_adm)
    if np.isnan(feats_now[target_rows]).any() or np.isnan(panel.current_y_adm[target_rows]).any():
        raise AdminDataError("model-reporting unit lacks current administrative data")
    preds = np.asarray(model.predict(feats_now[target_rows]))
    out: dict[str, float] = {}
    for uid, value in zip(np.asarray(panel.ids, dtype=object)[target_rows], preds):
        out[str(uid)] = float(value)
    return out


# -- distribution diagnostics ----------------------------------------------------


def quantile_diagnostics(
    panel: AdminPanel,
    period: str,
    level: str = "sample",
    grid: Sequence[float] = DEFAULT_QUANTILE_GRID,
) -> list[dict[str, float]]:
    """Paired survey/admin quantiles on a fixed probability grid.

    ``sample`` level compares the raw microdata; ``population`` level weights
    both columns by omega, making the design visible. Output rows are ready
    for CSV emission and plotting.
    """
    if period not in panel.periods:
        raise AdminDataError(f"period {period!r} not in panel")
    t = panel.periods.index(period)
    both = ~np.isnan(panel.y_stat[:, t]) & ~np.isnan(panel.y_adm[:, t])
    if not both.any():
        raise AdminDataError(f"no units with both sources in {period}")
    stat = panel.y_stat[both, t]
    adm = panel.y_adm[both, t]
    w = panel.omega[both, t]
    rows = []
    for p in grid:
        if level == "sample":
            q_stat = nearest_rank_quantile(stat, p)
            q_adm = nearest_rank_quantile(adm, p)
        elif level == "population":
            q_stat = weighted_nearest_rank_quantile(stat, w, p)
            q_adm = weighted_nearest_rank_quantile(adm, w, p)
        else:
            raise AdminDataError(f"unknown level {level!r}")
        rows.append({"p": float(p), "q_survey": q_stat, "q_admin": q_adm})
    return rows


# -- CSV ingestion ----------------------------------------------------------------


def admin_panel_from_csv(path: str | Path, current_period: Optional[str] = None) -> AdminPanel:
    """Long-format admin panel file.

    Columns: id, period, y_adm, y_stat, omega, domain, in_frame, new_unit,
    frame_turnover. Empty y_stat marks a non-surveyed observation. Rows of
    ``current_period`` carry the reference-period administrative values.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "period", "y_adm", "y_stat", "omega", "domain"}
        if reader.fieldnames is None or required - set(reader.fieldnames):
            raise AdminDataError(f"admin panel needs columns {sorted(required)}")
        records = list(reader)
    if not records:
        raise AdminDataError("empty admin panel file")

    def opt_float(tok: str) -> float:
        tok = tok.strip()
        return np.nan if tok == "" else float(tok)

    periods = sorted({r["period"] for r in records})
    if current_period is not None:
        if current_period not in periods:
            raise AdminDataError(f"current period {current_period!r} not in file")
        periods = [p for p in periods if p != current_period]
    ids = sorted({r["id"] for r in records})
    idx = {u: i for i, u in enumerate(ids)}
    pidx = {p: j for j, p in enumerate(periods)}
    shape = (len(ids), len(periods))
    y_adm = np.full(shape, np.nan)
    y_stat = np.full(shape, np.nan)
    omega = np.full(shape, np.nan)
    current = np.full(len(ids), np.nan)
    domain = np.array([""] * len(ids), dtype=object)
    in_frame = np.ones(len(ids), dtype=bool)
    new_unit = np.zeros(len(ids), dtype=bool)
    frame_turnover = np.zeros(len(ids))
    for r in records:
        i = idx[r["id"]]
        domain[i] = r["domain"].strip()
        in_frame[i] = r.get("in_frame", "1").strip() not in ("0", "false", "False")
        new_unit[i] = r.get("new_unit", "0").strip() in ("1", "true", "True")
        if r.get("frame_turnover", "").strip():
            frame_turnover[i] = float(r["frame_turnover"])
        if current_period is not None and r["period"] == current_period:
            current[i] = opt_float(r["y_adm"])
            continue
        j = pidx[r["period"]]
        y_adm[i, j] = opt_float(r["y_adm"])
        y_stat[i, j] = opt_float(r["y_stat"])
        omega[i, j] = opt_float(r["omega"])
    return AdminPanel(
        ids=ids, periods=periods, y_adm=y_adm, y_stat=y_stat, omega=omega,
        domain=domain.astype(str), in_frame=in_frame, new_unit=new_unit,
        frame_turnover=frame_turnover,
        current_period=current_period,
        current_y_adm=None if current_period is None else current,
    )
