"""Early totals for short-term indicators from partially collected panels.

A panel stores, per reference period and unit, the response trajectory along
the collection window (day tau) and the final validated value. Features for
the imputation model are built from unit history and group aggregates only,
never from the unit's own current value, so every sample unit gets a feature
row whether or not it has responded yet. The early total mixes observed
values with model predictions for the non-respondents; its uncertainty
aggregates per-unit past squared prediction errors without pooling across
units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .predictors import FitError, Predictor, TrainSpec, fit_arrays
from .quantiles import nearest_rank_quantile
from .rng import derive_rng

FEATURE_NAMES = ("last_final", "ma3", "group_p95_ma3", "group_p95_current")


class PanelError(ValueError):
    """Panel data does not support the requested operation."""


@dataclass(frozen=True)
class PanelUnit:
    id: str
    group: str
    domain: str = "all"


class PanelStore:
    """Immutable per-period collection state of a rotating monthly sample."""

    def __init__(
        self,
        units: Sequence[PanelUnit],
        membership: Sequence[tuple[str, str]],            # (unit, period)
        responses: Sequence[tuple[str, str, int, float]],  # (unit, period, tau, value)
        finals: Sequence[tuple[str, str, float]],          # (unit, period, value)
    ):
        self._units = {u.id: u for u in units}
        if len(self._units) != len(units):
            raise PanelError("duplicate unit ids")
        self._members: dict[str, list[str]] = {}
        seen = set()
        for uid, period in membership:
            self._check_unit(uid)
            if (uid, period) in seen:
                raise PanelError(f"duplicate membership row ({uid}, {period})")
            seen.add((uid, period))
            self._members.setdefault(period, []).append(uid)
        self._responses: dict[tuple[str, str], list[tuple[int, float]]] = {}
        for uid, period, tau, value in responses:
            if (uid, period) not in seen:
                raise PanelError(f"response for non-member ({uid}, {period})")
            self._responses.setdefault((uid, period), []).append((int(tau), float(value)))
        for traj in self._responses.values():
            traj.sort()
        self._finals: dict[tuple[str, str], float] = {}
        for uid, period, value in finals:
            if (uid, period) not in seen:
                raise PanelError(f"final value for non-member ({uid}, {period})")
            if (uid, period) in self._finals:
                raise PanelError(f"final value set twice for ({uid}, {period})")
            self._finals[(uid, period)] = float(value)
        self._periods = tuple(sorted(self._members))

    def _check_unit(self, uid: str) -> None:
        if uid not in self._units:
            raise PanelError(f"unknown unit {uid!r}")

    @property
    def periods(self) -> tuple[str, ...]:
        return self._periods

    def unit(self, uid: str) -> PanelUnit:
        return self._units[uid]

    def sample(self, period: str) -> tuple[str, ...]:
        try:
            return tuple(self._members[period])
        except KeyError:
            raise PanelError(f"period {period!r} not in panel") from None

    def value_at(self, uid: str, period: str, tau: int) -> Optional[float]:
        """Latest collected value with response day <= tau, None if unreported."""
        traj = self._responses.get((uid, period))
        if not traj:
            return None
        val = None
        for day, value in traj:
            if day <= tau:
                val = value
            else:
                break
        return val

    def final(self, uid: str, period: str) -> Optional[float]:
        return self._finals.get((uid, period))

    def respondents(self, period: str, tau: int) -> tuple[str, ...]:
        return tuple(u for u in self.sample(period) if self.value_at(u, period, tau) is not None)

    def past_periods(self, period: str) -> tuple[str, ...]:
        return tuple(p for p in self._periods if p < period)


@dataclass(frozen=True)
class FeatureFrame:
    """One complete feature row per sample unit of a period at day tau."""

    period: str
    tau: int
    ids: tuple[str, ...]
    X: np.ndarray
    feature_names: tuple[str, ...]
    target: np.ndarray            # final values, NaN where not yet known
    history_fallback: np.ndarray  # unit block imputed from the group
    current_fallback: np.ndarray  # current aggregate fell back to the past one


def build_features(store: PanelStore, period: str, tau: int) -> FeatureFrame:
    """Unit-past, group-past, and group-current feature blocks.

    Unit block: most recent final value and the moving average of the last
    three finals. Group blocks: 95th percentile (nearest rank) of the unit
    moving averages, and of the current collected values at tau; an empty
    current group falls back to the past aggregate, flagged.
    """
    past = store.past_periods(period)
    if len(past) < 3:
        raise PanelError(f"need >= 3 past periods before {period}, have {len(past)}")
    members = store.sample(period)

    last_final: dict[str, Optional[float]] = {}
    ma3: dict[str, Optional[float]] = {}
    for uid in members:
        finals = [store.final(uid, p) for p in past]
        finals = [v for v in finals if v is not None]
        if finals:
            last_final[uid] = finals[-1]
            ma3[uid] = float(np.mean(finals[-3:]))
        else:
            last_final[uid] = None
            ma3[uid] = None

    groups: dict[str, list[str]] = {}
    for uid in members:
        groups.setdefault(store.unit(uid).group, []).append(uid)

    group_p95_ma3: dict[str, float] = {}
    group_median_ma3: dict[str, float] = {}
    for g, uids in groups.items():
        vals = [ma3[u] for u in uids if ma3[u] is not None]
        if vals:
            group_p95_ma3[g] = nearest_rank_quantile(vals, 0.95)
            group_median_ma3[g] = nearest_rank_quantile(vals, 0.5)

    group_p95_cur: dict[str, float] = {}
    for g, uids in groups.items():
        vals = [store.value_at(u, period, tau) for u in uids]
        vals = [v for v in vals if v is not None]
        if vals:
            group_p95_cur[g] = nearest_rank_quantile(vals, 0.95)

    n = len(members)
    X = np.empty((n, len(FEATURE_NAMES)))
    hist_fb = np.zeros(n, dtype=bool)
    cur_fb = np.zeros(n, dtype=bool)
    target = np.full(n, np.nan)
    for i, uid in enumerate(members):
        g = store.unit(uid).group
        if ma3[uid] is None:
            if g not in group_median_ma3:
                raise PanelError(
                    f"unit {uid!r} has no history and no group peer with history"
                )
            X[i, 0] = group_median_ma3[g]
            X[i, 1] = group_median_ma3[g]
            hist_fb[i] = True
        else:
            X[i, 0] = last_final[uid]  # type: ignore[assignment]
            X[i, 1] = ma3[uid]         # type: ignore[assignment]
        X[i, 2] = group_p95_ma3[g]
        if g in group_p95_cur:
            X[i, 3] = group_p95_cur[g]
        else:
            X[i, 3] = group_p95_ma3[g]
            cur_fb[i] = True
        final = store.final(uid, period)
        if final is not None:
            target[i] = final
    return FeatureFrame(period=period, tau=tau, ids=tuple(members), X=X,
                        feature_names=FEATURE_NAMES, target=target,
                        history_fallback=hist_fb, current_fallback=cur_fb)


def _usable_training_frame(store: PanelStore, period: str, tau: int) -> Optional[FeatureFrame]:
    try:
        frame = build_features(store, period, tau)
    except PanelError:
        return None
    keep = ~np.isnan(frame.target)
    if not keep.any():
        return None
    return FeatureFrame(
        period=frame.period, tau=frame.tau,
        ids=tuple(np.asarray(frame.ids, dtype=object)[keep]),
        X=frame.X[keep], feature_names=frame.feature_names,
        target=frame.target[keep],
        history_fallback=frame.history_fallback[keep],
        current_fallback=frame.current_fallback[keep],
    )


def rolling_fit(store: PanelStore, period: str, tau: int,
                grid: Sequence[TrainSpec], rng_seed: int = 0) -> Predictor:
    """Train on everything up to two periods back, select on the last period,
    retrain on both, per the rolling monthly schedule."""
    if not grid:
        raise PanelError("empty model grid")
    periods = store.periods
    if period not in periods:
        raise PanelError(f"period {period!r} not in panel")
    i = periods.index(period)
    if i < 2:
        raise PanelError("need >= 2 past periods with finalized targets")
    test_frame = _usable_training_frame(store, periods[i - 1], tau)
    train_frames = [f for p in periods[: i - 1]
                    if (f := _usable_training_frame(store, p, tau)) is not None]
    if test_frame is None or not train_frames:
        raise PanelError("insufficient finalized history for the rolling schedule")

    X_train = np.vstack([f.X for f in train_frames])
    y_train = np.concatenate([f.target for f in train_frames])

    best: tuple[float, int] | None = None
    failures = []
    for j, spec in enumerate(grid):
        try:
            model = fit_arrays(spec, X_train, y_train, rng_seed=rng_seed,
                               feature_names=FEATURE_NAMES)
        except FitError as exc:
            failures.append(f"{spec.kind}: {exc}")  # disqualified, not fatal
            continue
        preds = np.asarray(model.predict(test_frame.X))
        resid = preds - test_frame.target
        score = float(np.mean(np.abs(resid)) if spec.loss == "absolute"
                      else np.mean(resid**2))
        if best is None or score < best[0]:
            best = (score, j)
    if best is None:
        raise PanelError("every candidate model failed to fit: " + "; ".join(failures))
    spec = grid[best[1]]
    X_all = np.vstack([X_train, test_frame.X])
    y_all = np.concatenate([y_train, test_frame.target])
    return fit_arrays(spec, X_all, y_all, rng_seed=rng_seed, feature_names=FEATURE_NAMES)


@dataclass(frozen=True)
class EarlyTotal:
    domain: str
    estimate: float
    mse: float
    n_observed: int
    n_predicted: int


def _past_unit_sq_errors(store: PanelStore, period: str, tau: int,
                         predictor: Predictor, window: int) -> dict[str, list[float]]:
    """Per-unit squared prediction errors over the trailing finalized periods."""
    errors: dict[str, list[float]] = {}
    for p in store.past_periods(period)[-window:]:
        frame = _usable_training_frame(store, p, tau)
        if frame is None:
            continue
        preds = np.asarray(predictor.predict(frame.X))
        sq = (preds - frame.target) ** 2
        for uid, e in zip(frame.ids, sq):
            errors.setdefault(uid, []).append(float(e))
    return errors


def early_total(store: PanelStore, period: str, tau: int, predictor: Predictor,
                domain: Optional[str] = None, error_window: int = 12) -> EarlyTotal:
    """Observed sum plus predictions for non-respondents, within a domain.

    The MSE aggregate sums, over the predicted units only, each unit's mean
    past squared prediction error (last ``error_window`` periods); units
    without an error history take the median over their group's units,
    falling back to the overall median.
    """
    members = store.sample(period)
    if domain is not None:
        members = tuple(u for u in members if store.unit(u).domain == domain)
        if not members:
            raise PanelError(f"domain {domain!r} empty in period {period}")
    frame = build_features(store, period, tau)
    row = {uid: i for i, uid in enumerate(frame.ids)}

    observed, predicted = [], []
    estimate = 0.0
    for uid in members:
        val = store.value_at(uid, period, tau)
        if val is not None:
            observed.append(uid)
            estimate += val
        else:
            predicted.append(uid)
    if predicted:
        rows = np.array([row[u] for u in predicted])
        estimate += float(np.asarray(predictor.predict(frame.X[rows])).sum())

    mse = 0.0
    if predicted:
        history = _past_unit_sq_errors(store, period, tau, predictor, error_window)
        unit_mse = {u: float(np.mean(v[-error_window:])) for u, v in history.items()}
        group_mses: dict[str, list[float]] = {}
        for u, v in unit_mse.items():
            group_mses.setdefault(store.unit(u).group, []).append(v)
        overall = sorted(unit_mse.values())
        for uid in predicted:
            if uid in unit_mse:
                mse += unit_mse[uid]
            else:
                g = store.unit(uid).group
                pool = sorted(group_mses.get(g, [])) or overall
                if not pool:
                    raise PanelError(
                        f"no past prediction errors available to assess unit {uid!r}"
                    )
                mse += nearest_rank_quantile(pool, 0.5)
    return EarlyTotal(domain=domain or "all", estimate=estimate, mse=mse,
                      n_observed=len(observed), n_predicted=len(predicted))


def early_totals_by_domain(store: PanelStore, period: str, tau: int,
                           predictor: Predictor, error_window: int = 12) -> list[EarlyTotal]:
    domains = sorted({store.unit(u).domain for u in store.sample(period)})
    return [early_total(store, period, tau, predictor, d, error_window) for d in domains]


# -- synthetic panel and CSV ingestion -----------------------------------------


def make_synthetic_panel(
    n_units: int = 40,
    n_periods: int = 24,
    seed: int = 0,
    n_groups: int = 4,
    n_domains: int = 2,
    start_year: int = 2020,
    response_day_range: tuple[int, int] = (5, 50),
) -> PanelStore:
    """Autocorrelated unit-level panel with staggered response days."""
    rng = derive_rng(seed, 0)
    units = [
        PanelUnit(id=f"e{k:04d}", group=f"g{k % n_groups}", domain=f"d{k % n_domains}")
        for k in range(n_units)
    ]
    periods = [f"{start_year + t // 12}-{t % 12 + 1:02d}" for t in range(n_periods)]
    level = rng.lognormal(3.0, 0.6, size=n_units)
    value = level.copy()
    membership, responses, finals = [], [], []
    lo, hi = response_day_range
    for p in periods:
        value = level + 0.7 * (value - level) + rng.normal(0, 0.15 * level)
        days = rng.integers(lo, hi + 1, size=n_units)
        for k, u in enumerate(units):
            membership.append((u.id, p))
            responses.append((u.id, p, int(days[k]), float(value[k])))
            finals.append((u.id, p, float(value[k])))
    return PanelStore(units, membership, responses, finals)


def panel_from_csv(path: str | Path) -> PanelStore:
    """Long-format panel file.

    Columns: id, period, tau, value, group, domain. ``tau`` is an integer
    response day, ``final`` for the validated value, or ``member`` for a
    roster row without a response (value ignored for roster rows).
    """
    units: dict[str, PanelUnit] = {}
    membership: list[tuple[str, str]] = []
    member_seen: set[tuple[str, str]] = set()
    responses: list[tuple[str, str, int, float]] = []
    finals: list[tuple[str, str, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "period", "tau", "value", "group", "domain"}
        if reader.fieldnames is None or required - set(reader.fieldnames):
            raise PanelError(f"panel file needs columns {sorted(required)}")
        for i, rec in enumerate(reader, start=1):
            uid = rec["id"].strip()
            period = rec["period"].strip()
            unit = PanelUnit(id=uid, group=rec["group"].strip(), domain=rec["domain"].strip())
            if uid in units and units[uid] != unit:
                raise PanelError(f"row {i}: unit {uid!r} has inconsistent group/domain")
            units[uid] = unit
            if (uid, period) not in member_seen:
                member_seen.add((uid, period))
                membership.append((uid, period))
            tau = rec["tau"].strip().lower()
            if tau == "member":
                continue
            try:
                value = float(rec["value"])
            except ValueError:
                raise PanelError(f"row {i}: non-numeric value {rec['value']!r}") from None
            if tau == "final":
                finals.append((uid, period, value))
            else:
                try:
                    responses.append((uid, period, int(tau), value))
                except ValueError:
                    raise PanelError(f"row {i}: bad tau {rec['tau']!r}") from None
    return PanelStore(list(units.values()), membership, responses, finals)
