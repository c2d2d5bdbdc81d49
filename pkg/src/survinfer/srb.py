"""Subsampling Rao-Blackwellised prediction estimation.

The compound design draws a sample s by SRSWOR(n) and a training subsample
s1 by SRSWOR(n1) from s; conditional on s1 the test set s2 = s \\ s1 is a
probability sample from the remaining units, with analytic conditional
inclusion probabilities. Averaging subsample-trained predictions over splits
gives the Rao-Blackwellised point estimate; the residuals on each test set
feed design-unbiased bias and MSE estimators, exact under full split
enumeration and Monte-Carlo otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterator, Optional, Sequence

import numpy as np

from . import predictors
from .designs import SamplingDesign, Sample, Srswor, ht_true_variance, ht_variance_estimate
from .popframe import FinitePopulation, SimulationConfig, generate_linear_population
from .predictors import FitError, TrainSpec, fit_arrays
from .rng import child_seed, derive_rng, srswor_indices

EXACT_ENUMERATION_CAP = 100_000

MODE_MONTE_CARLO = "monte_carlo"
MODE_EXACT = "exact_rb"

_CHUNK = 4096


class SrbError(RuntimeError):
    """Split-based estimation failed."""


@dataclass(frozen=True)
class SplitDesign:
    """SRSWOR sample of size n from N, SRSWOR training subsample of size n1.

    Conditional on the training set, the test set is an SRSWOR draw of size
    n2 = n - n1 from the N - n1 units outside it.
    """

    N: int
    n: int
    n1: int

    def __post_init__(self) -> None:
        if not 1 <= self.n1 < self.n <= self.N:
            raise SrbError(f"need 1 <= n1 < n <= N, got n1={self.n1}, n={self.n}, N={self.N}")

    @property
    def n2(self) -> int:
        return self.n - self.n1

    @property
    def pi2(self) -> float:
        """Conditional test-set inclusion probability of a unit outside s1."""
        return self.n2 / (self.N - self.n1)

    @property
    def pi2_joint(self) -> float:
        """Conditional joint test-set inclusion probability of a pair outside s1."""
        if self.N - self.n1 < 2:
            raise SrbError("joint inclusion undefined with fewer than 2 units outside s1")
        return self.n2 * (self.n2 - 1) / ((self.N - self.n1) * (self.N - self.n1 - 1))

    @property
    def n_splits_exact(self) -> int:
        return math.comb(self.n, self.n1)


@dataclass(frozen=True)
class UncertaintyReport:
    """Point estimate with design-based bias and MSE estimates."""

    y_hat: float
    estimator_kind: str
    bias_hat: float
    mse_hat: float
    components: dict[str, float]
    T_used: int
    mode: str

    @property
    def negative_mse(self) -> bool:
        """mse_hat is a difference of estimated terms and may come out negative."""
        return self.mse_hat < 0

    @property
    def mse_hat_presentation(self) -> float:
        """Truncated-at-zero value for reporting; estimation keeps the raw one."""
        return max(self.mse_hat, 0.0)


def prediction_estimator(sample: Sample, predictor: predictors.Predictor,
                         population: FinitePopulation) -> float:
    """Observed total on the sample plus predictions for every unit outside it."""
    if sample.design.population is not population:
        raise SrbError("sample was drawn from a different population")
    y = population.y_values
    if np.isnan(y[sample.positions]).any():
        raise SrbError("sampled units without observed y")
    mask = np.ones(population.N, dtype=bool)
    mask[sample.positions] = False
    obs = float(y[sample.positions].sum())
    if not mask.any():
        return obs  # census: no out-of-sample term
    idx = [population.feature_schema.index_of(f) for f in predictor.feature_names]
    X_out = population.feature_matrix[np.ix_(np.flatnonzero(mask), np.asarray(idx))]
    return obs + float(np.asarray(predictor.predict(X_out)).sum())


def split(sample: Sample, n1: int, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One SRSWOR training/test split of the sample; population positions."""
    n = sample.n
    if not 1 <= n1 < n:
        raise SrbError(f"need 1 <= n1 < n, got n1={n1}, n={n}")
    local = srswor_indices(derive_rng(rng_seed, 0), n, n1)
    mask = np.zeros(n, dtype=bool)
    mask[local] = True
    return sample.positions[mask], sample.positions[~mask]


def bias_estimate(residuals_per_split: Sequence[np.ndarray], pi2: float) -> float:
    """Mean over splits of the weighted test-set residual total.

    Each split contributes sum over its test set of (1/pi2 - 1) * e, where e
    is (prediction - actual) of the subsample-trained model.
    """
    if pi2 <= 0:
        raise SrbError("pi2 must be positive")
    c = 1.0 / pi2 - 1.0
    per_split = [c * float(np.asarray(e).sum()) for e in residuals_per_split]
    if not per_split:
        raise SrbError("no splits supplied")
    return float(np.mean(per_split))


# -- split engine -------------------------------------------------------------


@dataclass
class _SplitStats:
    bhat: np.ndarray           # per-split weighted residual total
    v_bias: np.ndarray         # per-split variance estimate of bhat given s1
    v_raw: np.ndarray          # per-split variance estimate of the raw residual total
    ystar: np.ndarray          # per-split subsample-trained point estimate
    mu_bar: np.ndarray         # split-averaged predictions for units outside s
    mode: str

    @property
    def T_used(self) -> int:
        return len(self.bhat)


def _require_srswor_pq(sample: Sample, n1: int) -> SplitDesign:
    if not isinstance(sample.design.kind, Srswor):
        raise SrbError(
            "split-based estimators need an SRSWOR sample design "
            "(conditional inclusion probabilities of other designs are not implemented)"
        )
    return SplitDesign(N=sample.design.population.N, n=sample.n, n1=n1)


def _mc_split_plan(n: int, n1: int, T: int, rng_seed: int) -> np.ndarray:
    """(T, n1) within-sample index sets, SRSWOR per row, from one master stream."""
    rng = derive_rng(rng_seed, 0)
    keys = rng.random((T, n))
    plan = np.argsort(keys, axis=1, kind="stable")[:, :n1]
    plan.sort(axis=1)
    return plan


def _exact_split_plan(n: int, n1: int) -> np.ndarray:
    return np.array(list(combinations(range(n), n1)), dtype=np.intp)


def _split_chunks(plan: np.ndarray) -> Iterator[tuple[int, np.ndarray]]:
    for start in range(0, len(plan), _CHUNK):
        yield start, plan[start : start + _CHUNK]


def _design_arrays(sample: Sample, spec: TrainSpec, population: FinitePopulation):
    schema = population.feature_schema
    names = schema.names if spec.features is None else spec.features
    cols = np.array([schema.index_of(f) for f in names], dtype=np.intp)
    X_all = population.feature_matrix[:, cols]
    y = population.y_values
    if np.isnan(y[sample.positions]).any():
        raise SrbError("sampled units without observed y")
    out_mask = np.ones(population.N, dtype=bool)
    out_mask[sample.positions] = False
    out_positions = np.flatnonzero(out_mask)
    X_s = X_all[sample.positions]
    X_out = X_all[out_positions]
    y_s = y[sample.positions]
    w_s = sample.weights if spec.weight == "design" else None
    return names, X_s, y_s, w_s, X_out


def _run_splits_loop(sample, spec, population, plan, design: SplitDesign,
                     rng_seed: int, mode: str) -> _SplitStats:
    names, X_s, y_s, w_s, X_out = _design_arrays(sample, spec, population)
    n = sample.n
    a = design.pi2
    c = 1.0 / a - 1.0
    pair_w = None
    if design.n2 >= 2:
        b = design.pi2_joint
        pair_w = (b - a * a) / b

    T = len(plan)
    bhat = np.empty(T)
    v_bias = np.empty(T)
    v_raw = np.empty(T)
    ystar = np.empty(T)
    mu_bar = np.zeros(len(X_out))
    obs_sum = float(y_s.sum())
    all_local = np.arange(n)

    needs_seed = spec.kind == predictors.BAGGED_TREES
    for t, s1_local in enumerate(plan):
        mask = np.zeros(n, dtype=bool)
        mask[s1_local] = True
        s2_local = all_local[~mask]
        fit_seed = int(derive_rng(rng_seed, 1, t).integers(2**62)) if needs_seed else 0
        try:
            predictor = fit_arrays(
                spec, X_s[s1_local], y_s[s1_local],
                None if w_s is None else w_s[s1_local],
                rng_seed=fit_seed, feature_names=names,
            )
        except FitError as exc:
            raise SrbError(f"model fit failed on split {t}: {exc}") from exc
        mu_out = np.asarray(predictor.model.predict(X_out))
        mu_s2 = np.asarray(predictor.model.predict(X_s[s2_local]))
        e = mu_s2 - y_s[s2_local]
        E = float(e.sum())
        Q = float((e * e).sum())
        bhat[t] = c * E
        if pair_w is not None:
            v_raw[t] = pair_w * (E * E - Q) + (1.0 - a) * Q
            v_bias[t] = c * c * v_raw[t]
        else:
            v_raw[t] = math.nan
            v_bias[t] = math.nan
        ystar[t] = obs_sum + float(mu_out.sum())
        mu_bar += mu_out
    mu_bar /= T
    return _SplitStats(bhat=bhat, v_bias=v_bias, v_raw=v_raw, ystar=ystar,
                       mu_bar=mu_bar, mode=mode)


def _run_splits_batch_ols(sample, spec, population, plan, design: SplitDesign,
                          mode: str) -> _SplitStats:
    """Vectorized refits for plain OLS specs; one solve per split, batched.

    Identical estimates to the sequential path (same per-split normal
    equations), just grouped; reductions stay in split order.
    """
    names, X_s, y_s, w_s, X_out = _design_arrays(sample, spec, population)
    n = sample.n
    a = design.pi2
    c = 1.0 / a - 1.0
    pair_w = None
    if design.n2 >= 2:
        b = design.pi2_joint
        pair_w = (b - a * a) / b

    Xa_s = np.column_stack([np.ones(n), X_s])
    Xa_out = np.column_stack([np.ones(len(X_out)), X_out])
    p1 = Xa_s.shape[1]

    T = len(plan)
    bhat = np.empty(T)
    v_bias = np.empty(T)
    v_raw = np.empty(T)
    ystar = np.empty(T)
    mu_bar = np.zeros(len(X_out))
    obs_sum = float(y_s.sum())

    for start, chunk in _split_chunks(plan):
        m = len(chunk)
        mask = np.zeros((m, n), dtype=bool)
        np.put_along_axis(mask, chunk, True, axis=1)
        # complement of each split, in index order
        s2_idx = np.argsort(mask, axis=1, kind="stable")[:, : design.n2]

        Xb = Xa_s[chunk]                      # (m, n1, p1)
        yb = y_s[chunk]                       # (m, n1)
        if w_s is not None:
            sw = np.sqrt(w_s[chunk])
            Xb = Xb * sw[:, :, None]
            yb = yb * sw
        A = np.einsum("tij,tik->tjk", Xb, Xb)
        rhs = np.einsum("tij,ti->tj", Xb, yb)
        eig = np.linalg.eigvalsh(A)
        bad = eig[:, 0] <= eig[:, -1] * 1e-12
        if bad.any():
            t_bad = start + int(np.flatnonzero(bad)[0])
            raise SrbError(
                f"model fit failed on split {t_bad}: design matrix rank deficient"
            )
        coef = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]  # (m, p1)

        mu_out = coef @ Xa_out.T              # (m, n_out)
        mu_s = coef @ Xa_s.T                  # (m, n)
        e = np.take_along_axis(mu_s, s2_idx, axis=1) - y_s[s2_idx]
        E = e.sum(axis=1)
        Q = (e * e).sum(axis=1)
        sl = slice(start, start + m)
        bhat[sl] = c * E
        if pair_w is not None:
            v_raw[sl] = pair_w * (E * E - Q) + (1.0 - a) * Q
            v_bias[sl] = c * c * v_raw[sl]
        else:
            v_raw[sl] = math.nan
            v_bias[sl] = math.nan
        ystar[sl] = obs_sum + mu_out.sum(axis=1)
        mu_bar += mu_out.sum(axis=0)
    mu_bar /= T
    return _SplitStats(bhat=bhat, v_bias=v_bias, v_raw=v_raw, ystar=ystar,
                       mu_bar=mu_bar, mode=mode)


def _run_engine(sample: Sample, spec: TrainSpec, n1: int, T: int, rng_seed: int,
                population: FinitePopulation, mode: str = MODE_MONTE_CARLO,
                engine: str = "auto") -> tuple[_SplitStats, SplitDesign]:
    if sample.design.population is not population:
        raise SrbError("sample was drawn from a different population")
    design = _require_srswor_pq(sample, n1)
    if mode == MODE_EXACT:
        count = design.n_splits_exact
        if count > EXACT_ENUMERATION_CAP:
            raise SrbError(
                f"exact enumeration needs {count} splits (> cap {EXACT_ENUMERATION_CAP}); "
                f"use Monte-Carlo mode"
            )
        plan = _exact_split_plan(sample.n, n1)
    elif mode == MODE_MONTE_CARLO:
        if T < 1:
            raise SrbError("T must be >= 1")
        plan = _mc_split_plan(sample.n, n1, T, rng_seed)
    else:
        raise SrbError(f"unknown mode {mode!r}")

    use_batch = engine == "batch" or (engine == "auto" and spec.kind == predictors.OLS)
    if engine not in ("auto", "batch", "loop"):
        raise SrbError(f"unknown engine {engine!r}")
    if use_batch and spec.kind != predictors.OLS:
        raise SrbError("batch engine only supports OLS specs")
    if use_batch:
        stats = _run_splits_batch_ols(sample, spec, population, plan, design, mode)
    else:
        stats = _run_splits_loop(sample, spec, population, plan, design, rng_seed, mode)
    return stats, design


def srb_estimator(sample: Sample, spec: TrainSpec, n1: int, T: int, rng_seed: int,
                  population: FinitePopulation, mode: str = MODE_MONTE_CARLO,
                  engine: str = "auto") -> tuple[float, np.ndarray]:
    """Rao-Blackwellised point estimate and the split-averaged predictions.

    Returns (estimate, mu_bar) where mu_bar holds the averaged out-of-sample
    predictions, aligned with the population units outside the sample in
    position order.
    """
    stats, _ = _run_engine(sample, spec, n1, T, rng_seed, population, mode, engine)
    y = population.y_values
    obs = float(y[sample.positions].sum())
    return obs + float(stats.mu_bar.sum()), stats.mu_bar


def mse_estimate(sample: Sample, spec: TrainSpec, n1: int, T: int, rng_seed: int,
                 population: FinitePopulation, mode: str = MODE_MONTE_CARLO,
                 engine: str = "auto") -> UncertaintyReport:
    """Design-based bias and MSE estimation for the split-averaged estimator.

    Averages, over splits, the squared weighted residual total corrected by
    two conditionally-unbiased variance estimators, then subtracts the
    across-split variance of the subsample-trained point estimate (exact
    divisor under enumeration, ddof=1 under Monte Carlo). The components
    recombine to mse_hat exactly.
    """
    design = _require_srswor_pq(sample, n1)
    if design.n2 < 2:
        raise SrbError("MSE estimation needs n2 >= 2 (pairwise test-set "
                       "inclusion probability is zero otherwise)")
    if mode == MODE_MONTE_CARLO and T < 2:
        raise SrbError("Monte-Carlo MSE estimation needs T >= 2")
    stats, design = _run_engine(sample, spec, n1, T, rng_seed, population, mode, engine)

    mean_bias_sq = float(np.mean(stats.bhat**2))
    mean_v_bias = float(np.mean(stats.v_bias))
    mean_v_raw = float(np.mean(stats.v_raw))
    if stats.mode == MODE_EXACT:
        var_q = float(stats.ystar.var())          # exact over all splits
    else:
        var_q = float(stats.ystar.var(ddof=1))    # unbiased under iid splits
    mse_hat = mean_bias_sq - mean_v_bias + mean_v_raw - var_q

    y = population.y_values
    y_hat = float(y[sample.positions].sum()) + float(stats.mu_bar.sum())
    return UncertaintyReport(
        y_hat=y_hat,
        estimator_kind="srb",
        bias_hat=float(np.mean(stats.bhat)),
        mse_hat=mse_hat,
        components={
            "mean_bias_sq": mean_bias_sq,
            "mean_var_bias_est": mean_v_bias,
            "mean_var_raw_resid": mean_v_raw,
            "var_q_ystar": var_q,
        },
        T_used=stats.T_used,
        mode=stats.mode,
    )


# -- simulation study ----------------------------------------------------------


def run_table1_simulation(cfg: SimulationConfig,
                          engine: str = "auto") -> list[dict[str, Optional[float]]]:
    """Replicated MSE study on the linear synthetic population.

    For every test-set size in the grid: empirical MSE and relative
    efficiency (vs the true HT variance) of the full-sample prediction
    estimator and of the Rao-Blackwellised one, plus the across-replicate CV
    of the MSE estimator. One row per grid entry.
    """
    pop = generate_linear_population(cfg)
    Y = pop.total_y()
    design = SamplingDesign(pop, Srswor(cfg.n))
    v_ht = ht_true_variance(design)
    spec = TrainSpec(kind=predictors.OLS, features=("x1",))

    rows: list[dict[str, Optional[float]]] = []
    for gi, n2 in enumerate(cfg.n2_grid):
        n1 = cfg.n - n2
        err_pred = np.empty(cfg.replicates)
        err_rb = np.empty(cfg.replicates)
        mse_hats = np.empty(cfg.replicates)
        for r in range(cfg.replicates):
            sample = design.draw(child_seed(cfg.seed, 1, gi, r))
            predictor = predictors.fit(spec, sample, pop)
            y_hat = prediction_estimator(sample, predictor, pop)
            report = mse_estimate(sample, spec, n1, cfg.T,
                                  child_seed(cfg.seed, 2, gi, r), pop, engine=engine)
            err_pred[r] = y_hat - Y
            err_rb[r] = report.y_hat - Y
            mse_hats[r] = report.mse_hat
        mse_pred = float(np.mean(err_pred**2))
        mse_srb = float(np.mean(err_rb**2))
        cv_mse: Optional[float] = None
        if cfg.replicates >= 2:
            cv_mse = float(np.std(mse_hats, ddof=1) / np.mean(mse_hats))
        rows.append({
            "n1": float(n1),
            "n2": float(n2),
            "mse_pred": mse_pred,
            "re_pred": mse_pred / v_ht,
            "mse_srb": mse_srb,
            "re_srb": mse_srb / v_ht,
            "cv_mse": cv_mse,
        })
    return rows


def ht_variance_estimator_cv(cfg: SimulationConfig) -> float:
    """Across-replicate CV of the HT variance estimator on the study design."""
    pop = generate_linear_population(cfg)
    design = SamplingDesign(pop, Srswor(cfg.n))
    vhats = np.empty(cfg.replicates)
    for r in range(cfg.replicates):
        sample = design.draw(child_seed(cfg.seed, 3, r))
        vhats[r] = ht_variance_estimate(sample)
    return float(np.std(vhats, ddof=1) / np.mean(vhats))
