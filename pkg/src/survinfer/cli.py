"""Command-line surface: run configs, CSV reports, and the study runners.

One JSON config file per run; command-line flags override config values.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import adminframe, earlyest, editing, timedisagg
from .designs import (DesignError, Sample, design_from_spec, ht_total,
                      ht_variance_estimate)
from .popframe import (FeatureSchema, FinitePopulation, PopulationSchema,
                       SchemaError, SimulationConfig, ingest_population)
from .predictors import FitError, TrainSpec, fit
from .srb import SrbError, run_table1_simulation
from .rng import child_seed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (SchemaError, DesignError, editing.ScoringError, earlyest.PanelError,
                adminframe.AdminDataError, timedisagg.DisaggError,
                FileNotFoundError, KeyError)
_NUMERIC_ERRORS = (FitError, SrbError, timedisagg.CalibrationError,
                   np.linalg.LinAlgError, ZeroDivisionError, FloatingPointError)


class ConfigError(ValueError):
    """Bad run configuration."""


_ALLOWED_KEYS = {
    "simulate-srb": {"N", "n", "beta1", "beta2", "T", "replicates", "n2_grid",
                     "seed", "noise_scale", "engine"},
    "edit-score": {"mode", "predictor", "p_model", "m_model", "miss_model",
                   "threshold", "target_fraction", "seed", "combine"},
    "early-estimate": {"grid", "error_window", "seed"},
    "admin-select": {"p", "t_frame", "current_period", "diagnostics_period",
                     "diagnostics_level"},
    "time-disaggregate": {"quarter", "class", "domain", "window", "prob_floor",
                          "n_boot", "seed", "forest", "months"},
    "relative-efficiency": {"variables", "features", "design", "predictor",
                            "seed_prev", "seed_cur", "seed"},
}


@dataclass(frozen=True)
class RunConfig:
    """Validated per-subcommand options; round-trips through JSON."""

    subcommand: str
    options: dict

    def __post_init__(self) -> None:
        allowed = _ALLOWED_KEYS.get(self.subcommand)
        if allowed is None:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        unknown = set(self.options) - allowed
        if unknown:
            raise ConfigError(
                f"unknown config keys for {self.subcommand}: {sorted(unknown)}"
            )

    @classmethod
    def load(cls, path: Optional[str], subcommand: str) -> "RunConfig":
        if path is None:
            return cls(subcommand, {})
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls(subcommand, data)

    def to_json(self) -> str:
        return json.dumps({"subcommand": self.subcommand, "options": self.options},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        return cls(data["subcommand"], data["options"])

    def get(self, key, default=None):
        return self.options.get(key, default)


def emit_report(rows: Sequence[dict], path: str | Path) -> None:
    """CSV with stable column order and 12-significant-digit numerics."""
    rows = list(rows)
    if not rows:
        raise ConfigError("nothing to report: empty results")
    fields = list(rows[0].keys())

    def fmt(v) -> str:
        if v is None:
            return ""
        if isinstance(v, float):
            return format(v, ".12g")
        return str(v)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([fmt(row.get(f)) for f in fields])


# -- relative-efficiency study (pretrained prediction vs HT) --------------------


@dataclass(frozen=True)
class RelativeEfficiencySpec:
    """Which target columns to study, which regressors, which model."""

    variables: tuple[str, ...]
    features: tuple[str, ...]
    model: TrainSpec

    def for_variable(self, variable: str) -> TrainSpec:
        return replace(self.model, target=variable, features=self.features)


def run_relative_efficiency(
    prev_sample: Sample,
    cur_sample: Sample,
    population: FinitePopulation,
    spec: RelativeEfficiencySpec,
    rng_seed: int = 0,
) -> list[dict]:
    """Pretrained prediction estimator vs HT on the current sample.

    For each variable: train only on the earlier sample, sum predictions over
    the whole current population, estimate the bias by the weighted sample
    sum of (prediction - actual), and divide by the HT standard error. A
    quotient below 1 means the pretrained estimator beats HT.
    """
    if cur_sample.design.population is not population:
        raise ConfigError("current sample must come from the supplied population")
    prev_pop = prev_sample.design.population
    rows = []
    for vi, var in enumerate(spec.variables):
        var_spec = spec.for_variable(var)
        if var not in prev_pop.feature_schema.names or var not in population.feature_schema.names:
            raise SchemaError(f"variable {var!r} absent from a population")
        predictor = fit(var_spec, prev_sample, prev_pop, rng_seed=child_seed(rng_seed, vi))
        feat_idx = [population.feature_schema.index_of(f) for f in predictor.feature_names]
        X_cur = population.feature_matrix[:, feat_idx]
        preds = np.asarray(predictor.predict(X_cur))
        y_cur = population.feature_column(var)

        y_pred_total = float(preds.sum())
        y_ht = ht_total(cur_sample, y=y_cur)
        pi = cur_sample.inclusion_probs
        pos = cur_sample.positions
        bias_hat = float(((preds[pos] - y_cur[pos]) / pi).sum())
        v_ht = ht_variance_estimate(cur_sample, y=y_cur)
        quotient = abs(bias_hat) / np.sqrt(v_ht) if v_ht > 0 else np.inf
        rows.append({
            "variable": var,
            "y_pred": y_pred_total,
            "y_ht": y_ht,
            "bias_hat": bias_hat,
            "v_ht": v_ht,
            "quotient": float(quotient),
        })
    return rows


# -- subcommand implementations ---------------------------------------------------


def _cmd_simulate_srb(args, cfg: RunConfig) -> int:
    opts = dict(cfg.options)
    engine = opts.pop("engine", "auto")
    if "n2_grid" in opts:
        opts["n2_grid"] = tuple(int(v) for v in opts["n2_grid"])
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        sim = SimulationConfig(**opts)
    except (TypeError, SchemaError) as exc:
        raise ConfigError(f"bad simulation config: {exc}") from None
    rows = run_table1_simulation(sim, engine=engine)
    emit_report(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _read_editing_records(path: str, numeric_raw: bool) -> list[editing.EditingRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if {"id", "d", "y_raw"} - set(cols):
            raise editing.ScoringError(f"{path}: needs columns id, d, y_raw, z_*")
        z_cols = [c for c in cols if c.startswith("z_")]
        records = []
        for rec in reader:
            def val(tok: Optional[str]):
                tok = (tok or "").strip()
                if tok == "":
                    return None
                return float(tok) if numeric_raw else tok
            records.append(editing.EditingRecord(
                id=rec["id"], d=float(rec["d"]),
                y_raw=val(rec.get("y_raw")),
                y_valid=val(rec.get("y_valid")),
                z=tuple(float(rec[c]) for c in z_cols),
            ))
    return records


def _cmd_edit_score(args, cfg: RunConfig) -> int:
    mode = cfg.get("mode", "categorical")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    numeric = mode == "continuous"
    historic = _read_editing_records(args.historic, numeric)
    batch = _read_editing_records(args.batch, numeric)
    records = historic + batch
    kwargs = dict(threshold=cfg.get("threshold"),
                  target_fraction=cfg.get("target_fraction"))
    if mode == "categorical":
        spec = TrainSpec.from_dict(cfg.get("predictor", {
            "kind": "bagged_trees", "task": "probability", "n_trees": 100, "max_depth": 8,
        }))
        table = editing.categorical_score(records, spec, rng_seed=seed, **kwargs)
    elif mode == "continuous":
        p_spec = TrainSpec.from_dict(cfg.get("p_model", {
            "kind": "bagged_trees", "task": "probability", "n_trees": 100, "max_depth": 8,
        }))
        m_spec = TrainSpec.from_dict(cfg.get("m_model", {"kind": "bagged_trees"}))
        miss_spec = TrainSpec.from_dict(cfg["miss_model"]) if "miss_model" in cfg.options else None
        table = editing.continuous_score(records, p_spec, m_spec, miss_spec,
                                         rng_seed=seed, **kwargs)
    else:
        raise ConfigError(f"unknown editing mode {mode!r}")
    batch_ids = {r.id for r in batch}
    rows = [
        {"id": uid, "score": float(table.scores[i]), "rank": int(table.ranks[i]),
         "flag": int(table.flags[i])}
        for i, uid in enumerate(table.ids) if uid in batch_ids
    ]
    rows.sort(key=lambda r: r["rank"])
    emit_report(rows, args.out)
    print(f"scored {len(rows)} batch records to {args.out}")
    return EXIT_OK


def _cmd_early_estimate(args, cfg: RunConfig) -> int:
    store = earlyest.panel_from_csv(args.panel)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    grid_cfg = cfg.get("grid", [{"kind": "ols"}])
    grid = [TrainSpec.from_dict(g) for g in grid_cfg]
    predictor = earlyest.rolling_fit(store, args.period, args.tau, grid, rng_seed=seed)
    totals = earlyest.early_totals_by_domain(
        store, args.period, args.tau, predictor,
        error_window=int(cfg.get("error_window", 12)),
    )
    rows = [
        {"domain": t.domain, "estimate": t.estimate, "mse": t.mse,
         "n_observed": t.n_observed, "n_predicted": t.n_predicted}
        for t in totals
    ]
    emit_report(rows, args.out)
    print(f"early estimates for {args.period} at tau={args.tau} -> {args.out}")
    return EXIT_OK


def _cmd_admin_select(args, cfg: RunConfig) -> int:
    panel = adminframe.admin_panel_from_csv(args.panel, cfg.get("current_period"))
    params = adminframe.CriteriaParams(
        p=float(cfg.get("p", 0.5)), t_frame=float(cfg.get("t_frame", 1e7)),
    )
    scores = adminframe.criteria_scores(panel, params)
    rows = []
    for i, uid in enumerate(scores.ids):
        row: dict = {"id": uid}
        for j, crit in enumerate(adminframe.CRITERIA, start=1):
            v = scores.scores[crit][i]
            row[f"r{j}"] = None if np.isnan(v) else float(v)
            row[f"c{j}"] = int(scores.selected[crit][i])
        row["flag"] = scores.flag[i]
        row["reason"] = scores.reasons[i]
        rows.append(row)
    emit_report(rows, args.out)
    print(f"{scores.n_survey} survey-reporting, {scores.n_model} model-reporting "
          f"-> {args.out}")
    if args.diagnostics:
        period = cfg.get("diagnostics_period", panel.periods[-1])
        level = cfg.get("diagnostics_level", "sample")
        emit_report(adminframe.quantile_diagnostics(panel, period, level), args.diagnostics)
        print(f"quantile diagnostics ({level}, {period}) -> {args.diagnostics}")
    return EXIT_OK


def _cmd_time_disaggregate(args, cfg: RunConfig) -> int:
    panel = timedisagg.quarter_records_from_csv(args.panel)
    quarter = cfg.get("quarter", panel.quarters[-1])
    class_name = cfg.get("class")
    if class_name is None:
        raise ConfigError("config key 'class' (indicator name) is required")
    domain = cfg.get("domain")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    margins = timedisagg.margins_from_csv(args.margins) if args.margins else None
    forest = (TrainSpec.from_dict(cfg["forest"]) if "forest" in cfg.options
              else timedisagg.DEFAULT_FOREST_SPEC)
    months = [tuple(m) for m in cfg.get("months", timedisagg.MONTH_WEEKS)]

    records = panel.get(quarter)
    design = timedisagg.measure_assignment_probs(
        panel, quarter, forest, window=int(cfg.get("window", 6)),
        prob_floor=float(cfg.get("prob_floor", 1e-4)), rng_seed=seed,
    )
    n_boot = int(cfg.get("n_boot", 500))
    rows = []
    week_est: dict[int, float] = {}
    week_var: dict[int, float] = {}
    for week in range(1, timedisagg.N_WEEKS + 1):
        est = timedisagg.weekly_estimate(records, design, week, class_name,
                                         domain=domain, margins=margins)
        var = timedisagg.weekly_variance_bootstrap(
            records, design, week, class_name, domain=domain, margins=margins,
            n_boot=n_boot, rng_seed=seed,
        )
        week_est[week], week_var[week] = est.total, var
        rows.append({"period": f"w{week:02d}", "domain": domain or "all",
                     "class": class_name, "estimate": est.total, "variance": var,
                     "n_respondents": est.n_respondents})
    for mi, weeks in enumerate(months, start=1):
        est_m = timedisagg.monthly_estimate([week_est[w] for w in weeks])
        var_m = timedisagg.monthly_variance([week_est[w] for w in weeks],
                                            [week_var[w] for w in weeks])
        n_resp = sum(
            int(((records.week == w) & records.responded).sum()) for w in weeks
        )
        rows.append({"period": f"m{mi}", "domain": domain or "all",
                     "class": class_name, "estimate": est_m, "variance": var_m,
                     "n_respondents": n_resp})
    emit_report(rows, args.out)
    print(f"{quarter}: weekly and monthly estimates -> {args.out}")
    return EXIT_OK


def _load_schema(path: str) -> PopulationSchema:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    feats = data.get("features", {})
    schema = FeatureSchema(
        names=tuple(feats.get("names", ())),
        kinds=tuple(feats.get("kinds", ())),
        categories={k: tuple(v) for k, v in feats.get("categories", {}).items()},
    )
    return PopulationSchema(
        features=schema,
        id_column=data.get("id_column", "id"),
        y_column=data.get("y_column", "y"),
        admin_column=data.get("admin_column"),
        domain_columns=tuple(data.get("domain_columns", ())),
    )


def _cmd_relative_efficiency(args, cfg: RunConfig) -> int:
    schema = _load_schema(args.schema)
    prev_pop = ingest_population(args.prev_pop, schema)
    cur_pop = ingest_population(args.cur_pop, schema)
    design_spec = cfg.get("design")
    if design_spec is None:
        raise ConfigError("config key 'design' is required")
    variables = cfg.get("variables")
    features = cfg.get("features")
    if not variables or not features:
        raise ConfigError("config keys 'variables' and 'features' are required")
    model = TrainSpec.from_dict(cfg.get("predictor", {"kind": "ols", "weight": "design"}))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    prev_sample = design_from_spec(prev_pop, design_spec).draw(int(cfg.get("seed_prev", 1)))
    cur_sample = design_from_spec(cur_pop, design_spec).draw(int(cfg.get("seed_cur", 2)))
    spec = RelativeEfficiencySpec(
        variables=tuple(variables), features=tuple(features), model=model,
    )
    rows = run_relative_efficiency(prev_sample, cur_sample, cur_pop, spec, rng_seed=seed)
    emit_report(rows, args.out)
    n_better = sum(1 for r in rows if r["quotient"] < 1)
    print(f"{n_better} of {len(rows)} variables favour the pretrained estimator "
          f"-> {args.out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="survinfer",
        description="Design-based predictive inference toolkit for survey statistics",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker hint; schedules are deterministic regardless")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate-srb", parents=[common],
                       help="replicated MSE study on the synthetic linear population")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate_srb)

    p = sub.add_parser("edit-score", parents=[common],
                       help="selective-editing scores for a collection batch")
    p.add_argument("--historic", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_edit_score)

    p = sub.add_parser("early-estimate", parents=[common],
                       help="early totals from a partially collected period")
    p.add_argument("--panel", required=True)
    p.add_argument("--period", required=True)
    p.add_argument("--tau", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_early_estimate)

    p = sub.add_parser("admin-select", parents=[common],
                       help="survey/model unit selection from an admin panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="also emit quantile diagnostics CSV")
    p.set_defaults(func=_cmd_admin_select)

    p = sub.add_parser("time-disaggregate", parents=[common],
                       help="weekly and monthly estimates from a quarterly panel")
    p.add_argument("--panel", required=True)
    p.add_argument("--margins", help="calibration margins CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_time_disaggregate)

    p = sub.add_parser("relative-efficiency", parents=[common],
                       help="pretrained prediction estimator vs HT, per variable")
    p.add_argument("--prev-pop", required=True)
    p.add_argument("--cur-pop", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_relative_efficiency)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.subcommand)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
