import numpy as np
import pytest

from survinfer.adminframe import (
    MODEL,
    SURVEY,
    AdminDataError,
    AdminPanel,
    CriteriaParams,
    admin_panel_from_csv,
    criteria_scores,
    elbow_threshold,
    quantile_diagnostics,
    synthetic_values,
)
from survinfer.predictors import TrainSpec
from survinfer.quantiles import weighted_nearest_rank_quantile

from admin_fixture import build_admin_fixture, expected_survey_ids


def brute_force_elbow(scores: np.ndarray) -> float:
    """Independent max-distance-to-chord search on the normalized curve."""
    s = np.sort(np.asarray(scores, dtype=float))[::-1]
    m = len(s)
    x = np.arange(m) / (m - 1)
    y = (s - s[-1]) / (s[0] - s[-1])
    # distance from each point to the segment (0,1)-(1,0), brute force
    d = np.abs(x + y - 1.0) / np.sqrt(2.0)
    best = d.max()
    ties = [i for i in range(m) if d[i] == best]
    return float(s[ties[-1]])


def small_panel(n=6, periods=9, seed=0, **overrides):
    rng = np.random.default_rng(seed)
    y_stat = rng.uniform(10, 30, (n, periods))
    defaults = dict(
        ids=[f"u{i}" for i in range(n)],
        periods=[f"p{j}" for j in range(periods)],
        y_adm=y_stat.copy(),
        y_stat=y_stat,
        omega=np.full((n, periods), 2.0),
        domain=np.array(["d0"] * n),
    )
    defaults.update(overrides)
    return AdminPanel(**defaults)


class TestElbow:
    def test_single_outlier(self):
        thr = elbow_threshold([0.0, 0.0, 0.0, 10.0])
        scores = np.array([0.0, 0.0, 0.0, 10.0])
        assert (scores > thr).sum() == 1
        assert scores[scores > thr][0] == 10.0

    def test_linear_ramp_degenerate_selects_more(self):
        scores = np.arange(1.0, 11.0)
        thr = elbow_threshold(scores)
        # all chord distances vanish; conservative tie-break picks the
        # smallest threshold, keeping all but the bottom value
        assert thr == 1.0
        assert (scores > thr).sum() == 9

    def test_all_equal_selects_nobody(self):
        thr = elbow_threshold([4.0, 4.0, 4.0, 4.0])
        assert thr == np.inf

    def test_fewer_than_three_scores_rejected(self):
        with pytest.raises(AdminDataError, match=">= 3"):
            elbow_threshold([1.0, 2.0])

    def test_piecewise_kink_found(self):
        # sharp kink at index 30 of the descending curve
        scores = np.concatenate([np.linspace(100, 90, 30),
                                 np.linspace(10, 0, 70)])
        thr = elbow_threshold(scores)
        assert thr == brute_force_elbow(scores)
        assert (np.asarray(scores) > thr).sum() == 30

    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            scores = rng.lognormal(0, 1.5, rng.integers(5, 60))
            if len(np.unique(scores)) < 3:
                continue
            assert elbow_threshold(scores) == brute_force_elbow(scores)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.lognormal(0, 1, 40)
        thr = elbow_threshold(scores)
        selected = scores > thr
        for a, b in [(3.0, 0.0), (0.5, 10.0), (7.0, -2.0)]:
            thr2 = elbow_threshold(a * scores + b)
            assert np.array_equal(a * scores + b > thr2, selected)


class TestCriteria:
    def test_zero_admin_value_selects_c6(self):
        panel = small_panel()
        panel.y_adm[2, 3] = 0.0
        scores = criteria_scores(panel)
        assert scores.selected["c6"][2]
        assert scores.flag[2] == SURVEY

    def test_constant_weighted_value_zero_variability(self):
        panel = small_panel()
        panel.y_stat[:] = 15.0
        panel.y_adm[:] = 15.0
        scores = criteria_scores(panel)
        assert np.allclose(scores.scores["c3"], 0.0)
        assert not scores.selected["c3"].any()

    def test_weight_one_always_selected_regardless_of_frame(self):
        panel = small_panel()
        panel.omega[1, :] = 1.0
        panel.frame_turnover[1] = 0.0
        scores = criteria_scores(panel)
        assert scores.selected["c2"][1]
        assert scores.flag[1] == SURVEY

    def test_big_frame_turnover_selected(self):
        panel = small_panel(frame_turnover=np.array([0, 0, 2e7, 0, 0, 0.0]))
        scores = criteria_scores(panel)
        assert scores.selected["c2"][2]

    def test_data_gap_conservative(self):
        panel = small_panel()
        panel.y_stat[4, 7] = np.nan
        scores = criteria_scores(panel)
        assert scores.flag[4] == SURVEY
        assert "gap" in scores.reasons[4]

    def test_needs_exactly_nine_periods(self):
        panel = small_panel(periods=8)
        with pytest.raises(AdminDataError, match="9"):
            criteria_scores(panel)

    def test_flags_partition_in_frame_units(self):
        panel, groups = build_admin_fixture()
        scores = criteria_scores(panel)
        assert all(f in (SURVEY, MODEL) for f in scores.flag)
        survey_mask = np.array([f == SURVEY for f in scores.flag])
        union = np.zeros(panel.n_units, dtype=bool)
        for crit, sel in scores.selected.items():
            assert not (sel & ~survey_mask).any()  # selection implies survey
            union |= sel
        assert np.array_equal(union, survey_mask)  # no data gaps here

    def test_fixture_reproduces_published_counts(self):
        panel, groups = build_admin_fixture()
        scores = criteria_scores(panel)
        assert scores.n_survey == 2320
        assert scores.n_model == 2961
        survey_idx = {i for i, f in enumerate(scores.flag) if f == SURVEY}
        assert survey_idx == expected_survey_ids(groups)

    def test_out_of_frame_excluded_from_partition(self):
        panel = small_panel(in_frame=np.array([True, True, False, True, True, True]))
        scores = criteria_scores(panel)
        assert scores.flag[2] == "out_of_frame"
        assert scores.n_survey + scores.n_model == 5


class TestSyntheticValues:
    def _panel_with_current(self, ratio=1.0, seed=3, n=40):
        rng = np.random.default_rng(seed)
        y_adm = rng.uniform(50, 150, (n, 9))
        y_stat = ratio * y_adm
        current = rng.uniform(50, 150, n)
        return AdminPanel(
            ids=[f"u{i}" for i in range(n)],
            periods=[f"p{j}" for j in range(9)],
            y_adm=y_adm, y_stat=y_stat,
            omega=np.full((n, 9), 2.0),
            domain=np.array(["d0"] * n),
            current_period="p9", current_y_adm=current,
        )

    def test_identity_relation_recovered(self):
        panel = self._panel_with_current(ratio=1.0)
        preds = synthetic_values(panel, TrainSpec(kind="ols"), rng_seed=1)
        assert preds  # some units are model-reporting
        for uid, value in preds.items():
            i = panel.ids.index(uid)
            assert value == pytest.approx(panel.current_y_adm[i], rel=1e-6)

    def test_systematic_ratio_recovered(self):
        panel = self._panel_with_current(ratio=1.1, seed=4)
        preds = synthetic_values(panel, TrainSpec(kind="ols"), rng_seed=1)
        for uid, value in preds.items():
            i = panel.ids.index(uid)
            assert value / panel.current_y_adm[i] == pytest.approx(1.1, rel=1e-6)

    def test_zero_admin_unit_never_predicted(self):
        panel = self._panel_with_current(seed=5)
        panel.y_adm[3, 2] = 0.0  # C6 -> survey-reporting
        preds = synthetic_values(panel, TrainSpec(kind="ols"), rng_seed=1)
        assert panel.ids[3] not in preds

    def test_requires_current_values(self):
        panel = small_panel()
        with pytest.raises(AdminDataError, match="current"):
            synthetic_values(panel, TrainSpec(kind="ols"))


class TestQuantileDiagnostics:
    def test_identical_sources_on_diagonal(self):
        panel = small_panel(seed=6)
        rows = quantile_diagnostics(panel, panel.periods[0], level="sample")
        for row in rows:
            assert row["q_survey"] == row["q_admin"]

    def test_doubled_admin_population_slope_two(self):
        panel = small_panel(seed=7)
        panel.y_adm[:] = 2.0 * panel.y_stat
        rows = quantile_diagnostics(panel, panel.periods[3], level="population")
        for row in rows:
            assert row["q_admin"] == pytest.approx(2.0 * row["q_survey"], rel=1e-12)

    def test_weighted_quantile_matches_expansion_oracle(self):
        # integer weights: replicate each unit omega times, take the plain
        # nearest-rank quantile of the expanded sample
        rng = np.random.default_rng(8)
        values = rng.uniform(0, 100, 25)
        weights = rng.integers(1, 6, 25).astype(float)
        expanded = np.repeat(values, weights.astype(int))
        for p in (0.1, 0.25, 0.5, 0.75, 0.9):
            ours = weighted_nearest_rank_quantile(values, weights, p)
            oracle = np.sort(expanded)[int(np.ceil(p * len(expanded))) - 1]
            assert ours == pytest.approx(oracle)

    def test_empty_intersection_rejected(self):
        panel = small_panel(seed=9)
        panel.y_adm[:, 0] = np.nan
        with pytest.raises(AdminDataError, match="both sources"):
            quantile_diagnostics(panel, panel.periods[0])


class TestCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "admin.csv"
        lines = ["id,period,y_adm,y_stat,omega,domain,frame_turnover"]
        for i in range(3):
            for j in range(9):
                lines.append(f"u{i},p{j},{10 + i + j},{10 + i + j},2,d0,1000")
            lines.append(f"u{i},p9,{20 + i},,,d0,1000")
        path.write_text("\n".join(lines) + "\n")
        panel = admin_panel_from_csv(path, current_period="p9")
        assert panel.n_units == 3
        assert len(panel.periods) == 9
        assert panel.current_y_adm.tolist() == [20.0, 21.0, 22.0]
        scores = criteria_scores(panel)
        assert len(scores.flag) == 3
