import logging
import math

import numpy as np
import pytest

from fp_estim.core import (
    DataType,
    EmuObservation,
    ObservationKind,
    PopulationGroup,
    SurveyObservation,
)
from fp_estim.countryfit import MODE_SURVEY_EMU, MODE_SURVEY_ONLY, fit_country
from fp_estim.hypertrain import default_hyperparameters
from fp_estim.mcmc import SamplerConfig
from fp_estim.validate import (
    CaseResult,
    MetricRow,
    ModeTrajectory,
    PairingError,
    ValidationCase,
    build_cases,
    build_report,
    case_year_range,
    export_roc_comparison,
    impact_analysis,
    metrics,
    predictive_interval,
    run_validation,
    write_cases_csv,
    write_impact_csv,
    write_report_csv,
    write_roc_csv,
)

MWRA = PopulationGroup.MWRA
UWRA = PopulationGroup.UWRA


def survey(year, value, se=0.015, country="AA", group=MWRA, source="DHS"):
    return SurveyObservation(
        country_id=country, group=group, year=year, value=value, se=se, source_id=source
    )


def rate(year, value, sd, country="AA", dtype=DataType.EMU_CLIENTS, groups=None, selected=True):
    return EmuObservation(
        country_id=country,
        data_type=dtype,
        year=year,
        kind=ObservationKind.RATE,
        value=value,
        sd=sd,
        target_groups=groups or frozenset({MWRA}),
        selected=selected,
    )


@pytest.fixture(scope="module")
def small_fit():
    surveys = [survey(2010, 0.20, country="KE"), survey(2013, 0.26, country="KE")]
    config = SamplerConfig(n_chains=4, n_warmup=800, n_samples=800, seed=21)
    return fit_country(
        surveys, [], default_hyperparameters(), MODE_SURVEY_ONLY, (2010, 2016), config
    )


class TestBuildCases:
    def test_holds_out_most_recent(self):
        surveys = [
            survey(2008, 0.18),
            survey(2014, 0.24),
            survey(2011, 0.21),
        ]
        cases = build_cases(surveys)
        assert len(cases) == 1
        case = cases[0]
        assert case.held_out.year == 2014
        assert [s.year for s in case.training] == [2008, 2011]

    def test_single_survey_skipped(self, caplog):
        surveys = [survey(2008, 0.18), survey(2014, 0.24), survey(2012, 0.3, country="BB")]
        with caplog.at_level(logging.INFO, logger="fp_estim.validate"):
            cases = build_cases(surveys)
        assert [c.country_id for c in cases] == ["AA"]
        assert any("BB/MWRA skipped" in r.getMessage() for r in caplog.records)

    def test_tied_latest_year_skipped(self, caplog):
        surveys = [
            survey(2008, 0.18),
            survey(2014, 0.24, source="DHS"),
            survey(2014, 0.26, source="MICS"),
        ]
        with caplog.at_level(logging.INFO, logger="fp_estim.validate"):
            cases = build_cases(surveys)
        assert cases == []
        assert any("tie" in r.message for r in caplog.records)

    def test_emu_attached_per_group(self):
        surveys = [survey(2008, 0.18), survey(2014, 0.24)]
        emu = [rate(2012, 0.012, 0.004), rate(2013, 0.011, 0.004)]
        cases = build_cases(surveys, emu)
        assert len(cases[0].emu) == 2

    def test_post_holdout_rates_kept_by_default_dropped_on_request(self):
        surveys = [survey(2008, 0.18), survey(2014, 0.24)]
        emu = [rate(2012, 0.012, 0.004), rate(2016, 0.011, 0.004)]
        default = build_cases(surveys, emu)
        truncated = build_cases(surveys, emu, pre_survey_only=True)
        assert [r.year for r in default[0].emu] == [2012, 2016]
        assert [r.year for r in truncated[0].emu] == [2012]

    def test_cases_sorted_by_country_then_group(self):
        surveys = [
            survey(2008, 0.18, country="ZZ"),
            survey(2014, 0.24, country="ZZ"),
            survey(2008, 0.28, country="AA", group=UWRA),
            survey(2014, 0.34, country="AA", group=UWRA),
            survey(2008, 0.18, country="AA"),
            survey(2014, 0.24, country="AA"),
        ]
        cases = build_cases(surveys)
        assert [(c.country_id, c.group) for c in cases] == [
            ("AA", MWRA),
            ("AA", UWRA),
            ("ZZ", MWRA),
        ]

    def test_training_after_holdout_rejected(self):
        with pytest.raises(ValueError, match="most recent"):
            ValidationCase(
                country_id="AA",
                group=MWRA,
                held_out=survey(2010, 0.2),
                training=(survey(2012, 0.22),),
                emu=(),
            )


class TestCaseYearRange:
    def test_spans_training_and_holdout(self):
        case = build_cases([survey(2008.3, 0.18), survey(2014.6, 0.24)])[0]
        assert case_year_range(case) == (2008, 2015)

    def test_emu_extends_range(self):
        surveys = [survey(2010, 0.18), survey(2014, 0.24)]
        emu = [rate(2009, 0.01, 0.004), rate(2016, 0.01, 0.004)]
        case = build_cases(surveys, emu)[0]
        # a rate at 2009 measures the step from 2008
        assert case_year_range(case) == (2008, 2016)


class TestPredictiveInterval:
    def test_deterministic(self, small_fit):
        held = survey(2015, 0.29, se=0.02, country="KE")
        assert predictive_interval(small_fit, held) == predictive_interval(
            small_fit, held
        )

    def test_wider_than_trajectory_interval(self, small_fit):
        held = survey(2015, 0.29, se=0.03, country="KE")
        lo, hi = predictive_interval(small_fit, held)
        rho = small_fit.rho_draws(2015)
        t_lo, t_hi = np.percentile(rho, [2.5, 97.5])
        assert lo < t_lo
        assert hi > t_hi

    def test_widens_with_survey_se(self, small_fit):
        narrow = predictive_interval(small_fit, survey(2015, 0.29, se=0.005, country="KE"))
        wide = predictive_interval(small_fit, survey(2015, 0.29, se=0.05, country="KE"))
        assert wide[1] - wide[0] > narrow[1] - narrow[0]

    def test_interval_brackets_median(self, small_fit):
        held = survey(2015, 0.29, se=0.02, country="KE")
        lo, hi = predictive_interval(small_fit, held)
        med = float(np.median(small_fit.rho_draws(2015)))
        assert lo < med < hi


class TestMetrics:
    def test_symmetric_errors(self):
        out = metrics([1.0, -1.0], [True, True])
        assert out == {"n": 2, "coverage": 100.0, "me": 0.0, "mae": 1.0, "rmse": 1.0}

    def test_mixed_fixture(self):
        out = metrics([3.0, 4.0], [True, False])
        assert out["n"] == 2
        assert out["coverage"] == 50.0
        assert out["me"] == 3.5
        assert out["mae"] == 3.5
        assert out["rmse"] == pytest.approx(math.sqrt(12.5))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics([1.0], [True, False])

    def test_ordering_property(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            errs = rng.normal(0.0, 3.0, size=rng.integers(1, 40))
            hits = rng.random(errs.size) < 0.9
            out = metrics(list(errs), list(hits))
            assert out["rmse"] >= out["mae"] - 1e-12
            assert out["mae"] >= abs(out["me"]) - 1e-12


class TestCaseResult:
    def test_error_sign_means_underprediction(self):
        c = CaseResult("AA", MWRA, MODE_SURVEY_ONLY, 2014, 0.24, 0.21, 0.15, 0.30)
        assert c.error_pp == pytest.approx(3.0)
        assert c.hit

    def test_hit_boundaries_inclusive(self):
        c = CaseResult("AA", MWRA, MODE_SURVEY_ONLY, 2014, 0.30, 0.21, 0.15, 0.30)
        assert c.hit
        c = CaseResult("AA", MWRA, MODE_SURVEY_ONLY, 2014, 0.31, 0.21, 0.15, 0.30)
        assert not c.hit


class TestRunValidation:
    SURVEYS = [
        survey(2009, 0.20, country="AA"),
        survey(2012, 0.24, country="AA"),
        survey(2009, 0.30, country="BB"),
        survey(2012, 0.33, country="BB"),
    ]
    CONFIG = SamplerConfig(n_chains=4, n_warmup=600, n_samples=600, seed=14)

    def test_empty_emu_arms_are_identical(self):
        outcome = run_validation(
            self.SURVEYS, [], default_hyperparameters(), self.CONFIG
        )
        assert len(outcome.cases) == 4
        by_mode = {}
        for c in outcome.cases:
            by_mode.setdefault(c.country_id, {})[c.mode] = c
        for country, arms in by_mode.items():
            so = arms[MODE_SURVEY_ONLY]
            em = arms[MODE_SURVEY_EMU]
            assert so.predicted == em.predicted
            assert (so.lo95, so.hi95) == (em.lo95, em.hi95)
        assert sum("no EMU rates attached" in w for w in outcome.warnings) == 2

    def test_parallel_matches_serial(self):
        serial = run_validation(
            self.SURVEYS, [], default_hyperparameters(), self.CONFIG, jobs=1
        )
        parallel = run_validation(
            self.SURVEYS, [], default_hyperparameters(), self.CONFIG, jobs=2
        )
        assert serial.cases == parallel.cases
        assert serial.rows == parallel.rows

    def test_no_eligible_cases_rejected(self):
        with pytest.raises(ValueError, match="enough surveys"):
            run_validation(
                [survey(2012, 0.2)], [], default_hyperparameters(), self.CONFIG
            )


class TestBuildReport:
    def _case(self, country, group, mode, error_pp, hit):
        predicted = 0.25
        held = predicted + error_pp / 100.0
        lo, hi = (0.0, 1.0) if hit else (0.9, 0.95)
        return CaseResult(country, group, mode, 2014, held, predicted, lo, hi)

    def test_cells_and_order(self):
        cases = [
            self._case("AA", UWRA, MODE_SURVEY_EMU, 2.0, True),
            self._case("AA", MWRA, MODE_SURVEY_EMU, 3.0, True),
            self._case("BB", MWRA, MODE_SURVEY_EMU, 4.0, False),
            self._case("AA", MWRA, MODE_SURVEY_ONLY, 1.0, True),
            self._case("BB", MWRA, MODE_SURVEY_ONLY, -1.0, True),
        ]
        rows = build_report(cases)
        assert [(r.group, r.model) for r in rows] == [
            (MWRA, MODE_SURVEY_ONLY),
            (MWRA, MODE_SURVEY_EMU),
            (UWRA, MODE_SURVEY_EMU),
        ]
        emu_married = rows[1]
        assert emu_married.n == 2
        assert emu_married.coverage == 50.0
        assert emu_married.me == pytest.approx(3.5)
        assert emu_married.rmse == pytest.approx(math.sqrt(12.5))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_report([])


class TestReportCsv:
    def test_layout(self, tmp_path):
        rows = [
            MetricRow(MWRA, MODE_SURVEY_ONLY, 23, 95.65217, 0.104, 2.799, 3.5011),
            MetricRow(UWRA, MODE_SURVEY_EMU, 9, 100.0, -0.5, 1.25, 1.5),
        ]
        path = tmp_path / "report.csv"
        write_report_csv(rows, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "group,model,n,coverage,me,mae,rmse"
        assert lines[1] == "Married,Survey-only,23,95.7,0.10,2.80,3.50"
        assert lines[2] == "Unmarried,Survey+EMU,9,100.0,-0.50,1.25,1.50"


class TestCasesCsv:
    def test_layout_and_order(self, tmp_path):
        cases = [
            CaseResult("BB", MWRA, MODE_SURVEY_ONLY, 2014, 0.24, 0.21, 0.15, 0.30),
            CaseResult("AA", MWRA, MODE_SURVEY_ONLY, 2014.5, 0.24, 0.26, 0.25, 0.30),
        ]
        path = tmp_path / "cases.csv"
        write_cases_csv(cases, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == (
            "country_id,group,model,held_out_year,held_out_value,"
            "predicted_median,lo95,hi95,error_pp,inside"
        )
        assert lines[1] == (
            "AA,MWRA,survey-only,2014.5,0.240000,0.260000,0.250000,0.300000,-2.0000,0"
        )
        assert lines[2] == (
            "BB,MWRA,survey-only,2014,0.240000,0.210000,0.150000,0.300000,3.0000,1"
        )


def trajectory(country="AA", mode=MODE_SURVEY_ONLY, median=(0.20, 0.22, 0.24),
               seed=7, dtype=DataType.EMU_CLIENTS, group=MWRA):
    years = tuple(range(2010, 2010 + len(median)))
    return ModeTrajectory(
        country_id=country,
        group=group,
        mode=mode,
        years=years,
        median=tuple(median),
        lo95=tuple(m - 0.05 for m in median),
        hi95=tuple(m + 0.05 for m in median),
        data_type=dtype,
        seed=seed,
    )


class TestImpactAnalysis:
    def test_identical_arms_give_zero(self):
        pair = [
            trajectory(mode=MODE_SURVEY_ONLY),
            trajectory(mode=MODE_SURVEY_EMU),
        ]
        pair_rows, agg_rows = impact_analysis(pair, 2012)
        assert pair_rows[0]["diff_pp"] == 0.0
        assert pair_rows[0]["ci_width_diff_pp"] == 0.0
        assert agg_rows == [
            {
                "group": "MWRA",
                "data_type": "EMU-clients",
                "n": 1,
                "min_pp": 0.0,
                "median_pp": 0.0,
                "max_pp": 0.0,
            }
        ]

    def test_difference_in_percentage_points(self):
        pair = [
            trajectory(mode=MODE_SURVEY_ONLY, median=(0.20, 0.22, 0.24)),
            trajectory(mode=MODE_SURVEY_EMU, median=(0.20, 0.23, 0.27)),
        ]
        pair_rows, _ = impact_analysis(pair, 2012)
        assert pair_rows[0]["diff_pp"] == pytest.approx(3.0)

    def test_unknown_type_labelled_none(self):
        pair = [
            trajectory(mode=MODE_SURVEY_ONLY, dtype=None),
            trajectory(mode=MODE_SURVEY_EMU, dtype=None),
        ]
        pair_rows, agg_rows = impact_analysis(pair, 2011)
        assert pair_rows[0]["data_type"] == "none"
        assert agg_rows[0]["data_type"] == "none"

    def test_duplicate_mode_rejected(self):
        with pytest.raises(PairingError, match="duplicate"):
            impact_analysis(
                [trajectory(), trajectory(), trajectory(mode=MODE_SURVEY_EMU)], 2011
            )

    def test_missing_mode_rejected(self):
        with pytest.raises(PairingError, match="missing"):
            impact_analysis([trajectory(mode=MODE_SURVEY_EMU)], 2011)

    def test_seed_mismatch_rejected(self):
        with pytest.raises(PairingError, match="different seeds"):
            impact_analysis(
                [trajectory(seed=7), trajectory(mode=MODE_SURVEY_EMU, seed=8)], 2011
            )

    def test_target_year_outside_grid_rejected(self):
        with pytest.raises(PairingError, match="outside fitted grid"):
            impact_analysis(
                [trajectory(), trajectory(mode=MODE_SURVEY_EMU)], 2031
            )

    def test_aggregates_per_group_and_type(self):
        trajs = []
        for country, shift in (("AA", 0.01), ("BB", 0.03), ("CC", -0.01)):
            trajs.append(trajectory(country=country))
            trajs.append(
                trajectory(
                    country=country,
                    mode=MODE_SURVEY_EMU,
                    median=tuple(m + shift for m in (0.20, 0.22, 0.24)),
                )
            )
        _, agg_rows = impact_analysis(trajs, 2012)
        assert len(agg_rows) == 1
        agg = agg_rows[0]
        assert agg["n"] == 3
        assert agg["min_pp"] == pytest.approx(-1.0)
        assert agg["median_pp"] == pytest.approx(1.0)
        assert agg["max_pp"] == pytest.approx(3.0)


class TestImpactCsv:
    def test_pair_then_aggregate_rows(self, tmp_path):
        pair = [
            trajectory(mode=MODE_SURVEY_ONLY, median=(0.20, 0.22, 0.24)),
            trajectory(mode=MODE_SURVEY_EMU, median=(0.20, 0.23, 0.27)),
        ]
        pair_rows, agg_rows = impact_analysis(pair, 2012)
        path = tmp_path / "impact.csv"
        write_impact_csv(pair_rows, agg_rows, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == (
            "scope,country_id,group,data_type,diff_pp,ci_width_diff_pp,"
            "n,min_pp,median_pp,max_pp"
        )
        assert lines[1] == "pair,AA,MWRA,EMU-clients,3.0000,0.0000,,,,"
        assert lines[2] == "aggregate,,MWRA,EMU-clients,,,1,3.0000,3.0000,3.0000"


class TestModeTrajectory:
    def test_from_fit(self, small_fit):
        traj = ModeTrajectory.from_fit(small_fit)
        assert traj.country_id == "KE"
        assert traj.mode == MODE_SURVEY_ONLY
        assert traj.years == tuple(range(2010, 2017))
        assert traj.median == tuple(float(v) for v in small_fit.rho_median)
        assert traj.data_type is None
        assert traj.seed == small_fit.seed


class TestRocExport:
    def test_bounds_and_join(self):
        rates = [rate(2015, 0.02, 0.01)]
        rows = export_roc_comparison(rates, {"AA": {2015: 0.018}})
        assert len(rows) == 1
        row = rows[0]
        assert row["lo95"] == pytest.approx(0.0004)
        assert row["hi95"] == pytest.approx(0.0396)
        assert row["drho"] == pytest.approx(0.018)

    def test_unmatched_rates_dropped(self):
        rates = [rate(2015, 0.02, 0.01), rate(2016, 0.01, 0.01)]
        rows = export_roc_comparison(rates, {"AA": {2015: 0.018}})
        assert [r["year"] for r in rows] == [2015]
        assert export_roc_comparison(rates, {}) == []

    def test_survey_year_filter_is_strict(self):
        rates = [rate(2014, 0.02, 0.01), rate(2015, 0.02, 0.01)]
        estimates = {"AA": {2014: 0.01, 2015: 0.01}}
        rows = export_roc_comparison(rates, estimates, {"AA": 2015})
        assert [r["year"] for r in rows] == [2014]
        assert export_roc_comparison(rates, estimates, {}) == []

    def test_level_observation_rejected(self):
        obs = EmuObservation(
            country_id="AA",
            data_type=DataType.EMU_CLIENTS,
            year=2015,
            kind=ObservationKind.LEVEL,
            value=0.3,
            sd=0.01,
            target_groups=frozenset({MWRA}),
            selected=True,
        )
        with pytest.raises(ValueError, match="rate"):
            export_roc_comparison([obs], {"AA": {2015: 0.01}})

    def test_sorted_by_country_type_year(self):
        rates = [
            rate(2016, 0.01, 0.01, country="BB"),
            rate(2015, 0.01, 0.01, country="AA", dtype=DataType.FP_USERS),
            rate(2016, 0.01, 0.01, country="AA", dtype=DataType.FP_USERS),
            rate(2015, 0.01, 0.01, country="AA", dtype=DataType.EMU_CLIENTS),
        ]
        estimates = {
            "AA": {2015: 0.01, 2016: 0.01},
            "BB": {2016: 0.02},
        }
        rows = export_roc_comparison(rates, estimates)
        assert [(r["country_id"], int(r["data_type"]), r["year"]) for r in rows] == [
            ("AA", 1, 2015),
            ("AA", 4, 2015),
            ("AA", 4, 2016),
            ("BB", 1, 2016),
        ]

    def test_csv_layout(self, tmp_path):
        rows = export_roc_comparison([rate(2015, 0.02, 0.01)], {"AA": {2015: 0.018}})
        path = tmp_path / "roc.csv"
        write_roc_csv(rows, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "country_id,data_type,year,dz,s,lo95,hi95,drho"
        assert lines[1] == (
            "AA,EMU-clients,2015,0.020000,0.010000,0.000400,0.039600,0.018000"
        )

    def test_empty_join_writes_header_only(self, tmp_path):
        path = tmp_path / "roc.csv"
        write_roc_csv([], path)
        assert path.read_text(encoding="utf-8") == (
            "country_id,data_type,year,dz,s,lo95,hi95,drho\n"
        )
