import math

import numpy as np
import pytest
from scipy import integrate

from fp_estim.core import (
    DataType,
    EmuObservation,
    HyperEstimates,
    ObservationKind,
    ParseError,
    PopulationGroup,
    SurveyObservation,
    TypeEstimate,
    combined_sd,
    delta_method_se,
    derive_seed,
    half_cauchy_logpdf,
    inverse_logit,
    logit,
    normal_logpdf,
    parse_field,
    rate_of_change,
    read_delimited,
)


def make_level(year, value, sd, country="A", dtype=DataType.EMU_CLIENTS):
    return EmuObservation(
        country_id=country,
        data_type=dtype,
        year=year,
        kind=ObservationKind.LEVEL,
        value=value,
        sd=sd,
        target_groups=frozenset({PopulationGroup.MWRA}),
    )


class TestLogit:
    def test_symmetry_point(self):
        assert logit(0.5) == 0.0

    def test_quarter(self):
        assert logit(0.25) == pytest.approx(-1.0986122886681098, abs=1e-12)

    def test_round_trip(self):
        assert inverse_logit(logit(0.731)) == pytest.approx(0.731, abs=1e-12)

    def test_round_trip_grid(self):
        p = np.linspace(0.001, 0.999, 211)
        assert np.max(np.abs(inverse_logit(logit(p)) - p)) < 1e-12

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.1])
    def test_domain(self, bad):
        with pytest.raises(ValueError):
            logit(bad)

    def test_inverse_logit_extremes(self):
        # must not overflow for large |x|
        assert inverse_logit(800.0) == pytest.approx(1.0)
        assert inverse_logit(-800.0) == pytest.approx(0.0)


class TestDeltaMethodSe:
    def test_half(self):
        assert delta_method_se(0.5, 0.01) == pytest.approx(0.04, rel=1e-12)

    def test_fifth(self):
        assert delta_method_se(0.2, 0.016) == pytest.approx(0.1, rel=1e-12)

    def test_zero_se_rejected(self):
        with pytest.raises(ValueError):
            delta_method_se(0.5, 0.0)

    @pytest.mark.parametrize("bad", [0.0, 1.0])
    def test_domain(self, bad):
        with pytest.raises(ValueError):
            delta_method_se(bad, 0.01)


class TestCombinedSd:
    def test_zero_latent_is_identity(self):
        assert combined_sd(0.02, 0.0) == 0.02

    def test_degenerate(self):
        assert combined_sd(0.0, 0.0) == 0.0

    def test_closed_form(self):
        assert combined_sd(0.02, 0.01) == pytest.approx(0.022360679774997897, abs=1e-15)

    def test_symmetric_and_monotone(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a, b, eps = rng.uniform(0.0, 0.5, size=3)
            assert combined_sd(a, b) == combined_sd(b, a)
            assert combined_sd(a, 0.0) == a
            assert combined_sd(a + eps, b) >= combined_sd(a, b)
            assert combined_sd(a, b + eps) >= combined_sd(a, b)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            combined_sd(-0.01, 0.02)


class TestHalfCauchy:
    def test_at_origin(self):
        assert half_cauchy_logpdf(0.0, 1.0) == pytest.approx(-0.4515827052894548, abs=1e-12)

    def test_at_one(self):
        assert half_cauchy_logpdf(1.0, 1.0) == pytest.approx(-1.1447298858494002, abs=1e-12)

    def test_outside_support(self):
        assert half_cauchy_logpdf(-0.1, 1.0) == -math.inf

    @pytest.mark.parametrize("scale", [0.05, 1.0, 2.5])
    def test_integrates_to_one(self, scale):
        total, _ = integrate.quad(
            lambda x: math.exp(half_cauchy_logpdf(x, scale)), 0.0, np.inf
        )
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_vectorized(self):
        x = np.array([-1.0, 0.0, 1.0])
        out = half_cauchy_logpdf(x, 1.0)
        assert out[0] == -math.inf
        assert out[1] == pytest.approx(-0.4515827052894548)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            half_cauchy_logpdf(0.5, 0.0)


class TestNormalLogpdf:
    def test_standard_at_zero(self):
        assert normal_logpdf(0.0, 0.0, 1.0) == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_general(self):
        assert normal_logpdf(1.3, 0.5, 0.2) == pytest.approx(-7.309500620770572, abs=1e-10)

    def test_degenerate_sd(self):
        assert normal_logpdf(0.0, 0.0, 0.0) == -math.inf
        assert normal_logpdf(0.0, 0.0, -1.0) == -math.inf

    def test_vectorized_mixed_sd(self):
        out = normal_logpdf(np.zeros(3), 0.0, np.array([1.0, 0.0, 2.0]))
        assert np.isneginf(out[1])
        assert np.isfinite(out[[0, 2]]).all()


class TestRateOfChange:
    def test_consecutive_pair(self):
        levels = [make_level(2019, 0.20, 0.01), make_level(2020, 0.23, 0.01)]
        rates = rate_of_change(levels)
        assert len(rates) == 1
        r = rates[0]
        assert r.kind is ObservationKind.RATE
        assert r.year == 2020
        assert r.value == pytest.approx(0.03, abs=1e-15)
        assert r.sd == pytest.approx(0.01414213562373095, abs=1e-15)
        assert r.country_id == "A"
        assert r.data_type is DataType.EMU_CLIENTS

    def test_single_point(self):
        assert rate_of_change([make_level(2019, 0.20, 0.01)]) == []

    def test_gap_excluded(self):
        levels = [make_level(2018, 0.20, 0.01), make_level(2020, 0.24, 0.01)]
        assert rate_of_change(levels) == []

    def test_count_equals_consecutive_pairs(self):
        years = [2010, 2011, 2012, 2015, 2016, 2019]
        levels = [make_level(y, 0.2 + 0.001 * i, 0.01) for i, y in enumerate(years)]
        # consecutive pairs: (2010,2011), (2011,2012), (2015,2016)
        assert len(rate_of_change(levels)) == 3

    def test_empty(self):
        assert rate_of_change([]) == []

    def test_unsorted_rejected(self):
        levels = [make_level(2020, 0.23, 0.01), make_level(2019, 0.20, 0.01)]
        with pytest.raises(ValueError):
            rate_of_change(levels)

    def test_mixed_country_rejected(self):
        levels = [make_level(2019, 0.20, 0.01), make_level(2020, 0.23, 0.01, country="B")]
        with pytest.raises(ValueError):
            rate_of_change(levels)

    def test_rate_input_rejected(self):
        rate = EmuObservation(
            country_id="A",
            data_type=DataType.EMU_CLIENTS,
            year=2020,
            kind=ObservationKind.RATE,
            value=0.03,
            sd=0.01,
            target_groups=frozenset({PopulationGroup.MWRA}),
        )
        with pytest.raises(ValueError):
            rate_of_change([rate])


class TestObservationTypes:
    def test_level_bounds(self):
        with pytest.raises(ValueError):
            make_level(2019, 1.2, 0.01)
        with pytest.raises(ValueError):
            make_level(2019, -0.1, 0.01)

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            EmuObservation(
                country_id="A",
                data_type=DataType.FP_USERS,
                year=2020,
                kind=ObservationKind.RATE,
                value=1.5,
                sd=0.01,
                target_groups=frozenset({PopulationGroup.MWRA}),
            )

    def test_negative_sd(self):
        with pytest.raises(ValueError):
            make_level(2019, 0.2, -0.01)

    def test_empty_groups(self):
        with pytest.raises(ValueError):
            EmuObservation(
                country_id="A",
                data_type=DataType.EMU_CLIENTS,
                year=2019,
                kind=ObservationKind.LEVEL,
                value=0.2,
                sd=0.01,
                target_groups=frozenset(),
            )

    def test_survey_boundaries_rejected(self):
        for bad in (0.0, 1.0):
            with pytest.raises(ValueError):
                SurveyObservation("A", PopulationGroup.MWRA, 2019.0, bad, 0.01)

    def test_survey_se_positive(self):
        with pytest.raises(ValueError):
            SurveyObservation("A", PopulationGroup.MWRA, 2019.0, 0.3, 0.0)

    def test_survey_fractional_year(self):
        obs = SurveyObservation("A", PopulationGroup.MWRA, 2019.5, 0.3, 0.01)
        assert obs.year == 2019.5

    def test_data_type_labels(self):
        assert DataType.EMU_CLIENTS.label == "EMU-clients"
        assert DataType.EMU_FACILITIES.label == "EMU-facilities"
        assert DataType.FP_VISITS.label == "FP visits"
        assert DataType.FP_USERS.label == "FP users"
        assert [int(d) for d in DataType] == [1, 2, 3, 4]


class TestHyperEstimates:
    def make(self):
        types = {
            d: TypeEstimate(theta_hat=-3.5, theta_sd=0.3, ci_low=0.01, ci_high=0.06, n_obs=10)
            for d in DataType
        }
        return HyperEstimates(types=types, tau_hat=0.8)

    def test_prior_median_sigma(self):
        est = self.make()
        assert est.prior_median_sigma(DataType.FP_VISITS) == pytest.approx(math.exp(-3.5))

    def test_all_types_required(self):
        types = {
            d: TypeEstimate(theta_hat=-3.5, theta_sd=0.3, ci_low=0.01, ci_high=0.06, n_obs=10)
            for d in [DataType.EMU_CLIENTS, DataType.EMU_FACILITIES]
        }
        with pytest.raises(ValueError):
            HyperEstimates(types=types, tau_hat=0.8)

    def test_tau_positive(self):
        types = {
            d: TypeEstimate(theta_hat=-3.5, theta_sd=0.3, ci_low=0.01, ci_high=0.06, n_obs=10)
            for d in DataType
        }
        with pytest.raises(ValueError):
            HyperEstimates(types=types, tau_hat=0.0)

    def test_ci_order(self):
        with pytest.raises(ValueError):
            TypeEstimate(theta_hat=-3.5, theta_sd=0.3, ci_low=0.06, ci_high=0.01, n_obs=10)


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(42, "KE", "MWRA") == derive_seed(42, "KE", "MWRA")

    def test_distinct_parts(self):
        seeds = {
            derive_seed(42),
            derive_seed(42, "KE"),
            derive_seed(42, "KE", "MWRA"),
            derive_seed(42, "KE", "UWRA"),
            derive_seed(43, "KE", "MWRA"),
        }
        assert len(seeds) == 5

    def test_range(self):
        for s in [0, 1, 2**63, 12345]:
            val = derive_seed(s, "x")
            assert 0 <= val < 2**63


class TestReadDelimited:
    def _write(self, tmp_path, text, name="in.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_rows_carry_file_line_numbers(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1,2\n3,4\n")
        rows = read_delimited(path, ("a", "b"))
        assert rows == [(2, {"a": "1", "b": "2"}), (3, {"a": "3", "b": "4"})]

    def test_blank_lines_skipped_but_numbering_kept(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1,2\n\n3,4\n")
        rows = read_delimited(path, ("a", "b"))
        assert [line for line, _ in rows] == [2, 4]

    def test_values_and_header_stripped(self, tmp_path):
        path = self._write(tmp_path, " a , b \n 1 , x y \n")
        rows = read_delimited(path, ("a", "b"))
        assert rows == [(2, {"a": "1", "b": "x y"})]

    def test_missing_column_rejected(self, tmp_path):
        path = self._write(tmp_path, "a,c\n1,2\n")
        with pytest.raises(ParseError) as err:
            read_delimited(path, ("a", "b"))
        assert err.value.line == 1
        assert "missing required columns: b" in str(err.value)
        assert str(path) in str(err.value)

    def test_short_row_rejected_with_line(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1,2\n3\n")
        with pytest.raises(ParseError) as err:
            read_delimited(path, ("a", "b"))
        assert err.value.line == 3
        assert "expected 2 fields, got 1" in str(err.value)

    def test_empty_file_rejected(self, tmp_path):
        path = self._write(tmp_path, "")
        with pytest.raises(ParseError, match="empty file"):
            read_delimited(path, ("a",))

    def test_missing_file_reported_as_parse_error(self, tmp_path):
        with pytest.raises(ParseError) as err:
            read_delimited(tmp_path / "nope.csv", ("a",))
        assert err.value.line == 0

    def test_extra_header_columns_allowed(self, tmp_path):
        path = self._write(tmp_path, "a,b,extra\n1,2,3\n")
        rows = read_delimited(path, ("a", "b"))
        assert rows[0][1]["extra"] == "3"


class TestParseField:
    def test_converts(self):
        assert parse_field("31", int, "f.csv", 2, "year") == 31

    def test_failure_pins_location(self):
        with pytest.raises(ParseError) as err:
            parse_field("oops", float, "f.csv", 7, "value")
        assert err.value.path == "f.csv"
        assert err.value.line == 7
        assert err.value.column == "value"
        assert "f.csv:7: column 'value'" in str(err.value)
        assert "'oops'" in str(err.value)
