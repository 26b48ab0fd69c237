"""Tests for CSV ingestion, sample construction and scaling."""

import math
import warnings

import numpy as np
import pytest

from conftest import write_market_csv
from nbmlss.datapipe import (HORIZON, LAG_FEATURES, N_FEATURES, RevinScaler, RevinStats,
                             ZScoreScaler, build_samples, feature_names, fit_zscore,
                             load_csv, make_scaler, revin_denorm_params, revin_normalize,
                             scaler_from_dict, target_names)
from nbmlss.dists import JsuParams, NormalParams, make_head
from nbmlss.errors import ConfigurationError, DataError


class TestLoadCsv:
    def test_well_formed_48_rows(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=2)
        series, report = load_csv(path)
        assert len(series) == 48
        assert report.n_rows == 48
        assert not report.interpolated and not report.rejected_days

    def test_duplicate_timestamp_named_in_error(self, tmp_path):
        def dup(lines):
            return lines + [lines[5]]
        path = write_market_csv(tmp_path / "m.csv", n_days=2, mutate=dup)
        with pytest.raises(DataError, match="2021-01-04T04"):
            load_csv(path)

    def test_duplicate_mean_policy(self, tmp_path):
        def dup(lines):
            parts = lines[1].split(",")
            parts[1] = str(float(parts[1]) + 10.0)
            return lines + [",".join(parts)]
        path = write_market_csv(tmp_path / "m.csv", n_days=2, mutate=dup)
        series, report = load_csv(path, duplicates="mean")
        assert len(series) == 48
        assert len(report.duplicates_merged) == 1
        clean, _ = load_csv(write_market_csv(tmp_path / "c.csv", n_days=2))
        assert series.price[0] == pytest.approx(clean.price[0] + 5.0)

    def test_single_missing_hour_interpolated(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=2, drop_rows=[10])
        series, report = load_csv(path)
        assert len(series) == 48
        assert len(report.interpolated) == 1
        clean, _ = load_csv(write_market_csv(tmp_path / "c.csv", n_days=2))
        expected = 0.5 * (clean.price[9] + clean.price[11])
        assert series.price[10] == pytest.approx(expected)

    def test_three_hour_gap_linear_oracle(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=2, drop_rows=[20, 21, 22])
        series, report = load_csv(path)
        assert len(series) == 48
        assert len(report.interpolated) == 3
        assert not report.rejected_days
        clean, _ = load_csv(write_market_csv(tmp_path / "c.csv", n_days=2))
        lo, hi = clean.price[19], clean.price[23]
        for k, idx in enumerate((20, 21, 22), start=1):
            assert series.price[idx] == pytest.approx(lo + (hi - lo) * k / 4.0)

    def test_long_gap_rejects_days(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=3,
                                drop_rows=list(range(20, 30)))
        series, report = load_csv(path)
        assert len(series) == 72
        assert np.datetime64("2021-01-04") in report.rejected_days
        assert np.datetime64("2021-01-05") in report.rejected_days

    def test_missing_policy_error(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=2, drop_rows=[10])
        with pytest.raises(DataError, match="missing hour"):
            load_csv(path, missing="error")

    def test_malformed_row_reports_line(self, tmp_path):
        def corrupt(lines):
            lines[7] = "2021-01-04T06:00:00Z,not_a_number,1,2,3"
            return lines
        path = write_market_csv(tmp_path / "m.csv", n_days=2, mutate=corrupt)
        with pytest.raises(DataError, match="line 8"):
            load_csv(path)

    def test_wrong_field_count_reports_line(self, tmp_path):
        def corrupt(lines):
            lines[3] = lines[3] + ",extra"
            return lines
        path = write_market_csv(tmp_path / "m.csv", n_days=2, mutate=corrupt)
        with pytest.raises(DataError, match="line 4"):
            load_csv(path)

    def test_header_mismatch(self, tmp_path):
        def corrupt(lines):
            lines[0] = "time,price,load,wind,solar"
            return lines
        path = write_market_csv(tmp_path / "m.csv", n_days=2, mutate=corrupt)
        with pytest.raises(DataError, match="header"):
            load_csv(path)

    def test_off_hour_timestamp_rejected(self, tmp_path):
        def corrupt(lines):
            lines[2] = lines[2].replace("T01:00:00Z", "T01:30:00Z")
            return lines
        path = write_market_csv(tmp_path / "m.csv", n_days=2, mutate=corrupt)
        with pytest.raises(DataError, match="not on the hour"):
            load_csv(path)

    def test_unsorted_input_is_sorted(self, tmp_path):
        def shuffle(lines):
            head, body = lines[0], lines[1:]
            rng = np.random.default_rng(0)
            rng.shuffle(body)
            return [head] + body
        path = write_market_csv(tmp_path / "m.csv", n_days=2, mutate=shuffle)
        series, _ = load_csv(path)
        steps = np.diff(series.timestamps.astype("datetime64[h]").astype(np.int64))
        assert (steps == 1).all()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "absent.csv")


class TestBuildSamples:
    def test_index_arithmetic_oracle(self, tmp_path):
        # price(t) = t lets every lag position be checked by pure index math
        path = write_market_csv(tmp_path / "m.csv", n_days=12)

        def price_is_hour_index(lines):
            out = [lines[0]]
            for i, line in enumerate(lines[1:]):
                parts = line.split(",")
                parts[1] = str(float(i))
                out.append(",".join(parts))
            return out
        path = write_market_csv(tmp_path / "m.csv", n_days=12, mutate=price_is_hour_index)
        series, report = load_csv(path)
        samples = build_samples(series)
        assert len(samples) == 12 - 7
        for s_i in range(len(samples)):
            d = int(samples.day_index[s_i])
            x = samples.x[s_i]
            for h in range(24):
                assert x[h] == (d - 1) * 24 + h          # price day d-1
                assert x[24 + h] == (d - 2) * 24 + h     # price day d-2
                assert x[48 + h] == (d - 7) * 24 + h     # price day d-7
            np.testing.assert_array_equal(samples.y[s_i], np.arange(d * 24, d * 24 + 24))

    def test_seven_days_give_zero_samples(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=7)
        series, _ = load_csv(path)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            samples = build_samples(series)
        assert len(samples) == 0
        assert any("8" in str(w.message) for w in caught)

    def test_monday_dow_encoding(self, tmp_path):
        # series starts Monday 2021-01-04; first sample day is index 7, a Monday
        path = write_market_csv(tmp_path / "m.csv", n_days=10)
        series, _ = load_csv(path)
        samples = build_samples(series)
        assert samples.dates[0] == np.datetime64("2021-01-11")
        assert samples.x[0][144] == pytest.approx(math.sin(0.0))
        assert samples.x[0][145] == pytest.approx(1.0)

    def test_calendar_periodicity(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=30)
        series, _ = load_csv(path)
        samples = build_samples(series)
        for i in range(len(samples) - 7):
            assert samples.x[i][144] == pytest.approx(samples.x[i + 7][144], abs=1e-12)
            assert samples.x[i][145] == pytest.approx(samples.x[i + 7][145], abs=1e-12)

    def test_temporal_age_in_years(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=30)
        series, _ = load_csv(path)
        samples = build_samples(series)
        assert samples.x[0][146] == 0.0
        assert samples.x[10][146] == pytest.approx(10 / 365.25)

    def test_rejected_day_excludes_dependent_samples(self, tmp_path):
        path = write_market_csv(tmp_path / "m.csv", n_days=20)
        series, _ = load_csv(path)
        full = build_samples(series)
        rejected = [np.datetime64("2021-01-12")]  # day index 8
        pruned = build_samples(series, rejected_days=rejected)
        # day 8 itself plus days using it as d-1 (9), d-2 (10), d-7 (15) vanish
        gone = set(full.day_index) - set(pruned.day_index)
        assert gone == {8, 9, 10, 15}

    def test_windowing_bijectivity_random_lengths(self, tmp_path):
        # every (day, lag feature) position maps to exactly one source hour
        rng = np.random.default_rng(5)
        for n_days in rng.integers(8, 25, size=3):
            path = write_market_csv(tmp_path / f"m{n_days}.csv", n_days=int(n_days),
                                    seed=int(n_days))
            series, _ = load_csv(path)
            samples = build_samples(series)
            assert len(samples) == n_days - 7
            for s_i in range(len(samples)):
                d = int(samples.day_index[s_i])
                for pos, (lag, h) in enumerate(
                        ((lag, h) for lag in (1, 2, 7) for h in range(24))):
                    src = (d - lag) * 24 + h
                    assert samples.x[s_i][pos] == series.price[src]

    def test_feature_names_match_layout(self):
        names = feature_names()
        assert len(names) == N_FEATURES
        assert names[0] == "price_lag1_h00"
        assert names[48] == "price_lag7_h00"
        assert names[72] == "load_fc_h00"
        assert names[120] == "solar_fc_h00"
        assert names[144:] == ["dow_sin", "dow_cos", "temporal_age"]
        assert len(target_names()) == HORIZON


class TestZScore:
    def test_population_std_convention(self):
        x = np.array([[1.0], [2.0], [3.0]])
        scaler = fit_zscore(x, np.zeros((3, 1)))
        xm, _ = scaler.transform_x(x)
        expected = np.array([-1.2247448, 0.0, 1.2247448])
        np.testing.assert_allclose(xm[:, 0], expected, atol=1e-6)

    def test_constant_feature_floored_with_warning(self):
        x = np.column_stack([np.full(10, 4.0), np.arange(10.0)])
        with pytest.warns(UserWarning, match="floored"):
            scaler = fit_zscore(x, np.arange(10.0)[:, None])
        xm, _ = scaler.transform_x(x)
        np.testing.assert_allclose(xm[:, 0], 0.0)
        assert np.isfinite(xm).all()

    def test_round_trip_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 8)) * rng.uniform(0.5, 20, size=8)
        y = rng.normal(size=(50, 4)) * 7.0
        scaler = fit_zscore(x, y)
        xm, stats = scaler.transform_x(x)
        np.testing.assert_allclose(scaler.inverse_x(xm, stats), x, atol=1e-12)
        ym = scaler.transform_y(y)
        np.testing.assert_allclose(scaler.inverse_y(ym), y, atol=1e-12)

    def test_denorm_params_pushforward(self):
        rng = np.random.default_rng(1)
        y = rng.normal(3.0, 2.0, size=(40, 2))
        scaler = fit_zscore(np.ones((40, 1)), y)
        params = NormalParams(loc=np.zeros((5, 2)), scale=np.ones((5, 2)))
        pushed = scaler.denorm_params(params)
        np.testing.assert_allclose(pushed.loc, np.broadcast_to(scaler.target_mean, (5, 2)))
        np.testing.assert_allclose(pushed.scale, np.broadcast_to(scaler.target_std, (5, 2)))

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(2)
        scaler = fit_zscore(rng.normal(size=(30, 3)), rng.normal(size=(30, 2)))
        clone = scaler_from_dict(scaler.to_dict())
        np.testing.assert_array_equal(clone.feature_mean, scaler.feature_mean)
        np.testing.assert_array_equal(clone.target_std, scaler.target_std)


class TestRevin:
    def _sample(self, rng):
        x = np.empty(N_FEATURES)
        x[LAG_FEATURES] = rng.normal(30.0, 5.0, size=72)
        x[72:] = rng.normal(size=N_FEATURES - 72)
        return x

    def test_constant_history_normalizes_to_zero(self):
        x = np.zeros(N_FEATURES)
        x[LAG_FEATURES] = 42.0
        with pytest.warns(UserWarning, match="floored"):
            xn, stats = revin_normalize(x)
        np.testing.assert_allclose(xn[LAG_FEATURES], 0.0)
        assert stats.mu == pytest.approx(42.0)
        assert stats.sd == pytest.approx(1e-6)
        # a unit Normal prediction denormalizes to the constant level
        pushed = revin_denorm_params(NormalParams(0.0, 1.0), stats)
        assert pushed.loc == pytest.approx(42.0)
        assert pushed.scale == pytest.approx(1e-6)

    def test_round_trip_exact(self):
        rng = np.random.default_rng(3)
        x = np.stack([self._sample(rng) for _ in range(20)])
        scaler = RevinScaler().fit(x, np.zeros((20, HORIZON)))
        xm, stats = scaler.transform_x(x)
        np.testing.assert_allclose(scaler.inverse_x(xm, stats), x, atol=1e-12)

    def test_normalized_lags_have_zero_mean_unit_sd(self):
        rng = np.random.default_rng(4)
        x = np.stack([self._sample(rng) for _ in range(10)])
        xn, stats = revin_normalize(x)
        lags = xn[:, LAG_FEATURES]
        np.testing.assert_allclose(lags.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(lags.std(axis=1), 1.0, atol=1e-9)

    def test_jsu_pushforward_is_parameter_map(self):
        p = JsuParams(0.0, 1.0, 1.5, 0.3)
        pushed = revin_denorm_params(p, RevinStats(mu=10.0, sd=2.0))
        assert (pushed.loc, pushed.scale, pushed.tailweight, pushed.skew) == \
            (10.0, 2.0, 1.5, 0.3)

    def test_jsu_pushforward_monte_carlo_quantiles(self):
        # empirical quantiles of transformed samples match the pushed
        # distribution's closed-form quantiles
        head = make_head("jsu")
        base = JsuParams(0.0, 1.0, 1.5, 0.3)
        mu, sd = 10.0, 2.0
        pushed = base.affine(mu, sd)
        rng = np.random.default_rng(0)
        draws = mu + sd * head.sample(base, 10_000, rng)
        for u in (0.01, 0.5, 0.99):
            emp = np.quantile(draws, u)
            closed = float(head.quantile(u, pushed))
            assert abs(emp - closed) < 0.15 * float(np.asarray(pushed.scale))

    @pytest.mark.parametrize("kind", ["jsu", "normal", "studentt"])
    def test_pushforward_cdf_identity(self, kind):
        # CDF of the denormalized distribution at y equals the CDF of the
        # normalized one at (y - mu) / sd, pointwise
        rng = np.random.default_rng(6)
        head = make_head(kind)
        raw = rng.normal(size=(1, head.n_params * 4))
        params = head.transform(raw, 4)
        stats = RevinStats(mu=np.array([13.0]), sd=np.array([2.5]))
        pushed = revin_denorm_params(params, stats)
        ys = np.linspace(-40, 60, 31)
        for y in ys:
            a = head.cdf(np.full((1, 4), y), pushed)
            b = head.cdf(np.full((1, 4), (y - 13.0) / 2.5), params)
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_scaler_serialization(self):
        rng = np.random.default_rng(7)
        x = np.stack([self._sample(rng) for _ in range(15)])
        scaler = RevinScaler().fit(x, np.zeros((15, HORIZON)))
        clone = scaler_from_dict(scaler.to_dict())
        xm1, _ = scaler.transform_x(x)
        xm2, _ = clone.transform_x(x)
        np.testing.assert_array_equal(xm1, xm2)

    def test_make_scaler_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            make_scaler("minmax")
