"""Data layer: CSV round trips, chronological splitting, window slicing,
compartment derivation, and the seeded synthetic generator."""

from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest

from epicast import metapop
from epicast.datasets import (
    DataError,
    Dataset,
    SyntheticScenario,
    chronological_split,
    derive_compartments,
    generate_synthetic,
    load_dataset,
    mobility_schedule,
    save_dataset,
    true_parameter_series,
    windowize,
)

from conftest import rng_for, small_scenario


def panel(n=2, length=20, extras=0, seed=600):
    """Hand-built valid panel with distinctive per-day values."""
    rng = rng_for(seed)
    start = date(2021, 3, 1)
    dates = [(start + timedelta(days=k)).isoformat() for k in range(length)]
    pop = rng.uniform(1e3, 1e4, size=n)
    extra = rng.uniform(0, 1, size=(n, length, extras)) if extras else None
    return Dataset(
        regions=[f"r{k}" for k in range(n)],
        dates=dates,
        cases=rng.uniform(0, 100, size=(n, length)),
        susceptible=rng.uniform(100, 1000, size=(n, length)),
        infected=rng.uniform(0, 100, size=(n, length)),
        recovered=rng.uniform(0, 100, size=(n, length)),
        flows=rng.uniform(0, 50, size=(n, n, length)),
        population=pop,
        extras=extra,
    )


class TestCsvRoundTrip:
    def test_bit_exact(self, tmp_path):
        original = panel(3, 12, extras=2)
        save_dataset(original, tmp_path)
        loaded = load_dataset(tmp_path)
        assert loaded.regions == original.regions
        assert loaded.dates == original.dates
        for field in ("cases", "susceptible", "infected", "recovered", "flows", "population", "extras"):
            np.testing.assert_array_equal(
                getattr(loaded, field), getattr(original, field), err_msg=field
            )

    def test_synthetic_round_trip(self, tmp_path):
        original = generate_synthetic(small_scenario())
        save_dataset(original, tmp_path)
        loaded = load_dataset(tmp_path)
        np.testing.assert_array_equal(loaded.cases, original.cases)
        np.testing.assert_array_equal(loaded.flows, original.flows)


class TestLoadErrors:
    def write_valid(self, directory):
        save_dataset(panel(2, 3), directory)

    def replace_line(self, path, line_no, new_line):
        lines = path.read_text().splitlines()
        lines[line_no - 1] = new_line
        path.write_text("\n".join(lines) + "\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing input file"):
            load_dataset(tmp_path)

    def test_bad_float_reports_file_and_line(self, tmp_path):
        self.write_valid(tmp_path)
        self.replace_line(tmp_path / "population.csv", 3, "r1,abc")
        with pytest.raises(DataError, match=r"population\.csv:3.*non-numeric.*'abc'"):
            load_dataset(tmp_path)

    def test_bad_date_reports_file_and_line(self, tmp_path):
        self.write_valid(tmp_path)
        obs = tmp_path / "observations.csv"
        line = obs.read_text().splitlines()[1]
        self.replace_line(obs, 2, line.replace("2021-03-01", "03/01/2021"))
        with pytest.raises(DataError, match=r"observations\.csv:2: bad date"):
            load_dataset(tmp_path)

    def test_unknown_region_in_observations(self, tmp_path):
        self.write_valid(tmp_path)
        obs = tmp_path / "observations.csv"
        line = obs.read_text().splitlines()[1]
        self.replace_line(obs, 2, line.replace("r0", "ghost"))
        with pytest.raises(DataError, match="unknown region 'ghost'"):
            load_dataset(tmp_path)

    def test_duplicate_observation_row(self, tmp_path):
        self.write_valid(tmp_path)
        obs = tmp_path / "observations.csv"
        lines = obs.read_text().splitlines()
        lines.insert(2, lines[1])
        obs.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="duplicate entry"):
            load_dataset(tmp_path)

    def test_missing_region_day_pair(self, tmp_path):
        self.write_valid(tmp_path)
        obs = tmp_path / "observations.csv"
        lines = obs.read_text().splitlines()
        del lines[2]  # drop (day 1, r1)
        obs.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="missing entry for region"):
            load_dataset(tmp_path)

    def test_wrong_observation_header(self, tmp_path):
        self.write_valid(tmp_path)
        obs = tmp_path / "observations.csv"
        self.replace_line(obs, 1, "day,region,cases,susceptible,infected,recovered")
        with pytest.raises(DataError, match=r"observations\.csv:1: header"):
            load_dataset(tmp_path)

    def test_negative_flow_rejected(self, tmp_path):
        self.write_valid(tmp_path)
        mob = tmp_path / "mobility.csv"
        line = mob.read_text().splitlines()[1].rsplit(",", 1)[0]
        self.replace_line(mob, 2, line + ",-4.0")
        with pytest.raises(DataError, match=r"mobility\.csv:2: flow must be >= 0"):
            load_dataset(tmp_path)

    def test_mobility_date_must_exist_in_observations(self, tmp_path):
        self.write_valid(tmp_path)
        mob = tmp_path / "mobility.csv"
        line = mob.read_text().splitlines()[1]
        self.replace_line(mob, 2, line.replace("2021-03-01", "2020-01-01"))
        with pytest.raises(DataError, match="does not appear"):
            load_dataset(tmp_path)

    def test_duplicate_region_in_population(self, tmp_path):
        self.write_valid(tmp_path)
        pop = tmp_path / "population.csv"
        self.replace_line(pop, 3, "r0,500.0")
        with pytest.raises(DataError, match="duplicate region 'r0'"):
            load_dataset(tmp_path)


class TestChronologicalSplit:
    @pytest.mark.parametrize(
        "length,expected",
        [(539, (404, 67, 68)), (400, (300, 50, 50)), (8, (6, 1, 1)), (100, (75, 12, 13))],
    )
    def test_six_one_one_sizes(self, length, expected):
        data = panel(1, length)
        train, val, test = chronological_split(data)
        assert (train.n_days, val.n_days, test.n_days) == expected
        assert train.n_days + val.n_days + test.n_days == length

    def test_segments_are_contiguous_in_order(self):
        data = panel(2, 40)
        train, val, test = chronological_split(data)
        assert train.dates == data.dates[:30]
        assert val.dates == data.dates[30:35]
        assert test.dates == data.dates[35:]
        np.testing.assert_array_equal(val.cases, data.cases[:, 30:35])
        np.testing.assert_array_equal(test.flows, data.flows[:, :, 35:])

    def test_too_short_rejected(self):
        with pytest.raises(DataError, match="at least 8 days"):
            chronological_split(panel(1, 7))


class TestWindowize:
    def test_count_and_shapes(self):
        data = panel(3, 25, extras=1)
        windows = windowize(data, t_in=6, t_out=4)
        count = 25 - (6 + 4) + 1
        assert len(windows) == count
        assert windows.observations.shape == (count, 3, 6, 5)
        assert windows.mobility.shape == (count, 3, 3, 6)
        assert windows.targets.shape == (count, 3, 4)
        assert windows.susceptible0.shape == (count, 3)

    def test_alignment_with_source_panel(self):
        data = panel(2, 18)
        t_in, t_out = 5, 3
        windows = windowize(data, t_in, t_out)
        stacked = data.stacked()
        for w in (0, 4, len(windows) - 1):
            np.testing.assert_array_equal(
                windows.observations[w], stacked[:, w : w + t_in]
            )
            np.testing.assert_array_equal(
                windows.mobility[w], data.flows[:, :, w : w + t_in]
            )
            np.testing.assert_array_equal(
                windows.targets[w], data.cases[:, w + t_in : w + t_in + t_out]
            )
            # the start state is the last observed day of the window
            np.testing.assert_array_equal(
                windows.susceptible0[w], data.susceptible[:, w + t_in - 1]
            )
            np.testing.assert_array_equal(
                windows.infected0[w], data.infected[:, w + t_in - 1]
            )
            assert windows.end_dates[w] == data.dates[w + t_in - 1]

    def test_batch_selects_requested_windows(self):
        data = panel(2, 20)
        windows = windowize(data, 4, 2)
        batch = windows.batch([3, 7])
        np.testing.assert_array_equal(batch.observations[0], windows.observations[3])
        np.testing.assert_array_equal(batch.targets[1], windows.targets[7])
        assert batch.size == 2

    def test_too_short_segment_rejected(self):
        with pytest.raises(DataError, match="too short"):
            windowize(panel(1, 9), t_in=6, t_out=4)


class TestDeriveCompartments:
    def oracle(self, cases, population, recovery_days):
        n, length = cases.shape
        s = np.empty((n, length))
        i = np.empty((n, length))
        r = np.empty((n, length))
        for k in range(n):
            for t in range(length):
                window_start = max(0, t - recovery_days + 1)
                infected_now = cases[k, window_start : t + 1].sum()
                recovered_now = cases[k, : t + 1].sum() - infected_now
                i[k, t] = infected_now
                r[k, t] = recovered_now
                s[k, t] = max(population[k] - infected_now - recovered_now, 0.0)
        return s, i, r

    def test_matches_loop_oracle(self):
        rng = rng_for(601)
        cases = rng.uniform(0, 20, size=(3, 30))
        population = rng.uniform(500, 2000, size=3)
        for recovery_days in (1, 5, 10):
            got = derive_compartments(cases, population, recovery_days)
            want = self.oracle(cases, population, recovery_days)
            for g, w in zip(got, want):
                np.testing.assert_allclose(g, w, atol=1e-9)

    def test_default_infectious_period_is_ten_days(self):
        cases = np.zeros((1, 15))
        cases[0, 0] = 7.0
        _, infected, recovered = derive_compartments(cases, np.array([100.0]))
        np.testing.assert_allclose(infected[0, :10], 7.0)
        np.testing.assert_allclose(infected[0, 10:], 0.0)
        np.testing.assert_allclose(recovered[0, 10:], 7.0)

    def test_totals_conserved_until_floor(self):
        rng = rng_for(602)
        cases = rng.uniform(0, 5, size=(2, 25))
        population = np.array([1e4, 2e4])
        s, i, r = derive_compartments(cases, population)
        np.testing.assert_allclose(
            s + i + r, np.broadcast_to(population[:, None], s.shape), atol=1e-9
        )


class TestSyntheticGenerator:
    def test_deterministic_given_scenario(self):
        scenario = small_scenario()
        a = generate_synthetic(scenario)
        b = generate_synthetic(scenario)
        np.testing.assert_array_equal(a.cases, b.cases)
        np.testing.assert_array_equal(a.flows, b.flows)
        assert a.dates == b.dates

    def test_seed_changes_world(self):
        a = generate_synthetic(small_scenario(seed=1))
        b = generate_synthetic(small_scenario(seed=2))
        assert not np.array_equal(a.cases, b.cases)
        assert not np.array_equal(a.population, b.population)

    def test_zero_noise_reports_exact_mechanistic_cases(self):
        scenario = small_scenario(noise=0.0)
        data = generate_synthetic(scenario)
        beta, gamma = true_parameter_series(scenario)
        flows = mobility_schedule(scenario)
        # replay the simulation with the public mechanistic pieces
        from epicast.domain import CompartmentState

        infected0 = scenario.initial_infected_fraction * data.population
        state = CompartmentState(
            susceptible=data.population - infected0,
            infected=infected0,
            recovered=np.zeros(scenario.n_regions),
        )
        for t in range(scenario.length):
            strength = metapop.transmission_strength(
                flows[:, :, t], data.population, state.infected
            )
            state, fresh = metapop.step(state, beta[:, t], gamma[:, t], strength)
            np.testing.assert_array_equal(data.cases[:, t], fresh)
        np.testing.assert_array_equal(data.susceptible[:, -1], state.susceptible)

    def test_noise_only_touches_observed_cases(self):
        quiet = generate_synthetic(small_scenario(noise=0.0))
        noisy = generate_synthetic(small_scenario(noise=0.3))
        np.testing.assert_array_equal(quiet.susceptible, noisy.susceptible)
        np.testing.assert_array_equal(quiet.infected, noisy.infected)
        np.testing.assert_array_equal(quiet.flows, noisy.flows)
        assert not np.array_equal(quiet.cases, noisy.cases)

    def test_noise_is_mean_one_multiplicative(self):
        # the log-normal observation factor has expectation one, so large
        # samples preserve the underlying case level
        quiet = generate_synthetic(small_scenario(length=200, noise=0.0))
        noisy = generate_synthetic(small_scenario(length=200, noise=0.1))
        alive = quiet.cases > 1.0
        ratio = noisy.cases[alive] / quiet.cases[alive]
        assert abs(ratio.mean() - 1.0) < 0.02
        assert (noisy.cases >= 0).all()

    def test_rates_span_the_configured_band(self):
        scenario = small_scenario(n_regions=6, length=400)
        beta, gamma = true_parameter_series(scenario)
        assert beta.min() >= scenario.beta_low - 1e-12
        assert beta.max() <= scenario.beta_high + 1e-12
        assert beta.max() - beta.min() > 0.5 * (scenario.beta_high - scenario.beta_low)
        np.testing.assert_array_equal(gamma, np.full_like(gamma, scenario.gamma))

    def test_seasonal_rates_repeat_with_period(self):
        scenario = small_scenario(length=400)
        beta, _ = true_parameter_series(scenario)
        period = int(scenario.season_period)
        np.testing.assert_allclose(beta[:, :100], beta[:, period : period + 100], atol=1e-12)

    def test_phases_cover_the_cycle(self):
        # stratified phases: with n regions, consecutive sorted phases are
        # no more than two strata apart
        scenario = SyntheticScenario(seed=3, n_regions=8)
        from epicast.datasets import _populations_and_sites

        _, _, phases = _populations_and_sites(scenario)
        spread = np.diff(np.sort(phases))
        assert spread.max() <= 2 * scenario.season_period / 8

    def test_mobility_weekly_modulation(self):
        scenario = small_scenario(length=28)
        flows = mobility_schedule(scenario)
        np.testing.assert_allclose(flows[:, :, 0], flows[:, :, 7], rtol=1e-12)
        assert not np.allclose(flows[:, :, 0], flows[:, :, 3])

    def test_dataset_shapes_and_validity(self):
        scenario = small_scenario(n_regions=4, length=30)
        data = generate_synthetic(scenario)
        assert data.n_regions == 4
        assert data.n_days == 30
        assert data.dates[0] == scenario.start_date
        data.bundle()  # full domain validation passes

    def test_bad_scenario_rejected(self):
        with pytest.raises(DataError, match="beta_kind"):
            SyntheticScenario(beta_kind="spiky")
        with pytest.raises(DataError, match="beta_low"):
            SyntheticScenario(beta_low=0.0)
