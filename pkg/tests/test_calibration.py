import math
import random
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tarmac.calibration import (
    OpsStatistics,
    ThroughputBin,
    align_saturation_shift,
    calibrate_model_params,
    derive_ama_taxi_stats,
    ingest_ops_records,
    size_runway_buffer,
    solve_bernoulli_pair,
    solve_taxiway_params,
    taxiway_real_solution,
)
from tarmac.errors import ConfigError, CurveAlignmentError, InfeasibleStatisticsError


# ---------------------------------------------------------------- runway pair

def test_bernoulli_pair_printed_values():
    c1, c2 = solve_bernoulli_pair(0.605, 0.578)
    assert abs(c1 - 0.514) <= 5e-3
    assert abs(c2 - 0.093) <= 5e-3


def test_bernoulli_pair_moment_roundtrip_exact():
    c1, c2 = solve_bernoulli_pair(0.605, 0.578)
    assert abs((c1 + c2) - 0.605) <= 1e-10
    assert abs(c1 * (1 - c1) + c2 * (1 - c2) - 0.578**2) <= 1e-10
    assert c1 >= c2


def test_bernoulli_pair_deterministic_limit():
    assert solve_bernoulli_pair(1.0, 0.0) == (1.0, 0.0)


def test_bernoulli_pair_second_airport():
    # closed-form quadratic: disc = 2*mean - mean^2 - 2*std^2
    c1, c2 = solve_bernoulli_pair(0.712, 0.603)
    assert abs(c1 - 0.5739) <= 1e-4
    assert abs(c2 - 0.1381) <= 1e-4


def test_bernoulli_pair_infeasible_reports_band():
    with pytest.raises(InfeasibleStatisticsError) as exc:
        solve_bernoulli_pair(0.605, 0.9)
    msg = str(exc.value)
    assert "0.605" in msg and "[" in msg  # feasible std range spelled out


@given(
    c1=st.floats(0.0, 1.0, allow_nan=False),
    c2=st.floats(0.0, 1.0, allow_nan=False),
)
@settings(max_examples=200, deadline=None)
def test_bernoulli_pair_recovers_any_true_pair(c1, c2):
    hi, lo = max(c1, c2), min(c1, c2)
    mean = hi + lo
    var = hi * (1 - hi) + lo * (1 - lo)
    got1, got2 = solve_bernoulli_pair(mean, math.sqrt(var))
    assert abs(got1 - hi) <= 1e-7
    assert abs(got2 - lo) <= 1e-7


# ------------------------------------------------------------- transit stats

def test_ama_stats_reference_triple():
    mean, std = derive_ama_taxi_stats((13.56, 2.00), (2.0, 1.33), (1.65, 1.04))
    assert abs(mean - 9.91) <= 0.01
    assert abs(std - 1.07) <= 0.01


def test_ama_stats_identity():
    assert derive_ama_taxi_stats((10.0, 1.0), (0.0, 0.0), (0.0, 0.0)) == (10.0, 1.0)


def test_ama_stats_arithmetic():
    mean, std = derive_ama_taxi_stats((8.0, 2.0), (1.0, 1.0), (1.0, 1.0))
    assert mean == pytest.approx(6.0)
    assert std == pytest.approx(math.sqrt(2.0), abs=1e-4)


def test_ama_stats_negative_variance_rejected():
    with pytest.raises(InfeasibleStatisticsError):
        derive_ama_taxi_stats((5.0, 1.0), (1.0, 1.0), (1.0, 1.0))


@given(
    base=st.tuples(st.floats(1.0, 30.0), st.floats(0.1, 3.0)),
    push=st.tuples(st.floats(0.0, 5.0), st.floats(0.0, 2.0)),
    clr=st.tuples(st.floats(0.0, 5.0), st.floats(0.0, 2.0)),
)
@settings(max_examples=200, deadline=None)
def test_ama_stats_inverts_component_sum(base, push, clr):
    # forward: add independent components, then strip them again
    total_mean = base[0] + push[0] + clr[0]
    total_std = math.sqrt(base[1] ** 2 + push[1] ** 2 + clr[1] ** 2)
    mean, std = derive_ama_taxi_stats((total_mean, total_std), push, clr)
    assert mean == pytest.approx(base[0], abs=1e-9)
    assert std == pytest.approx(base[1], abs=1e-7)


# ----------------------------------------------------------- taxiway (N, m)

def test_taxiway_params_reference():
    N, m = solve_taxiway_params(9.91, 1.07, 1)
    assert N == 9
    assert abs(m - 0.9084) <= 1e-3


def test_taxiway_real_solution_before_rounding():
    n_star, m_star = taxiway_real_solution(9.91, 1.07, 1)
    assert abs(n_star - 8.88) <= 0.02
    assert abs(m_star - 0.896) <= 0.002


def test_taxiway_params_mean_preserved_exactly():
    N, m = solve_taxiway_params(9.91, 1.07, 1)
    assert abs(N / m * 1 - 9.91) <= 1e-10


def test_taxiway_params_deterministic_limit():
    N, m = solve_taxiway_params(5.0, 1e-9, 1)
    assert N == 5
    assert m == pytest.approx(1.0, abs=1e-9)


def test_taxiway_params_bad_std_rejected():
    with pytest.raises(InfeasibleStatisticsError):
        solve_taxiway_params(5.0, 5.0, 1)


@given(
    mean=st.floats(2.0, 40.0),
    rel=st.floats(0.01, 0.45),
    T_s=st.sampled_from([0.5, 1.0, 2.0]),
)
@settings(max_examples=200, deadline=None)
def test_taxiway_params_mean_roundtrip_property(mean, rel, T_s):
    try:
        N, m = solve_taxiway_params(mean, rel * mean, T_s)
    except InfeasibleStatisticsError:
        return
    assert N >= 1 and 0.0 < m <= 1.0
    assert N / m * T_s == pytest.approx(mean, abs=1e-10)


# -------------------------------------------------------------- buffer rule

def test_buffer_reference():
    assert size_runway_buffer(1.07, 1.04, 0.605) == 7


def test_buffer_zero_variance_then_rejected_downstream():
    from tarmac.topology import ModelParams

    assert size_runway_buffer(0.0, 0.0, 0.5) == 0
    with pytest.raises(ConfigError):
        ModelParams(L_s=200.0, T_s=60.0, m=0.9, c1=0.5, c2=0.1, B=0)


def test_buffer_arithmetic():
    # 3*sqrt(2)/0.5 = 8.485 -> 8
    assert size_runway_buffer(1.0, 1.0, 0.5) == 8


# ----------------------------------------------------------------- ingestion

def _write_fixture(tmp_path, minutes=4000, takeoff="bernoulli", seed=3, junk=False):
    rng = np.random.default_rng(seed)
    counts = tmp_path / "counts.csv"
    flights = tmp_path / "flights.csv"
    with counts.open("w") as fh:
        fh.write("minute,n_taxiing,n_takeoffs\n")
        for mn in range(minutes):
            n_taxi = 2 if mn % 2 == 0 else 16
            if n_taxi < 14:
                n_toff = 0
            elif takeoff == "bernoulli":
                n_toff = int(rng.random() < 0.514) + int(rng.random() < 0.0929)
            elif takeoff == "poisson":
                n_toff = int(rng.poisson(0.605))
            else:
                n_toff = 1 if mn % 5 else 0
            fh.write(f"{mn},{n_taxi},{n_toff}\n")
    with flights.open("w") as fh:
        fh.write("flight_id,ramp_id,pushback_minute,wheels_off_minute\n")
        for i, mn in enumerate(range(0, minutes, 2)):
            ramp = "CD" if i % 3 else "AB"
            base = 13.56 if ramp == "CD" else 8.0
            taxi = max(4, int(round(rng.normal(base, 2.0))))
            fh.write(f"FL{i},{ramp},{mn},{mn + taxi}\n")
        if junk:
            fh.write("BAD,row\n")
    return flights, counts


def test_ingest_constant_rate_is_exact(tmp_path):
    counts = tmp_path / "counts.csv"
    flights = tmp_path / "flights.csv"
    with counts.open("w") as fh:
        fh.write("minute,n_taxiing,n_takeoffs\n")
        # 0.6/min at saturation as a 3-out-of-5 repeating pattern
        for mn in range(1000):
            fh.write(f"{mn},15,{1 if mn % 5 < 3 else 0}\n")
    with flights.open("w") as fh:
        fh.write("flight_id,ramp_id,pushback_minute,wheels_off_minute\n")
        fh.write("F0,CD,2000,2014\n")  # pushback minute absent from counts
    stats = ingest_ops_records(flights, counts)
    assert stats.takeoff_rate_mean == pytest.approx(0.6, abs=1e-12)
    assert any("not in counts" in d for d in stats.diagnostics)


def test_ingest_poisson_rate_matches_generator(tmp_path):
    flights, counts = _write_fixture(tmp_path, minutes=20000, takeoff="poisson")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = ingest_ops_records(flights, counts)
    assert stats.takeoff_rate_mean == pytest.approx(0.605, abs=0.01)
    assert stats.takeoff_rate_std == pytest.approx(math.sqrt(0.605), abs=0.02)


def test_ingest_malformed_row_skipped_with_line_number(tmp_path):
    flights, counts = _write_fixture(tmp_path, minutes=200, junk=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = ingest_ops_records(flights, counts)
    bad = [d for d in stats.diagnostics if "flights.csv:102" in d]
    assert len(bad) == 1
    assert stats.ramp_taxi_stats  # remaining rows still reduced


def test_ingest_order_independent(tmp_path):
    flights, counts = _write_fixture(tmp_path, minutes=2000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref = ingest_ops_records(flights, counts)
    for path in (flights, counts):
        lines = path.read_text().splitlines()
        body = lines[1:]
        random.Random(11).shuffle(body)
        path.write_text("\n".join([lines[0]] + body) + "\n")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        shuffled = ingest_ops_records(flights, counts)
    assert shuffled.takeoff_rate_mean == ref.takeoff_rate_mean
    assert shuffled.takeoff_rate_std == ref.takeoff_rate_std
    assert shuffled.ramp_taxi_stats == ref.ramp_taxi_stats
    assert shuffled.throughput_curve == ref.throughput_curve


def test_ingest_header_mismatch_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ConfigError):
        ingest_ops_records(p, p)


def test_ingest_no_saturation_minutes_rejected(tmp_path):
    counts = tmp_path / "counts.csv"
    flights = tmp_path / "flights.csv"
    counts.write_text("minute,n_taxiing,n_takeoffs\n0,2,0\n1,3,1\n")
    flights.write_text("flight_id,ramp_id,pushback_minute,wheels_off_minute\nF0,CD,0,12\n")
    with pytest.raises(InfeasibleStatisticsError):
        ingest_ops_records(flights, counts)


def test_ingest_full_chain_recovers_generator(tmp_path):
    flights, counts = _write_fixture(tmp_path, minutes=30000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = ingest_ops_records(flights, counts)
    params, paths = calibrate_model_params(stats)
    assert abs(params.c1 - 0.514) < 0.03
    assert abs(params.c2 - 0.0929) < 0.03
    assert paths["CD"] >= paths["AB"]
    assert params.B >= 1


# ----------------------------------------------------------- curve alignment

def _s_curve(c):
    return 0.605 / (1.0 + math.exp(-(c - 7) / 2.5))


def test_align_identical_curves():
    curve = [(c, _s_curve(c)) for c in range(23)]
    assert align_saturation_shift(curve, curve) == 0


def test_align_constructed_shift():
    model = [(c, _s_curve(c)) for c in range(23)]
    data = [(c + 3, _s_curve(c)) for c in range(23)]
    assert align_saturation_shift(model, data) == 3


def test_align_noisy_operational_style_curve():
    # quartile-spread noise on the data side, as an ops-data curve has
    rng = np.random.default_rng(5)
    model = [(c, _s_curve(c)) for c in range(23)]
    for _ in range(20):
        data = [(c + 3, _s_curve(c) + rng.normal(0.0, 0.012)) for c in range(23)]
        assert abs(align_saturation_shift(model, data) - 3) <= 1
    data_bins = [
        ThroughputBin(c + 3, _s_curve(c) + rng.normal(0.0, 0.01), 0.0, 0.0, 0.0, 60)
        for c in range(23)
    ]
    assert abs(align_saturation_shift(model, data_bins) - 3) <= 1


def test_align_without_plateau_rejected():
    steep = [(c, 2.0**c * 1e-3) for c in range(10)]
    with pytest.raises(CurveAlignmentError):
        align_saturation_shift(steep, steep)


def test_ops_statistics_invariants():
    with pytest.raises(ConfigError):
        OpsStatistics(takeoff_rate_mean=-0.1, takeoff_rate_std=0.5, ramp_taxi_stats={})
    with pytest.raises(ConfigError):
        OpsStatistics(
            takeoff_rate_mean=0.6,
            takeoff_rate_std=0.5,
            ramp_taxi_stats={"CD": (-1.0, 0.5)},
        )
