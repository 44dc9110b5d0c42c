import json
import os

import numpy as np
import pytest

from oracles.toys import toy2_config
from tarmac.cli import _load_policy_csv, _read_csv, parse_grid, run, split_seed
from tarmac.dynamics import cached_transition_model
from tarmac.optimizer import build_cost_vector, extract_policy, solve_average_cost
from tarmac.topology import config_hash, load_topology


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = toy2_config()
    cfg["observation_levels"] = [
        {"name": "spots", "zones": [["c1", "c2"]], "spot_cells": ["c0"]},
    ]
    with open(d / "toy.json", "w") as f:
        json.dump(cfg, f)
    old = os.environ.get("TARMAC_CACHE_DIR")
    os.environ["TARMAC_CACHE_DIR"] = str(d / "cache")
    yield d
    if old is None:
        os.environ.pop("TARMAC_CACHE_DIR", None)
    else:
        os.environ["TARMAC_CACHE_DIR"] = old


@pytest.fixture(scope="module")
def toy(workdir):
    return str(workdir / "toy.json")


@pytest.fixture(scope="module")
def policy_csv(workdir, toy):
    out = str(workdir / "pol.csv")
    assert run(["solve", "--airport", toy, "--beta", "5", "--out", out]) == 0
    return out


def _check_manifest(out):
    """Manifest invariant: listed outputs exist and carry the hash."""
    with open(os.path.splitext(out)[0] + ".manifest.json") as f:
        m = json.load(f)
    for key in ("config_hash", "command", "parameters", "tool_version",
                "seed", "outputs", "wall_clock_s"):
        assert key in m
    for path in m["outputs"]:
        assert os.path.exists(path)
        if path.endswith(".json"):
            assert json.load(open(path))["config_hash"] == m["config_hash"]
        else:
            with open(path) as f:
                assert f.readline().rstrip() == f"# config_hash={m['config_hash']}"
    return m


# ----------------------------------------------------------- exit codes
def test_usage_errors_exit_two(capsys):
    assert run([]) == 2
    assert run(["sweep", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert run(["sweep", "--airport", "x.json", "--kind", "beta",
                "--grid", "nope:1:2:3", "--out", "f.csv"]) == 2


def test_help_and_version_exit_zero(capsys):
    assert run(["--version"]) == 0
    assert run(["sweep", "--help"]) == 0
    out = capsys.readouterr().out
    assert "log:lo:hi:n" in out


def test_domain_errors_exit_one(workdir, capsys):
    assert run(["build", "--airport", str(workdir / "missing.json")]) == 1
    assert "error:" in capsys.readouterr().err
    assert run(["simulate", "--airport", str(workdir / "toy.json"),
                "--out", str(workdir / "x.csv")]) == 1  # no controller picked


# ---------------------------------------------------------- grid parser
def test_grid_grammar():
    assert parse_grid("1,2,3.5") == [1.0, 2.0, 3.5]
    lin = parse_grid("lin:0:10:3")
    assert lin == [0.0, 5.0, 10.0]
    log = parse_grid("log:0.1:100:4")
    assert np.allclose(log, np.geomspace(0.1, 100, 4))
    for bad in ("log:1:10", "log:0:10:5", "lin:1:2:0", "", "a,b"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_seed_splits_are_labeled_and_stable():
    assert split_seed(7, "simulate") == split_seed(7, "simulate")
    assert split_seed(7, "simulate") != split_seed(7, "sweep")
    assert split_seed(7, "simulate") != split_seed(8, "simulate")


# ---------------------------------------------------------- subcommands
def test_build_writes_stats_and_cache(workdir, toy, capsys):
    out = str(workdir / "stats.json")
    assert run(["build", "--airport", toy, "--out", out]) == 0
    stats = json.load(open(out))
    assert stats["config_hash"] == config_hash(toy)
    assert stats["n_states"] == 48
    assert os.path.exists(os.path.join(str(workdir / "cache"),
                                       stats["config_hash"] + ".tmc"))
    _check_manifest(out)
    # second run loads the cache instead of rebuilding
    assert run(["build", "--airport", toy, "--out", out]) == 0
    assert json.load(open(out))["cached"] is True


def test_solve_policy_round_trips_through_csv(workdir, toy, policy_csv):
    t = load_topology(toy)
    h = config_hash(toy)
    model = cached_transition_model(t, h)
    sol = solve_average_cost(model, build_cost_vector(model, 5.0))
    want = extract_policy(sol, model=model)
    got = _load_policy_csv(policy_csv, model, h)
    assert np.allclose(got.probs, want.probs, atol=1e-12)
    assert np.array_equal(got.completed, want.completed)
    _check_manifest(policy_csv)


def test_policy_csv_guards_config_hash(workdir, toy, policy_csv):
    other = toy2_config()
    other["params"]["m"] = 0.5
    model = cached_transition_model(load_topology(other), config_hash(other))
    with pytest.raises(ValueError, match="solved for config"):
        _load_policy_csv(policy_csv, model, config_hash(other))


def test_simulate_is_byte_identical_at_equal_seed(workdir, toy, policy_csv):
    outs = []
    for name in ("m_a.csv", "m_b.csv"):
        out = str(workdir / name)
        assert run(["simulate", "--airport", toy, "--policy", policy_csv,
                    "--steps", "30000", "--warmup", "10000",
                    "--seed", "7", "--out", out]) == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]
    out = str(workdir / "m_c.csv")
    assert run(["simulate", "--airport", toy, "--policy", policy_csv,
                "--steps", "30000", "--warmup", "10000",
                "--seed", "8", "--out", out]) == 0
    assert open(out, "rb").read() != outs[0]
    _check_manifest(str(workdir / "m_a.csv"))


@pytest.mark.parametrize("flags,label", [
    (["--threshold", "2"], "threshold"),
    (["--policy", "{pol}", "--level", "spots"], "mls"),
])
def test_simulate_controller_selection(workdir, toy, policy_csv, flags, label):
    out = str(workdir / f"m_{label}.csv")
    flags = [f.format(pol=policy_csv) for f in flags]
    assert run(["simulate", "--airport", toy, *flags,
                "--steps", "30000", "--warmup", "10000", "--out", out]) == 0
    _, cols, rows = _read_csv(out)
    assert len(rows) == 1
    assert rows[0]["controller"] == label
    assert 0.0 < float(rows[0]["avg_rate"]) < 2.0


def test_simulate_unknown_level_fails(workdir, toy, policy_csv, capsys):
    assert run(["simulate", "--airport", toy, "--policy", policy_csv,
                "--level", "tower", "--out", str(workdir / "x.csv")]) == 1
    assert "observation level" in capsys.readouterr().err


@pytest.fixture(scope="module")
def frontiers(workdir, toy):
    fb, ft = str(workdir / "fb.csv"), str(workdir / "ft.csv")
    assert run(["sweep", "--airport", toy, "--kind", "beta",
                "--grid", "log:0.2:50:8", "--out", fb]) == 0
    assert run(["sweep", "--airport", toy, "--kind", "threshold",
                "--grid", "lin:0:6:7", "--out", ft]) == 0
    return fb, ft


def test_sweep_writes_frontier_table(workdir, frontiers):
    fb, _ = frontiers
    h, cols, rows = _read_csv(fb)
    assert h == config_hash(str(workdir / "toy.json"))
    assert cols[:4] == ["kind", "param", "avg_rate", "avg_taxiing"]
    assert len(rows) == 8
    assert all(r["kind"] == "beta_sweep" and not r["error"] for r in rows)
    rates = [float(r["avg_rate"]) for r in rows]
    assert rates == sorted(rates)  # release pressure grows with beta
    _check_manifest(fb)


def test_sweep_mls_needs_level(workdir, toy, capsys):
    assert run(["sweep", "--airport", toy, "--kind", "mls", "--grid", "5",
                "--out", str(workdir / "x.csv")]) == 1
    assert "--level" in capsys.readouterr().err


def test_compare_round_trip(workdir, frontiers):
    fb, ft = frontiers
    out = str(workdir / "red.csv")
    assert run(["compare", "--optimal", fb, "--benchmark", ft, "--out", out]) == 0
    h, cols, rows = _read_csv(out)
    assert cols == ["rate", "taxiing_reduction_pct"]
    assert h == config_hash(str(workdir / "toy.json"))
    rates = [float(r["rate"]) for r in rows]
    assert rates == sorted(rates)
    assert all(abs(float(r["taxiing_reduction_pct"])) < 50.0 for r in rows)
    _check_manifest(out)


def test_compare_rejects_mixed_configs(workdir, frontiers, capsys):
    fb, _ = frontiers
    alien = str(workdir / "alien.csv")
    with open(fb) as f:
        body = f.read().splitlines()
    body[0] = "# config_hash=feedfacecafe"
    with open(alien, "w") as f:
        f.write("\n".join(body) + "\n")
    assert run(["compare", "--optimal", fb, "--benchmark", alien,
                "--out", str(workdir / "x.csv")]) == 1
    assert "different configs" in capsys.readouterr().err


# -------------------------------------------------- calibrate and validate
def _write_ops_fixture(d, curve, sat_rate_draws=None, seed=3):
    """counts.csv realizing given (count, rate) bins deterministically,
    flights.csv with two ramps of distinct unimpeded taxi times."""
    rng = np.random.default_rng(seed)
    counts = d / "counts.csv"
    with counts.open("w") as fh:
        fh.write("minute,n_taxiing,n_takeoffs\n")
        mn = 0
        for c, r in curve:
            n1 = int(round(1000 * r))
            for j in range(1000):
                fh.write(f"{mn},{c},{1 if j < n1 else 0}\n")
                mn += 1
        if sat_rate_draws is not None:
            for _ in range(4000):
                n_toff = int(rng.random() < 0.514) + int(rng.random() < 0.0929)
                fh.write(f"{mn},16,{n_toff}\n")
                mn += 1
    flights = d / "flights.csv"
    with flights.open("w") as fh:
        fh.write("flight_id,ramp_id,pushback_minute,wheels_off_minute\n")
        for i in range(1000):
            ramp = "CD" if i % 3 else "AB"
            base = 13.56 if ramp == "CD" else 8.0
            taxi = max(4, int(round(rng.normal(base, 2.0))))
            fh.write(f"FL{i},{ramp},{2 * i},{2 * i + taxi}\n")
    return str(flights), str(counts)


def test_calibrate_recovers_generator(workdir):
    flights, counts = _write_ops_fixture(workdir, [(2, 0.0)], sat_rate_draws=True)
    out = str(workdir / "params.json")
    assert run(["calibrate", "--flights", flights, "--counts", counts,
                "--out", out]) == 0
    payload = json.load(open(out))
    assert abs(payload["params"]["c1"] - 0.514) < 0.03
    assert abs(payload["params"]["c2"] - 0.0929) < 0.03
    assert 0.85 < payload["params"]["m"] <= 1.0
    assert payload["ramp_path_lengths"]["CD"] > payload["ramp_path_lengths"]["AB"]
    core = {k: v for k, v in payload.items() if k != "config_hash"}
    assert payload["config_hash"] == config_hash(core)
    _check_manifest(out)


def test_validate_recovers_constructed_shift(workdir, toy):
    # data curve = the model's own threshold curve shifted 3 counts right
    from tarmac.evaluator import sweep as ev_sweep

    model = cached_transition_model(load_topology(toy), config_hash(toy))
    cmax = int(model.decoded()["count"].max())
    pts = ev_sweep(model, "threshold_sweep", list(range(cmax + 1)))
    curve = [(int(p.param) + 3, p.report.avg_takeoff_rate) for p in pts]
    flights, counts = _write_ops_fixture(workdir, curve)
    out = str(workdir / "curve.csv")
    assert run(["validate", "--airport", toy, "--flights", flights,
                "--counts", counts, "--saturation-threshold", str(cmax + 2),
                "--out", out]) == 0
    lines = open(out).read().splitlines()
    assert lines[1] == "# shift=3"
    _, cols, rows = _read_csv(out)
    assert cols == ["curve", "count", "rate_per_min"]
    assert {r["curve"] for r in rows} == {"model", "data"}
    _check_manifest(out)
