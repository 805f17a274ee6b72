import csv
import json
import math

import numpy as np
import pytest

from conftest import make_household, observed_households
from wealthineq import cli, files
from wealthineq.indices import WeightedSample, evaluate_index, linearized_variance, parse_index
from wealthineq.synth import SynthConfig, simulate

SMALL = {"N": 2000, "m": 200, "seed": 3}


def _write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _read_report(path):
    with open(path) as fh:
        return {r["index"]: r for r in csv.DictReader(fh)}


# --- file formats ------------------------------------------------------------

def test_household_round_trip(tmp_path):
    cfg = SynthConfig(**SMALL)
    _, cs = simulate(cfg, seed=3)
    p = tmp_path / "h.csv"
    files.write_households(p, cs.households, cfg.slope_names)
    back, names = files.read_households(p)
    assert names == cfg.slope_names
    assert back == cs.households


def test_round_trip_keeps_optional_fields(tmp_path):
    h = make_household("a", 2.5, 8, financial_sum_bracket=(10.0, math.inf), financial_sum_components=(0, 3),
                       pays_wealth_tax=False, debt=12.0, nded_min=1.0, nded_max=2.0, cap=5e6)
    g = make_household("b", 1.0, 1)
    p = tmp_path / "h.csv"
    files.write_households(p, [h, g], [[]] * 5)
    back, _ = files.read_households(p)
    assert back == [h, g]


def test_empty_bounds_read_as_zero_and_infinity(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("id,weight,d1,d2,d3,d4,d5,lo_1,hi_1,lo_5,hi_5\nx,1,1,0,0,0,1,,,5,\n")
    (h,), _ = files.read_households(p)
    assert h.component_brackets[0] == (0.0, math.inf) and h.component_brackets[4] == (5.0, math.inf)
    assert h.pays_wealth_tax is None


@pytest.mark.parametrize("body, msg", [
    ("x,1,1,0,0,0,1\nx,1,1,0,0,0,1\n", "row 2 (id x): duplicate id"),
    ("x,1,2,0,0,0,1\n", "row 1 (id x): ownership flags"),
    ("x,abc,1,0,0,0,1\n", "row 1 (id x): weight: not a number"),
    ("x,1,0,0,0,0,1\n", "row 1"),
])
def test_format_errors_name_the_row(tmp_path, body, msg):
    p = tmp_path / "h.csv"
    p.write_text("id,weight,d1,d2,d3,d4,d5\n" + body)
    with pytest.raises(files.FormatError, match=msg.replace("(", r"\(").replace(")", r"\)")):
        files.read_households(p)


def test_missing_columns(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("id,weight\nx,1\n")
    with pytest.raises(files.FormatError, match="missing column"):
        files.read_households(p)


def test_safe_names():
    assert files.safe_name("P90/P10") == "P90_P10"
    assert files.safe_name("Atkinson(1.5)") == "Atkinson_1.5"


# --- estimate ----------------------------------------------------------------

@pytest.fixture
def observed_csv(tmp_path, rng):
    v = np.zeros((40, 5))
    v[:, 0] = np.exp(10 + rng.standard_normal(40))
    v[:, 4] = np.exp(9 + rng.standard_normal(40))
    w = rng.uniform(1, 4, 40)
    p = tmp_path / "obs.csv"
    files.write_households(p, observed_households(v, w), [[]] * 5)
    return p, v.sum(axis=1), w


def test_estimate_on_observed_data_matches_direct_computation(tmp_path, observed_csv):
    p, t, w = observed_csv
    conf = _write_json(tmp_path / "run.json", {"T": 3000, "B": 200, "indices": ["gini", "mean", "P90/P10"]})
    out = tmp_path / "out"
    assert cli.main(["estimate", str(p), "--config", conf, "--out", str(out), "--seed", "4"]) == 0
    rep = _read_report(out / "report.csv")
    s = WeightedSample(t, w)
    for name in ("gini", "mean", "P90/P10"):
        spec = parse_index(name)
        direct, var = evaluate_index(spec, s), linearized_variance(spec, s)
        pred = float(rep[spec.label]["prediction"])
        assert abs(pred - direct) <= 3 * math.sqrt(var) / math.sqrt(2800) + 1e-12 * abs(direct)
    for name in ("report.txt", "diagnostics.csv", "series.csv", "manifest.json", "traces/Gini.csv"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 4 and manifest["chain_seeds"] == [4]
    assert manifest["input_sha256"] == files.file_sha256(p)


def test_estimate_is_byte_reproducible(tmp_path, observed_csv):
    p, _, _ = observed_csv
    conf = _write_json(tmp_path / "run.json", {"T": 300, "B": 50})
    for d in ("a", "b"):
        assert cli.main(["estimate", str(p), "--config", conf, "--out", str(tmp_path / d), "--seed", "9"]) == 0
    for name in ("report.csv", "report.txt", "series.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_multiple_chains_pool_after_burn_in(tmp_path, observed_csv):
    p, _, _ = observed_csv
    conf = _write_json(tmp_path / "run.json", {"T": 200, "B": 20, "indices": ["gini"]})
    out = tmp_path / "o"
    assert cli.main(["estimate", str(p), "--config", conf, "--out", str(out), "--chains", "2",
                     "--jobs", "2", "--trace-theta"]) == 0
    assert (out / "series_chain2.csv").exists() and (out / "theta_chain1.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["chain_seeds"] == [0, 1]
    with open(out / "diagnostics.csv") as fh:
        assert len(fh.readlines()) == 1 + 2


def test_inverted_bracket_exits_2_naming_the_row(tmp_path, capsys):
    h = [make_household(f"h{k}", brackets={0: (1.0, 2.0), 4: (1.0, 2.0)}) for k in range(3)]
    h.append(make_household("bad", brackets={0: (5.0, 3.0), 4: (1.0, 2.0)}))
    p = tmp_path / "h.csv"
    files.write_households(p, h, [[]] * 5)
    assert cli.main(["estimate", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "row 4 (id bad)" in capsys.readouterr().err


def test_infeasible_data_exits_1_with_report(tmp_path):
    h = [make_household(f"h{k}", brackets={0: (1.0, 2.0), 4: (1.0, 2.0)}) for k in range(3)]
    h.append(make_household("poor", brackets={0: (0.0, 1000.0), 4: (0.0, 1000.0)}, pays_wealth_tax=True))
    p = tmp_path / "h.csv"
    files.write_households(p, h, [[]] * 5)
    out = tmp_path / "o"
    assert cli.main(["estimate", str(p), "--out", str(out)]) == 1
    with open(out / "infeasible.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["id"] == "poor" for r in rows)


def test_small_group_exits_2(tmp_path):
    p = tmp_path / "h.csv"
    files.write_households(p, [make_household("a", brackets={0: (1.0, 2.0), 4: (1.0, 2.0)})], [[]] * 5)
    assert cli.main(["estimate", str(p), "--out", str(tmp_path / "o")]) == 2


def test_bad_run_config_exits_2(tmp_path, observed_csv):
    p, _, _ = observed_csv
    conf = _write_json(tmp_path / "run.json", {"T": 10, "B": 20})
    assert cli.main(["estimate", str(p), "--config", conf, "--out", str(tmp_path / "o")]) == 2
    conf = _write_json(tmp_path / "run2.json", {"T": 10, "B": 0, "indices": ["nonsense"]})
    assert cli.main(["estimate", str(p), "--config", conf, "--out", str(tmp_path / "o")]) == 2


def test_degenerate_fit_exits_3(tmp_path):
    v = np.zeros((5, 5))
    v[:, 0], v[:, 4] = 1000.0, 2000.0
    p = tmp_path / "h.csv"
    files.write_households(p, observed_households(v), [[]] * 5)
    conf = _write_json(tmp_path / "run.json", {"T": 10, "B": 0})
    assert cli.main(["estimate", str(p), "--config", conf, "--out", str(tmp_path / "o")]) == 3


# --- synth and validate ------------------------------------------------------

def test_synth_then_validate(tmp_path, capsys):
    conf = _write_json(tmp_path / "s.json", SMALL)
    out = tmp_path / "s"
    assert cli.main(["synth", conf, "--out", str(out)]) == 0
    for name in ("households.csv", "truth.csv", "population_indices.csv", "manifest.json"):
        assert (out / name).exists()
    hh, _ = files.read_households(out / "households.csv")
    assert len(hh) == 200
    assert cli.main(["validate", str(out / "households.csv")]) == 0
    assert "200 households valid" in capsys.readouterr().out


def test_validate_reports_infeasible_households(tmp_path, capsys):
    h = [make_household("ok"), make_household("poor", brackets={0: (0.0, 10.0), 4: (0.0, 10.0)},
                                               pays_wealth_tax=True)]
    p = tmp_path / "h.csv"
    files.write_households(p, h, [[]] * 5)
    assert cli.main(["validate", str(p), "--out", str(tmp_path / "v")]) == 1
    out = capsys.readouterr().out
    assert out.startswith("id,constraint,slack") and "poor" in out and "ok," not in out
    assert (tmp_path / "v" / "infeasible.csv").exists()


def test_malformed_synth_config_exits_2(tmp_path):
    conf = _write_json(tmp_path / "s.json", {"N": 10, "m": 20})
    assert cli.main(["synth", conf, "--out", str(tmp_path / "s")]) == 2


# --- coverage ----------------------------------------------------------------

def test_coverage_smoke_run(tmp_path):
    conf = _write_json(tmp_path / "s.json", dict(SMALL, run={"T": 2000, "B": 200, "indices": ["gini", "mean"]}))
    out = tmp_path / "c"
    assert cli.main(["coverage", conf, "-R", "1", "--out", str(out)]) == 0
    with open(out / "coverage.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 * 2
    assert {r["index"] for r in rows} == {"Gini", "Mean"}
    with open(out / "coverage_summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert [s["index"] for s in summary] == ["Gini", "Mean"]


def test_coverage_rows_are_replications_times_indices():
    synth = SynthConfig(**SMALL)
    run_cfg = cli.RunConfig(T=300, B=50, indices=["gini", "P90", "theil"])
    rows = cli.run_coverage(synth, run_cfg, 2)
    assert len(rows) == 2 * 3
    assert [r["replication"] for r in rows] == [1, 1, 1, 2, 2, 2]


@pytest.mark.slow
def test_uncensored_coverage_is_nominal():
    exact = [{"kind": "exact"}] * 5
    synth = SynthConfig(**dict(SMALL, brackets=exact))
    run_cfg = cli.RunConfig(T=2000, B=200, indices=["gini"])
    R = 50
    rows = cli.run_coverage(synth, run_cfg, R)
    covered = sum(r["covered"] for r in rows)
    band = 3 * math.sqrt(R * 0.95 * 0.05)
    assert abs(covered - 0.95 * R) <= band, covered
