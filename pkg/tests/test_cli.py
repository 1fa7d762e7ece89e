import csv
import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hmtplan.cli import main
from hmtplan.cost.calibrate import CSV_HEADER, synthesize
from hmtplan.cost.profiles import load_fleet

SMALL_SPACE = {"optimizer_version": 1,
               "space": {"families": {"channel_prune": [0.5]}, "exits": [2, 3],
                         "placements": ["local", "offload"], "quant_bits": [32, 8]},
               "search": "evolve", "population": 8, "generations": 10}


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return str(path)


def test_plan_writes_feasible_document(tmp_path):
    out = tmp_path / "plan.json"
    assert main(["plan", "--model", "zoo:resnet18", "--fleet", "vehicle_drone", "--out", str(out)]) == 0
    doc = read_json(out)
    assert doc["plan_version"] == 1 and doc["feasible"] is True
    est = doc["estimate"]
    assert est["T"] > 0 and est["E"] > 0 and est["M"] > 0 and est["devices"] == ["drone-cpu"]
    assert doc["deployment"]["fusion_groups"]


def test_plan_over_budget_exits_three(tmp_path):
    out = tmp_path / "plan.json"
    code = main(["plan", "--model", "zoo:resnet18", "--fleet", "single_cpu", "--budget-mem", "1000",
                 "--out", str(out)])
    assert code == 3 and read_json(out)["feasible"] is False


def test_plan_training_and_offload(tmp_path):
    out = tmp_path / "t.json"
    assert main(["plan", "--model", "zoo:mobilenetv2", "--fleet", "single_cpu", "--training", "--budget-mem",
                 "30000000", "--out", str(out)]) == 0
    doc = read_json(out)
    assert doc["deployment"]["training"]["actions"] and doc["estimate"]["M"] <= 30_000_000
    out = tmp_path / "o.json"
    assert main(["plan", "--model", "zoo:resnet18", "--fleet", "vehicle_drone", "--placement", "offload",
                 "--out", str(out)]) == 0
    assert read_json(out)["estimate"]["offloaded"] is True


@pytest.mark.parametrize("argv,code", [
    (["plan", "--model", "zoo:alexnet", "--fleet", "single_cpu"], 1),
    (["plan", "--model", "zoo:resnet18", "--fleet", "nowhere"], 1),
    (["plan", "--model", "zoo:resnet18"], 1),
    (["bogus"], 1),
    (["plan", "--model", "zoo:resnet18", "--fleet", "single_cpu", "--placement", "offload"], 0),
    (["plan", "--model", "zoo:resnet18", "--fleet", "single_cpu", "--device", "elsewhere"], 1),
])
def test_exit_codes(argv, code, tmp_path):
    assert main(argv + ["--out", str(tmp_path / "x.json")] if argv[0] == "plan" and code != 1 else argv) == code


def test_plan_is_byte_deterministic(tmp_path):
    paths = []
    for i in range(2):
        p = tmp_path / f"p{i}.json"
        assert main(["plan", "--model", "zoo:resnet18", "--fleet", "vehicle_drone", "--placement", "offload",
                     "--seed", "3", "--out", str(p)]) == 0
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


@pytest.mark.parametrize("scenario", ["tableV_budgets", "case_study_e1e2e3"])
def test_simulate_bundles_pass(scenario, tmp_path, capsys):
    out = tmp_path / scenario
    assert main(["simulate", "--scenario", scenario, "--out", str(out)]) == 0
    verdicts = read_json(out / "verdicts.json")
    assert verdicts["pass"] is True
    text = capsys.readouterr().out
    assert "FAIL" not in text and "PASS" in text
    with open(out / "timeline.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"t", "candidate_id", "A", "T", "E", "M_peak", "feasible", "switched"}
    assert len(os.listdir(out / "steps")) == len(rows)


def test_simulate_empty_trace_exits_one(tmp_path):
    trace = write_json(tmp_path / "trace.json", [])
    cfg = write_json(tmp_path / "opt.json", SMALL_SPACE)
    code = main(["simulate", "--model", "zoo:resnet18", "--fleet", "vehicle_drone", "--trace", trace,
                 "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 1


def test_simulate_loose_files(tmp_path):
    trace = write_json(tmp_path / "trace.json", [{"t": 0, "M_bgt": "100%", "T_bgt": "100%", "battery": 0.9},
                                                 {"t": 1, "M_bgt": "60%", "T_bgt": "100%", "battery": 0.4}])
    cfg = write_json(tmp_path / "opt.json", SMALL_SPACE)
    assert main(["simulate", "--model", "zoo:resnet18", "--fleet", "vehicle_drone", "--trace", trace,
                 "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "front.json").exists()


def test_simulate_needs_inputs(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "o")]) == 1


def test_pareto_compare_and_audit(tmp_path):
    cfg = write_json(tmp_path / "opt.json", SMALL_SPACE)
    out = tmp_path / "front"
    assert main(["pareto", "--model", "zoo:resnet18", "--fleet", "vehicle_drone", "--config", cfg, "--compare",
                 "--out", str(out)]) == 0
    doc = read_json(out / "front.json")
    assert doc["oracle"]["subset"] is True and 0.0 < doc["oracle"]["coverage"] <= 1.0
    with open(out / "front.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["candidate_id", "A", "E", "T", "M"]
    assert len(rows) == len(doc["candidates"])
    report = tmp_path / "audit.json"
    assert main(["audit", "--front", str(out / "front.json"), "--out", str(report)]) == 0
    assert read_json(report)["violations"] == []


def test_audit_catches_dominated_member(tmp_path):
    cfg = write_json(tmp_path / "opt.json", SMALL_SPACE)
    out = tmp_path / "front"
    assert main(["pareto", "--model", "zoo:resnet18", "--fleet", "vehicle_drone", "--config", cfg, "--exact",
                 "--out", str(out)]) == 0
    doc = read_json(out / "front.json")
    worse = json.loads(json.dumps(doc["candidates"][0]))
    worse["id"] = "cworse"
    worse["estimate"]["A"] -= 1.0
    worse["estimate"]["E"] *= 2.0
    doc["candidates"].append(worse)
    bad = write_json(tmp_path / "bad.json", doc)
    assert main(["audit", "--front", bad, "--out", str(tmp_path / "r.json")]) == 4


def test_calibrate_round_trip(tmp_path):
    fleet = load_fleet("vehicle_drone")
    dev = fleet.devices["vehicle-gpu"]
    rows = synthesize(dev, 30, np.random.default_rng(0))
    csv_path = tmp_path / "m.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([repr(r.C), repr(r.M), repr(r.eps), repr(r.T), repr(r.E)])
    out = tmp_path / "cal.json"
    assert main(["calibrate", "--measurements", str(csv_path), "--fleet", "vehicle_drone", "--device", "vehicle-gpu",
                 "--out", str(out)]) == 0
    doc = read_json(out)
    assert doc["calibration_version"] == 1
    got = doc["profile"]
    for k in ("lambda1", "lambda2", "lambda3", "delta1", "delta2", "delta3", "delta_sm"):
        assert got[k] == pytest.approx(getattr(dev, k), rel=1e-9)
    (tmp_path / "few.csv").write_text(",".join(CSV_HEADER) + "\n1,2,0.5,3,4\n")
    assert main(["calibrate", "--measurements", str(tmp_path / "few.csv"), "--fleet", "vehicle_drone",
                 "--device", "vehicle-gpu", "--out", str(out)]) == 2


def test_seed_env_and_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("HMTPLAN_SEED", "7")
    p = tmp_path / "a.json"
    assert main(["plan", "--model", "zoo:mobilenetv2", "--fleet", "single_cpu", "--out", str(p)]) == 0
    assert read_json(p)["seed"] == 7
    assert main(["plan", "--model", "zoo:mobilenetv2", "--fleet", "single_cpu", "--seed", "2", "--out", str(p)]) == 0
    assert read_json(p)["seed"] == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hmtplan", "plan", "--model", "zoo:mobilenetv2", "--fleet",
                          "single_cpu"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    assert json.loads(res.stdout)["feasible"] is True


def test_simulate_outputs_identical_across_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["simulate", "--scenario", "tableV_budgets", "--seed", "1", "--out", str(d)]) == 0
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert all(filecmp.cmp(a / "steps" / f, b / "steps" / f, shallow=False) for f in os.listdir(a / "steps"))
