import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hmpinfer import cli
from hmpinfer.model import ModelConfig, init_random, model_weight_bytes, random_input, reference_forward, save_weights
from hmpinfer.planner import CON, MHA, MLP, PartitionPlan
from hmpinfer.profiler import ProfileReport, build_report
from hmpinfer.report import RunReport
from hmpinfer.runtime.cluster import LocalCluster, free_ports
from hmpinfer.runtime.config import loopback_cluster
from hmpinfer.tensor_core import max_rel_error

pytestmark = pytest.mark.slow

MODEL = ["--layers", "2", "--hidden", "64", "--heads", "4"]


@pytest.fixture(scope="module")
def live(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cluster = loopback_cluster(2, timeout=5.0)
    path = d / "cluster.json"
    cluster.save(path)
    with LocalCluster(cluster):
        yield d, str(path)


@pytest.fixture(scope="module")
def planned(live):
    d, cl = live
    prof, plan = d / "profile.json", d / "plan.json"
    assert cli.main(["profile", "--cluster", cl, *MODEL, "--seq", "24", "--reps", "3", "--warmup", "1",
                     "--out", str(prof)]) == 0
    assert cli.main(["plan", "--profile", str(prof), "--out", str(plan)]) == 0
    return prof, plan


def test_profile_and_plan_files(planned):
    prof, plan = planned
    report = ProfileReport.load(prof)
    assert report.model == ModelConfig(2, 4, 64)
    assert [d.device_id for d in report.devices] == ["dev0", "dev1"]
    assert report.calibration["seq"] == 24
    doc = json.loads(plan.read_text())
    p = PartitionPlan.from_dict(doc["plan"])
    assert sum(p.A) == 4 and sum(p.B) == 256 and sum(p.S) == 24
    assert doc["devices"] == ["dev0", "dev1"]
    assert len(doc["estimated_memory"]) == 2
    # the model recorded in the profile is reused by the plan
    assert ModelConfig.from_dict(doc["model"]) == report.model


def test_run_verify_report_and_output(live, planned, tmp_path, capsys):
    _, cl = live
    _, plan = planned
    rep, out = tmp_path / "run.json", tmp_path / "y.npy"
    rc = cli.main(["run", "--cluster", cl, "--plan", str(plan), "--seed", "7", "--verify",
                   "--report", str(rep), "--output", str(out)])
    assert rc == 0
    assert "verify: max relative error" in capsys.readouterr().out
    cfg = ModelConfig(2, 4, 64)
    y_ref = reference_forward(init_random(cfg, 7), random_input(cfg, 24, 8))
    assert max_rel_error(np.load(out), y_ref) <= 1e-4
    report = RunReport.load(rep)
    assert report.max_rel_error <= 1e-4
    assert report.env["mode"] == "hmp" and report.env["overlap"] is True
    assert report.plan.seq == 24


def test_run_with_input_and_checkpoint(live, planned, tmp_path):
    _, cl = live
    _, plan = planned
    cfg = ModelConfig(2, 4, 64)
    model = init_random(cfg, 11)
    save_weights(model, tmp_path / "w.bin")
    x = random_input(cfg, 9, 0)
    np.save(tmp_path / "x.npy", x)
    rc = cli.main(["run", "--cluster", cl, "--plan", str(plan), "--weights", str(tmp_path / "w.bin"),
                   "--input", str(tmp_path / "x.npy"), "--output", str(tmp_path / "y.npy"),
                   "--mode", "sp-only", "--overlap", "off", "--verify"])
    assert rc == 0
    assert max_rel_error(np.load(tmp_path / "y.npy"), reference_forward(model, x)) <= 1e-4


def test_checksum_stable_across_repeated_runs(live, planned, tmp_path):
    _, cl = live
    _, plan = planned
    sums = set()
    for i in range(3):
        rep = tmp_path / f"r{i}.json"
        assert cli.main(["run", "--cluster", cl, "--plan", str(plan), "--report", str(rep)]) == 0
        sums.add(RunReport.load(rep).checksum)
    assert len(sums) == 1


def test_verify_failure_exit_code(live, planned, capsys):
    _, cl = live
    _, plan = planned
    rc = cli.main(["run", "--cluster", cl, "--plan", str(plan), "--verify", "--tolerance", "0"])
    out = capsys.readouterr().out
    assert "FAILED" in out
    assert rc == cli.EXIT_VERIFY


def test_bench_csv(live, planned, tmp_path, capsys):
    _, cl = live
    _, plan = planned
    out = tmp_path / "bench.csv"
    rc = cli.main(["bench", "--cluster", cl, "--plan", str(plan), "--repeat", "2", "--sweep", "50,100,200,400",
                   "--overlap", "on,off", "--csv", str(out), "--reports-dir", str(tmp_path / "reports")])
    assert rc == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 * 4 * 2
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert {r["bandwidth"] for r in rows} == {"50", "100", "200", "400"}
    assert {r["overlap"] for r in rows} == {"on", "off"}
    assert len({r["bytes"] for r in rows}) == 1
    assert len(list((tmp_path / "reports").glob("*.json"))) == 16
    summary = capsys.readouterr().out
    assert "median_ms" in summary and "p90_ms" in summary


def test_bench_modes_differ_in_bytes(live, planned, tmp_path):
    _, cl = live
    _, plan = planned
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "--cluster", cl, "--plan", str(plan), "--repeat", "1", "--modes",
                     "hmp,tp-allreduce,sp-only", "--overlap", "off", "--csv", str(out)]) == 0
    with open(out) as f:
        rows = {r["mode"]: int(r["bytes"]) for r in csv.DictReader(f)}
    assert rows["hmp"] != rows["tp-allreduce"]
    assert set(rows) == {"hmp", "tp-allreduce", "sp-only"}


def _profile_file(path, budgets, cfg=ModelConfig(2, 4, 64)):
    tables = [{MHA: {4: 0.01}, MLP: {256: 0.02}, CON: {8: 0.001}}] * len(budgets)
    build_report(cfg, [f"d{i}" for i in range(len(budgets))], budgets, tables, 8, 3, 1).save(path)


def test_plan_infeasible_exit_code(tmp_path, capsys):
    prof = tmp_path / "p.json"
    _profile_file(prof, [1000.0, 1000.0])
    rc = cli.main(["plan", "--profile", str(prof), "--out", str(tmp_path / "plan.json")])
    assert rc == cli.EXIT_INFEASIBLE
    err = capsys.readouterr().err
    assert "d0:" in err and "d1:" in err and "bytes over budget" in err
    assert not (tmp_path / "plan.json").exists()


def test_plan_with_budgets_and_model_override(tmp_path):
    prof, out = tmp_path / "p.json", tmp_path / "plan.json"
    cfg = ModelConfig(2, 4, 64)
    total = model_weight_bytes(cfg)
    _profile_file(prof, [total * 0.35, float("inf")])
    assert cli.main(["plan", "--profile", str(prof), "--seq", "10", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["estimated_memory"][0] <= total * 0.35
    assert doc["budgets"] == [total * 0.35, None]
    assert sum(doc["plan"]["S"]) == 10
    assert cli.main(["plan", "--profile", str(prof), "--layers", "1", "--hidden", "64", "--heads", "4",
                     "--out", str(out)]) == 0
    assert json.loads(out.read_text())["model"]["num_layers"] == 1


def test_unreachable_workers_exit_code(tmp_path, planned, capsys):
    _, plan = planned
    path = tmp_path / "c.json"
    loopback_cluster(2, ports=free_ports(2), timeout=0.3).save(path)
    rc = cli.main(["run", "--cluster", str(path), "--plan", str(plan)])
    assert rc == cli.EXIT_CONNECTIVITY
    assert "rank 0" in capsys.readouterr().err


def test_io_error_exit_codes(tmp_path, planned):
    prof, plan = planned
    assert cli.main(["plan", "--profile", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == cli.EXIT_IO
    assert cli.main(["plan", "--profile", str(prof), "--out", str(tmp_path / "no" / "dir" / "x")]) == cli.EXIT_IO


def test_unwritable_report_fails_before_running(live, planned, tmp_path):
    _, cl = live
    _, plan = planned
    rc = cli.main(["run", "--cluster", cl, "--plan", str(plan), "--report", str(tmp_path / "nope" / "r.json")])
    assert rc == cli.EXIT_IO


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["run", "--plan", "p.json"],
    ["run", "--cluster", "c.json", "--plan", "p.json", "--overlap", "maybe"],
    ["plan", "--profile", "p.json"],
])
def test_usage_errors_exit_64(argv):
    with pytest.raises(SystemExit) as ei:
        cli.main(argv)
    assert ei.value.code == cli.EXIT_USAGE


def test_bad_plan_file_is_usage_error(live, tmp_path):
    _, cl = live
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"A": [1]}))
    assert cli.main(["run", "--cluster", cl, "--plan", str(bad)]) == cli.EXIT_USAGE
    assert cli.main(["bench", "--cluster", cl, "--plan", str(bad), "--csv", str(tmp_path / "x.csv")]) == cli.EXIT_USAGE


def test_budget_exceeded_exit_code(tmp_path, planned):
    _, plan = planned
    cfg = ModelConfig(2, 4, 64)
    cluster = loopback_cluster(2, budgets=[int(model_weight_bytes(cfg) * 0.6)] * 2)
    path = tmp_path / "c.json"
    cluster.save(path)
    args = ["run", "--cluster", str(path), "--spawn", "--plan", str(plan)]
    assert cli.main(args + ["--mode", "sp-only"]) == cli.EXIT_BUDGET


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "hmpinfer", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
    out = subprocess.run([sys.executable, "-m", "hmpinfer", "nope"], capture_output=True, text=True)
    assert out.returncode == cli.EXIT_USAGE


def test_plan_equal_capacities_symmetric(tmp_path):
    prof, out = tmp_path / "p.json", tmp_path / "plan.json"
    _profile_file(prof, [float("inf")] * 2)
    assert cli.main(["plan", "--profile", str(prof), "--out", str(out)]) == 0
    p = PartitionPlan.from_dict(json.loads(out.read_text())["plan"])
    assert p.A == (2, 2) and p.B == (128, 128) and p.S == (4, 4)


def test_json_artifacts_round_trip_byte_identical(planned, tmp_path):
    prof, plan = planned
    report = ProfileReport.load(prof)
    report.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_text() == prof.read_text()
    doc = json.loads(plan.read_text())
    assert cli._dump(doc) == plan.read_text()
    assert PartitionPlan.from_dict(doc["plan"]).to_dict() == doc["plan"]


@pytest.fixture(scope="module")
def trio_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("trio")
    cluster = loopback_cluster(3, timeout=10.0)
    cluster.save(d / "cluster.json")
    cfg = ModelConfig(6, 4, 64)
    plan = PartitionPlan.even(cfg, 3, 20)
    (d / "plan.json").write_text(cli._dump({"schema_version": cli.PLAN_SCHEMA_VERSION, "model": cfg.to_dict(),
                                            "plan": plan.to_dict()}))
    with LocalCluster(cluster):
        yield d


def test_verify_six_layers_three_workers(trio_files, capsys):
    d = trio_files
    rc = cli.main(["run", "--cluster", str(d / "cluster.json"), "--plan", str(d / "plan.json"), "--verify"])
    assert rc == 0
    err = float(capsys.readouterr().out.split("max relative error ")[1].split()[0])
    assert err <= 1e-4


def test_modes_same_output_different_bytes(trio_files):
    d = trio_files
    outs, reports = {}, {}
    for mode in ("hmp", "tp-allreduce"):
        y, r = d / f"{mode}.npy", d / f"{mode}.json"
        assert cli.main(["run", "--cluster", str(d / "cluster.json"), "--plan", str(d / "plan.json"), "--seed", "3",
                         "--mode", mode, "--output", str(y), "--report", str(r)]) == 0
        outs[mode], reports[mode] = np.load(y), RunReport.load(r)
    assert max_rel_error(outs["hmp"], outs["tp-allreduce"]) <= 1e-5
    assert reports["hmp"].collective_bytes != reports["tp-allreduce"].collective_bytes


def test_bench_latency_nonincreasing_in_bandwidth(tmp_path):
    cluster = loopback_cluster(3, timeout=10.0)
    cluster.save(tmp_path / "cluster.json")
    cfg = ModelConfig(1, 4, 256)
    plan = PartitionPlan.even(cfg, 3, 128)
    (tmp_path / "plan.json").write_text(cli._dump({"schema_version": cli.PLAN_SCHEMA_VERSION, "model": cfg.to_dict(),
                                                  "plan": plan.to_dict()}))
    out = tmp_path / "bench.csv"
    rc = cli.main(["bench", "--cluster", str(tmp_path / "cluster.json"), "--spawn", "--plan", str(tmp_path / "plan.json"),
                   "--repeat", "5", "--sweep", "10,40,160", "--overlap", "on", "--csv", str(out)])
    assert rc == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    med = {bw: np.median([float(r["latency_ms"]) for r in rows if r["bandwidth"] == bw]) for bw in ("10", "40", "160")}
    assert med["40"] <= med["10"] * 1.1
    assert med["160"] <= med["40"] * 1.1
