import filecmp
import json
import logging
import os

import pytest
import yaml

from forklab import expcli
from forklab.records import read_csv, read_json, read_jsonl, write_jsonl

GRAPH_DATASET = {"kind": "graph", "spec": {"branches": 2, "path_len": 3, "train_size": 20, "test_size": 10}}
MANIFESTS_DIR = os.path.join(os.path.dirname(__file__), "..", "manifests")
SIM_BACKEND = {"kind": "simulated", "label": "sim", "policy": {"kind": "fixed", "probs": [0.5, 0.5]}, "slip": 0.05}


def write_manifest(directory, **overrides):
    manifest = {
        "schema": 1,
        "name": "unit",
        "seed": 7,
        "dataset": GRAPH_DATASET,
        "backends": [SIM_BACKEND],
        "decode": {"profile": "graph", "n": 8},
        "ks": [1, 2, 4, 8],
        **overrides,
    }
    path = directory / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest))
    return str(path)


def run(stage, manifest, out, *extra):
    return expcli.main([stage, "--manifest", manifest, "--out", str(out), *extra])


def run_pipeline(manifest, out):
    for stage in ("gen", "sample", "grade", "report"):
        assert run(stage, manifest, out) == expcli.EXIT_OK


def test_gen_writes_dataset(tmp_path, capsys):
    manifest = write_manifest(tmp_path, mix={"structure": "data_level", "mode_ratio": 0.5})
    assert run("gen", manifest, tmp_path / "runs") == expcli.EXIT_OK
    data = tmp_path / "runs" / "unit" / "data"
    assert len(read_jsonl(str(data / "train.jsonl"))) == 20
    assert len(read_jsonl(str(data / "instances.jsonl"))) == 10
    assert len(read_jsonl(str(data / "mix.jsonl"))) == 20
    assert "20 train / 10 test instances, branches=2, path_len=3, 7 rules per prompt" in capsys.readouterr().out
    record = read_json(str(tmp_path / "runs" / "unit" / "run.json"))
    assert record["stages"]["gen"] == "completed"


def test_test_only_manifest(tmp_path):
    dataset = {"kind": "graph", "spec": {"branches": 2, "path_len": 3, "train_size": 0, "test_size": 5}}
    manifest = write_manifest(tmp_path, dataset=dataset)
    assert run("gen", manifest, tmp_path / "runs") == expcli.EXIT_OK
    data = tmp_path / "runs" / "unit" / "data"
    assert (data / "instances.jsonl").exists()
    assert not (data / "train.jsonl").exists()


def test_pipeline_is_byte_deterministic(tmp_path):
    manifest = write_manifest(tmp_path)
    run_pipeline(manifest, tmp_path / "a")
    run_pipeline(manifest, tmp_path / "b")
    for name in ("data/instances.jsonl", "samples.jsonl", "graded.jsonl", "report.json", "pass_at_k.csv"):
        assert filecmp.cmp(tmp_path / "a" / "unit" / name, tmp_path / "b" / "unit" / name, shallow=False), name

    report = read_json(str(tmp_path / "a" / "unit" / "report.json"))
    assert report["n"] == 8
    assert report["ks"] == [1, 2, 4, 8]
    assert len(report["per_problem_c"]) == 10
    assert report["meta"]["seed"] == 7


def test_seed_override_changes_the_data(tmp_path):
    manifest = write_manifest(tmp_path)
    assert run("gen", manifest, tmp_path / "a") == expcli.EXIT_OK
    assert run("gen", manifest, tmp_path / "b", "--seed", "8") == expcli.EXIT_OK
    assert not filecmp.cmp(
        tmp_path / "a" / "unit" / "data" / "instances.jsonl",
        tmp_path / "b" / "unit" / "data" / "instances.jsonl",
        shallow=False,
    )


def test_resume_does_not_duplicate_samples(tmp_path):
    manifest = write_manifest(tmp_path)
    out = tmp_path / "runs"
    assert run("gen", manifest, out) == expcli.EXIT_OK
    assert run("sample", manifest, out) == expcli.EXIT_OK
    assert run("sample", manifest, out, "--resume") == expcli.EXIT_OK
    samples = read_jsonl(str(out / "unit" / "samples.jsonl"))
    keys = [(s["backend"], s["problem_id"], s["sample_idx"]) for s in samples]
    assert len(keys) == len(set(keys)) == 10 * 8


def test_single_branch_run_is_all_correct(tmp_path):
    dataset = {"kind": "graph", "spec": {"branches": 1, "path_len": 4, "train_size": 0, "test_size": 6}}
    backend = {"kind": "simulated", "policy": {"kind": "fixed", "probs": [1.0]}}
    manifest = write_manifest(tmp_path, dataset=dataset, backends=[backend])
    run_pipeline(manifest, tmp_path / "runs")
    report = read_json(str(tmp_path / "runs" / "unit" / "report.json"))
    assert set(report["estimates"].values()) == {1.0}


def test_report_from_graded_fixture(tmp_path):
    manifest = write_manifest(tmp_path, ks=[1, 2])
    assert run("gen", manifest, tmp_path / "runs") == expcli.EXIT_OK
    run_dir = tmp_path / "runs" / "unit"
    problem_ids = [r["id"] for r in read_jsonl(str(run_dir / "data" / "instances.jsonl"))]
    graded = [
        {"backend": "sim", "problem_id": pid, "sample_idx": i, "correct": c, "mode": "nl", "n_tokens": 10}
        for pid in problem_ids
        for i, c in enumerate([True, False, True, False])
    ]
    write_jsonl(graded, str(run_dir / "graded.jsonl"))
    assert run("report", manifest, tmp_path / "runs") == expcli.EXIT_OK
    report = read_json(str(run_dir / "report.json"))
    assert report["estimates"]["1"] == pytest.approx(0.5)
    assert report["estimates"]["2"] == pytest.approx(5 / 6)
    rows = read_csv(str(run_dir / "pass_at_k.csv"))
    assert [row["k"] for row in rows] == ["1", "2"]


def test_report_rejects_a_problem_without_samples(tmp_path):
    manifest = write_manifest(tmp_path)
    out = tmp_path / "runs"
    run_pipeline(manifest, out)
    graded_path = str(out / "unit" / "graded.jsonl")
    graded = read_jsonl(graded_path)
    dropped = graded[0]["problem_id"]
    write_jsonl([r for r in graded if r["problem_id"] != dropped], graded_path)
    assert run("report", manifest, out) == expcli.EXIT_VALIDATION
    assert json.loads((out / "unit" / "run.json").read_text())["stages"]["report"] == "failed"
    assert "have no graded samples" in (out / "unit" / "logs" / "forklab.log").read_text()


def test_report_rejects_too_few_samples_for_k(tmp_path):
    manifest = write_manifest(tmp_path)
    out = tmp_path / "runs"
    run_pipeline(manifest, out)
    graded_path = str(out / "unit" / "graded.jsonl")
    graded = read_jsonl(graded_path)
    short = graded[0]["problem_id"]
    write_jsonl([r for r in graded if r["problem_id"] != short or r["sample_idx"] < 4], graded_path)
    assert run("report", manifest, out) == expcli.EXIT_VALIDATION


def test_two_checkpoints_write_a_trajectory(tmp_path):
    backends = [
        {"kind": "simulated", "epoch": 1, "policy": {"kind": "fixed", "probs": [0.5, 0.5]}},
        {"kind": "simulated", "epoch": 2, "policy": {"kind": "fixed", "probs": [0.9, 0.1]}},
    ]
    manifest = write_manifest(tmp_path, backends=backends)
    run_pipeline(manifest, tmp_path / "runs")
    rows = read_csv(str(tmp_path / "runs" / "unit" / "trajectory.csv"))
    assert {row["epoch"] for row in rows} == {"1", "2"}
    assert len(rows) == 8


def test_unreachable_endpoint_exits_with_backend_code(tmp_path):
    backend = {"kind": "http", "endpoint_url": "http://127.0.0.1:9/v1", "retry_max": 0, "timeout_ms": 2000}
    manifest = write_manifest(tmp_path, backends=[backend], decode={"n": 2})
    out = tmp_path / "runs"
    assert run("gen", manifest, out) == expcli.EXIT_OK
    assert run("sample", manifest, out) == expcli.EXIT_BACKEND
    assert read_jsonl(str(out / "unit" / "samples.jsonl")) == []
    assert len(read_jsonl(str(out / "unit" / "sample_errors.jsonl"))) == 10 * 2


@pytest.mark.parametrize(
    "overrides",
    [
        {"schema": 2},
        {"ks": [4, 2]},
        {"colour": "blue"},
        {"strategies": ["topk(1)"]},
        {"dataset": {"kind": "graph", "spec": {"branches": 0}}},
        {"backends": [SIM_BACKEND, SIM_BACKEND]},
    ],
)
def test_invalid_manifest_exits_with_validation_code(tmp_path, overrides):
    manifest = write_manifest(tmp_path, **overrides)
    assert run("gen", manifest, tmp_path / "runs") == expcli.EXIT_VALIDATION


def test_missing_manifest(tmp_path):
    assert run("gen", str(tmp_path / "nope.yaml"), tmp_path / "runs") == expcli.EXIT_VALIDATION


def test_probe_stage(tmp_path):
    backend = {"kind": "simulated", "policy": {"kind": "fixed", "probs": [0.8, 0.2]}}
    manifest = write_manifest(tmp_path, backends=[backend], probe={"n_perms": 2})
    out = tmp_path / "runs"
    assert run("gen", manifest, out) == expcli.EXIT_OK
    assert run("probe", manifest, out) == expcli.EXIT_OK
    rows = read_jsonl(str(out / "unit" / "probe_results.jsonl"))
    assert len(rows) == 20
    assert all(row["renormalized_confidence"] == pytest.approx(0.8, abs=1e-6) for row in rows)
    summary = read_json(str(out / "unit" / "probe_summary.json"))
    assert summary["checkpoints"][0]["n"] == 20


def test_steer_stage(tmp_path):
    manifest = write_manifest(
        tmp_path,
        strategies=["default", "topk(2)"],
        insertion="decision",
        prefix_sweep={"prefixes": ["", "Okay"]},
    )
    out = tmp_path / "runs"
    assert run("gen", manifest, out) == expcli.EXIT_OK
    assert run("steer", manifest, out) == expcli.EXIT_OK
    run_dir = out / "unit"
    for name in ("steer_default.json", "steer_topk_2.json"):
        body = json.loads((run_dir / name).read_text())
        assert body["n"] == 8 and set(body["estimates"]) == {"1", "2", "4", "8"}
    assert [row["prefix"] for row in read_csv(str(run_dir / "prefix_report.csv"))] == ["", "Okay"]


def test_sample_with_mode_preferences_from_mix(tmp_path):
    backend = {**SIM_BACKEND, "mode_preferences": "from_mix"}
    dataset = {"kind": "graph", "spec": {"branches": 2, "path_len": 3, "train_size": 10, "test_size": 4}}
    manifest = write_manifest(tmp_path, dataset=dataset, backends=[backend], mix={"mode_ratio": 1.0})
    out = tmp_path / "runs"
    assert run("gen", manifest, out) == expcli.EXIT_OK
    assert run("sample", manifest, out) == expcli.EXIT_OK
    mix = read_jsonl(str(out / "unit" / "data" / "mix.jsonl"))
    assert {row["mode"] for row in mix} == {"code"}


def test_simulate_stage(tmp_path):
    simulate = {"d": 16, "train_size": 8, "test_size": 16, "epochs": 4, "ks": [1, 2, 32]}
    manifest = write_manifest(tmp_path, simulate=simulate)
    out = tmp_path / "runs"
    assert run("simulate", manifest, out) == expcli.EXIT_OK
    run_dir = out / "unit"
    lines = (run_dir / "dynamics.csv").read_text().splitlines()
    assert lines[0].startswith("# manifest_hash=")
    assert lines[1] == "epoch,k,pass_at_k,train_loss,mean_max_confidence,chosen_correct_rate"
    assert len(lines) == 2 + 5 * 3
    reverse = read_csv(str(run_dir / "dynamics_reverse.csv"))
    assert all(float(row["pass_at_k"]) >= 0.99 for row in reverse)
    intervention = read_json(str(run_dir / "intervention.json"))
    assert set(intervention["pass_at_k"]) == {"default", "topk(1)", "topk(2)"}
    assert (run_dir / "policy.txt").exists()
    assert read_json(str(run_dir / "confidence_histogram.json"))["balanced_test"] is True


def test_parse_manifest_defaults(tmp_path):
    manifest = expcli.parse_manifest({"schema": 1, "name": "bare"}, base_dir=str(tmp_path))
    assert manifest.dataset["spec"].train_size == 6400
    assert manifest.decode.n == 64
    assert [s.label for s in manifest.strategies] == ["default"]
    assert manifest.hash == expcli.parse_manifest({"name": "bare", "schema": 1}).hash


@pytest.mark.parametrize(
    "name",
    ["default_gen", "sample_sim", "steer_sim", "probe_sim", "simulate", "http_graph", "base_addition"],
)
def test_shipped_manifests_parse(name):
    manifest = expcli.load_manifest(os.path.join(MANIFESTS_DIR, f"{name}.yaml"))
    assert manifest.name.replace("-", "_") == name


def test_stage_logs_stay_in_the_run_directory(tmp_path):
    manifest = write_manifest(tmp_path)
    out = tmp_path / "runs"
    assert run("gen", manifest, out) == expcli.EXIT_OK
    assert (out / "unit" / "logs" / "forklab.log").exists()
    run_files = [
        h for h in logging.getLogger().handlers
        if isinstance(h, logging.FileHandler) and h.baseFilename.startswith(str(out))
    ]
    assert run_files == []
