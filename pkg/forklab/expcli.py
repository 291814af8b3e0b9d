"""Experiment runner: ``python -m forklab <stage> --manifest run.yaml``.

Each stage reads the manifest, works inside ``<out>/<name>/`` and records
its status in ``run.json``. Stages chain through files:

    gen -> data/train.jsonl, data/instances.jsonl, data/mix.jsonl
    sample -> samples.jsonl (+ sample_errors.jsonl)
    grade -> graded.jsonl
    report -> report.json, pass_at_k.csv, trajectory.csv
    probe -> probe_results.jsonl, probe_summary.json
    steer -> steer_<strategy>.json, strategy_trajectory.csv, prefix_report.csv
    simulate -> dynamics.csv, dynamics_reverse.csv, confidence_histogram.json, intervention.json, policy.txt
"""

import argparse
import os
import re
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import yaml

from forklab import __version__, metrics, modelio, simlab, steering, taskgen
from forklab.config import (
    FORKLAB_LOGS_PATH,
    FORKLAB_RUNS_DIR,
    redirect_file_logging,
    restore_file_logging,
    setup_logging,
)
from forklab.errors import BackendError, ForklabError, InsufficientSamples, ValidationError
from forklab.records import make_meta, read_json, read_jsonl, save_json, stable_hash, write_csv, write_jsonl

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

SCHEMA_VERSION = 1
STAGES = ("gen", "sample", "grade", "report", "probe", "steer", "simulate")
MANIFEST_KEYS = {
    "schema", "name", "description", "seed", "dataset", "mix", "backends", "decode", "strategies",
    "ks", "insertion", "think_tag", "probe", "prefix_sweep", "simulate", "output_dir",
}
DATASET_KINDS = ("graph", "qa", "base_addition")
MODE_PREFERENCES_FROM_MIX = "from_mix"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2
EXIT_INTERNAL = 3


@dataclass
class ExperimentManifest:
    name: str
    seed: int
    dataset: dict
    backends: list
    decode: modelio.DecodeConfig
    strategies: list
    ks: list
    output_dir: str
    base_dir: str
    raw: dict
    mix: Optional[taskgen.MixSpec] = None
    insertion: str = "response"
    think_tag: str = steering.DEFAULT_THINK_TAG
    probe: dict = field(default_factory=dict)
    prefix_sweep: Optional[dict] = None
    simulate: dict = field(default_factory=dict)

    @property
    def hash(self):
        return stable_hash(self.raw)

    @property
    def meta(self):
        return make_meta(self.hash, self.seed)


@dataclass
class RunRecord:
    manifest_hash: str
    seed: int
    version: str
    started_at: str
    finished_at: Optional[str] = None
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "manifest_hash": self.manifest_hash,
            "seed": self.seed,
            "version": self.version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "stages": dict(self.stages),
            "artifacts": {k: list(v) for k, v in self.artifacts.items()},
        }


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _slug(label):
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_") or "run"


def _resolve(base_dir, path):
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def _require_file(path, what):
    if not os.path.exists(path):
        logger.error(f"{what} {path} does not exist")
        raise ValidationError(f"{what} {path} does not exist")


def _parse_dataset(section, seed, base_dir):
    section = dict(section or {"kind": "graph"})
    kind = section.get("kind", "graph")
    if kind not in DATASET_KINDS:
        raise ValidationError(f"Unknown dataset kind {kind!r}")
    section["kind"] = kind
    if "path" in section:
        section["path"] = _resolve(base_dir, section["path"])
        _require_file(section["path"], "Dataset file")
    elif kind == "qa":
        raise ValidationError("A qa dataset needs a path")
    if kind == "graph" and "path" not in section:
        spec = dict(section.get("spec", {}))
        spec.setdefault("seed", seed)
        section["spec"] = taskgen.DatasetSpec.from_mapping(spec)
    if kind == "base_addition":
        for key in ("base", "digit_len", "count"):
            if key not in section:
                raise ValidationError(f"base_addition dataset needs '{key}'")
    return section


def _parse_backend(data, seed, base_dir):
    data = dict(data)
    data.setdefault("seed", seed)
    descriptor = modelio.BackendDescriptor.from_mapping(data)
    if descriptor.kind == "replay" and not descriptor.record:
        descriptor.fixture = _resolve(base_dir, descriptor.fixture)
        _require_file(descriptor.fixture, "Replay fixture")
    policy = descriptor.policy or {}
    if policy.get("kind") == "snapshot":
        descriptor.policy = {**policy, "path": _resolve(base_dir, policy["path"])}
        _require_file(descriptor.policy["path"], "Policy snapshot")
    if descriptor.mode_preferences and descriptor.mode_preferences != MODE_PREFERENCES_FROM_MIX:
        descriptor.mode_preferences = _resolve(base_dir, descriptor.mode_preferences)
        _require_file(descriptor.mode_preferences, "Mode preference mix")
    return descriptor


def parse_manifest(raw, base_dir="."):
    if not isinstance(raw, dict):
        raise ValidationError("A manifest must be a mapping")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ValidationError(f"Unsupported manifest schema {raw.get('schema')!r}; expected {SCHEMA_VERSION}")
    unknown = set(raw) - MANIFEST_KEYS
    if unknown:
        raise ValidationError(f"Unknown manifest keys: {sorted(unknown)}")
    if not raw.get("name"):
        raise ValidationError("A manifest needs a name")

    seed = int(raw.get("seed", 0))
    ks = [int(k) for k in raw.get("ks", [1, 2, 4, 8, 16, 32, 64])]
    if not ks or ks != sorted(set(ks)) or ks[0] < 1:
        raise ValidationError(f"ks must be ascending positive integers, got {ks}")

    decode = dict(raw.get("decode", {}))
    decode.setdefault("seed", seed)
    profile = decode.pop("profile", "graph")

    insertion = raw.get("insertion", "response")
    if insertion not in steering.INSERTION_POINTS:
        raise ValidationError(f"Unknown insertion point {insertion!r}")

    mix = None
    if raw.get("mix") is not None:
        mix_data = dict(raw["mix"])
        mix_data.setdefault("seed", seed)
        mix = taskgen.MixSpec(**mix_data).validate()

    backends = [_parse_backend(b, seed, base_dir) for b in raw.get("backends", [])]
    labels = [b.display_label for b in backends]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"Backend labels must be unique, got {labels}")

    return ExperimentManifest(
        name=str(raw["name"]),
        seed=seed,
        dataset=_parse_dataset(raw.get("dataset"), seed, base_dir),
        backends=backends,
        decode=modelio.decode_profile(profile, **decode),
        strategies=[steering.PrefixSpec.parse(s) for s in raw.get("strategies", ["default"])],
        ks=ks,
        output_dir=raw.get("output_dir") or FORKLAB_RUNS_DIR,
        base_dir=base_dir,
        raw=raw,
        mix=mix,
        insertion=insertion,
        think_tag=raw.get("think_tag", steering.DEFAULT_THINK_TAG),
        probe=dict(raw.get("probe") or {}),
        prefix_sweep=raw.get("prefix_sweep"),
        simulate=dict(raw.get("simulate") or {}),
    )


def load_manifest(path, seed=None):
    _require_file(path, "Manifest")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValidationError(f"Manifest {path} is not valid YAML: {e}") from e
    if seed is not None and isinstance(raw, dict):
        raw = {**raw, "seed": seed}
    return parse_manifest(raw, base_dir=os.path.dirname(os.path.abspath(path)))


class Run:
    """One manifest's run directory and its run.json record."""

    def __init__(self, manifest, out=None):
        self.manifest = manifest
        self.dir = os.path.join(out or manifest.output_dir, manifest.name)
        self.record_path = os.path.join(self.dir, "run.json")
        os.makedirs(self.dir, exist_ok=True)
        self.record = self._load_record()

    def _load_record(self):
        if os.path.exists(self.record_path):
            data = read_json(self.record_path)
            if data.get("manifest_hash") == self.manifest.hash:
                return RunRecord(**data)
            logger.warning(f"Manifest changed since the last run in {self.dir}; starting a new run record")
        return RunRecord(self.manifest.hash, self.manifest.seed, __version__, _now())

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def stage(self, name, status, artifacts=()):
        self.record.stages[name] = status
        if artifacts:
            self.record.artifacts[name] = [os.path.relpath(a, self.dir) for a in artifacts]
        self.record.finished_at = _now()
        save_json(self.record.to_dict(), self.record_path)


def _train_instances(run):
    path = run.path("data", "train.jsonl")
    if not os.path.exists(path):
        return None
    return [taskgen.instance_from_record(r) for r in read_jsonl(path)]


def _test_instances(run):
    dataset = run.manifest.dataset
    if dataset["kind"] != "graph":
        raise ValidationError(f"This stage needs a graph dataset, manifest has {dataset['kind']!r}")
    generated = run.path("data", "instances.jsonl")
    if os.path.exists(generated):
        return taskgen.load_instances(generated)
    if "path" in dataset:
        return taskgen.load_instances(dataset["path"])
    _, test = taskgen.build_dataset(replace(dataset["spec"], train_size=0))
    return test


def _eval_items(run):
    dataset = run.manifest.dataset
    if dataset["kind"] == "graph":
        return taskgen.eval_items_from_instances(_test_instances(run))
    if dataset["kind"] == "qa":
        return taskgen.eval_items_from_qa(taskgen.load_qa_file(dataset["path"]))
    items = taskgen.gen_base_addition_items(
        int(dataset["base"]), int(dataset["digit_len"]), int(dataset["count"]), run.manifest.seed
    )
    return taskgen.eval_items_from_qa(items)


def _backends(run):
    if not run.manifest.backends:
        raise ValidationError("The manifest lists no backends")
    train = None
    built = []
    for descriptor in run.manifest.backends:
        if descriptor.mode_preferences == MODE_PREFERENCES_FROM_MIX:
            descriptor = replace(descriptor, mode_preferences=run.path("data", "mix.jsonl"))
            _require_file(descriptor.mode_preferences, "Mode preference mix")
        if descriptor.kind == "replay" and descriptor.record:
            descriptor = replace(descriptor, fixture=run.path(descriptor.fixture))
        if (descriptor.policy or {}).get("kind") == "trained" and train is None:
            train = _train_instances(run)
        built.append((descriptor, modelio.make_backend(descriptor, train_instances=train)))
    return built


def _epoch_of(descriptor, index):
    return descriptor.epoch if descriptor.epoch is not None else index


def cmd_gen(run):
    dataset = run.manifest.dataset
    meta = run.manifest.meta
    logger.info(f"Starting gen for {run.manifest.name} .....")
    if dataset["kind"] != "graph":
        items = _eval_items(run)
        path = run.path("data", "items.jsonl")
        write_jsonl(({"id": i.id, "prompt": i.prompt, "gold": i.gold} for i in items), path, meta=meta)
        print(f"{len(items)} {dataset['kind']} items")
        run.stage("gen", "completed", [path])
        return EXIT_OK
    if "path" in dataset:
        raise ValidationError("The dataset is given as a file; there is nothing to generate")

    spec = dataset["spec"]
    train, test = taskgen.build_dataset(spec)
    paths = list(taskgen.write_dataset(run.path("data"), train, test, meta=meta).values())
    if run.manifest.mix is not None and train:
        solutions = {
            row.instance.id: {"nl": row.solution, "code": taskgen.render_code_solution(row.instance)}
            for row in train
        }
        rows = taskgen.build_mode_mix(solutions, run.manifest.mix)
        prompts = {row.instance.id: row.instance.prompt for row in train}
        paths.append(run.path("data", "mix.jsonl"))
        taskgen.write_mix(paths[-1], rows, prompts, meta=meta)

    rules = 1 + spec.branches * spec.path_len
    print(
        f"{len(train)} train / {len(test)} test instances, branches={spec.branches}, "
        f"path_len={spec.path_len}, {rules} rules per prompt"
    )
    run.stage("gen", "completed", paths)
    logger.info("Gen was completed.")
    return EXIT_OK


def cmd_sample(run, resume=False):
    manifest = run.manifest
    cfg = manifest.decode
    items = _eval_items(run)
    samples_path = run.path("samples.jsonl")
    errors_path = run.path("sample_errors.jsonl")

    done = {}
    if resume and os.path.exists(samples_path):
        for record in read_jsonl(samples_path):
            done.setdefault((record["backend"], record["problem_id"]), set()).add(record["sample_idx"])
    else:
        write_jsonl([], samples_path, meta=manifest.meta)
        write_jsonl([], errors_path, meta=manifest.meta)

    failures = 0
    written = 0
    for index, (descriptor, backend) in enumerate(_backends(run)):
        label = descriptor.display_label
        todo = [item for item in items if len(done.get((label, item.id), ())) < cfg.n]
        logger.info(f"Backend {label}: {len(items) - len(todo)} problems already sampled, {len(todo)} to go")
        if not todo:
            continue
        samples, errors = [], []
        for item, completions in zip(todo, modelio.complete_many(backend, [i.prompt for i in todo], cfg, desc=label)):
            have = done.get((label, item.id), set())
            for sample_idx, completion in enumerate(completions):
                if sample_idx in have:
                    continue
                record = {
                    "backend": label,
                    "epoch": _epoch_of(descriptor, index),
                    "problem_id": item.id,
                    "sample_idx": sample_idx,
                    **completion.to_record(),
                }
                (errors if completion.error is not None else samples).append(record)
        written += write_jsonl(samples, samples_path, append=True)
        write_jsonl(errors, errors_path, append=True)
        if errors:
            failures += len(errors)
            logger.error(f"Backend {label}: {len(errors)} samples failed; see {errors_path}")

    print(f"{written} samples written, {failures} failed")
    run.stage("sample", "partial" if failures else "completed", [samples_path, errors_path])
    return EXIT_BACKEND if failures else EXIT_OK


def cmd_grade(run):
    samples_path = run.path("samples.jsonl")
    _require_file(samples_path, "Samples file")
    golds = {item.id: item.gold for item in _eval_items(run)}
    samples = read_jsonl(samples_path)
    logger.info(f"Starting grading of {len(samples)} samples .....")

    graded = []
    for descriptor in run.manifest.backends:
        label = descriptor.display_label
        by_problem = metrics.grade_samples([s for s in samples if s["backend"] == label], golds)
        graded.extend(record for records in by_problem.values() for record in records)
    path = run.path("graded.jsonl")
    write_jsonl(graded, path, meta=run.manifest.meta)
    run.stage("grade", "completed", [path])
    logger.info("Grading was completed.")
    return EXIT_OK


# Every eval problem must carry graded samples; problems outside the eval set are left out
def _checkpoint_report(label, epoch, records, ks, problem_ids):
    expected = set(problem_ids)
    outcomes, modes, lengths = {}, {}, []
    for record in sorted(records, key=lambda r: (r["problem_id"], r["sample_idx"])):
        if record["problem_id"] not in expected:
            continue
        outcomes.setdefault(record["problem_id"], []).append(bool(record["correct"]))
        modes.setdefault(record["problem_id"], []).append(record["mode"])
        lengths.append(int(record.get("n_tokens", 0)))
    missing = sorted(expected - set(outcomes))
    if missing:
        logger.error(f"Backend {label}: {len(missing)} of {len(expected)} problems have no graded samples")
        raise InsufficientSamples(f"Backend {label} has no graded samples for {len(missing)} problems, first {missing[0]}")
    outside = {r["problem_id"] for r in records} - expected
    if outside:
        logger.warning(f"Backend {label}: left out graded samples of {len(outside)} problems outside the eval set")
    report = metrics.aggregate(outcomes, ks)
    histogram = metrics.mode_histogram(modes)
    stats = metrics.length_stats(lengths)
    entry = {"label": label, "epoch": epoch, **report.to_dict()}
    entry["lengths"] = {"mean": stats.mean, "median": stats.median, "p95": stats.p95, "n": stats.n}
    entry["modes"] = {"bin_edges": histogram.bin_edges, "bin_counts": histogram.bin_counts, "version": histogram.version}
    return report, entry


def cmd_report(run):
    graded_path = run.path("graded.jsonl")
    _require_file(graded_path, "Graded samples file")
    graded = read_jsonl(graded_path)
    manifest = run.manifest
    problem_ids = [item.id for item in _eval_items(run)]

    entries, labelled = [], []
    for index, descriptor in enumerate(manifest.backends):
        label = descriptor.display_label
        records = [r for r in graded if r["backend"] == label]
        if not records:
            raise ValidationError(f"No graded samples for backend {label}")
        report, entry = _checkpoint_report(label, _epoch_of(descriptor, index), records, manifest.ks, problem_ids)
        entries.append(entry)
        labelled.append((entry["epoch"], report))

    first = entries[0]
    body = {
        "meta": manifest.meta,
        "n": first["n"],
        "ks": first["ks"],
        "estimates": first["estimates"],
        "per_problem_c": first["per_problem_c"],
        "checkpoints": entries,
    }
    paths = [run.path("report.json"), run.path("pass_at_k.csv")]
    save_json(body, paths[0])
    rows = [{"backend": e["label"], **row} for e, (_, r) in zip(entries, labelled) for row in metrics.curve_rows(r)]
    write_csv(rows, ["backend", "k", "estimate"], paths[1], meta=manifest.meta)
    if len(labelled) > 1:
        paths.append(run.path("trajectory.csv"))
        write_csv(metrics.trajectory_rows(labelled), ["epoch", "k", "estimate"], paths[-1], meta=manifest.meta)

    for k in first["ks"]:
        print(f"pass@{k} = {first['estimates'][str(k)]:.6f}")
    run.stage("report", "completed", paths)
    return EXIT_OK


def cmd_probe(run):
    manifest = run.manifest
    instances = _test_instances(run)
    limit = manifest.probe.get("limit")
    if limit is not None:
        instances = instances[: int(limit)]
    n_perms = int(manifest.probe.get("n_perms", 1))
    bin_width = float(manifest.probe.get("bin_width", 0.05))

    rows, summaries = [], []
    for index, (descriptor, backend) in enumerate(_backends(run)):
        label = descriptor.display_label
        probed = steering.probe_dataset(instances, backend, n_perms=n_perms, seed=manifest.seed)
        epoch = _epoch_of(descriptor, index)
        rows.extend({"backend": label, "epoch": epoch, **row} for row in probed)
        summaries.append({"label": label, "epoch": epoch, **steering.confidence_summary(probed, bin_width)})

    paths = [run.path("probe_results.jsonl"), run.path("probe_summary.json")]
    steering.write_probe_results(paths[0], rows, meta=manifest.meta)
    save_json({"meta": manifest.meta, "checkpoints": summaries}, paths[1])
    for summary in summaries:
        print(
            f"{summary['label']}: mean confidence {summary['mean_confidence']:.4f}, "
            f"chosen correct {summary['chosen_correct_rate']:.4f}"
        )
    run.stage("probe", "completed", paths)
    return EXIT_OK


def cmd_steer(run):
    manifest = run.manifest
    items = _eval_items(run)
    backends = _backends(run)
    paths = []

    per_strategy = {spec.label: [] for spec in manifest.strategies}
    trajectory = []
    for index, (descriptor, backend) in enumerate(backends):
        epoch = _epoch_of(descriptor, index)
        reports = steering.strategy_compare(
            items, manifest.strategies, manifest.ks, backend, manifest.decode, manifest.insertion, manifest.think_tag
        )
        for label, report in reports.items():
            per_strategy[label].append({"label": descriptor.display_label, "epoch": epoch, **report.to_dict()})
            trajectory.extend(
                {"strategy": label, "epoch": epoch, "k": k, "estimate": report.estimates[k]} for k in report.ks
            )

    for label, checkpoints in per_strategy.items():
        first = checkpoints[0]
        path = run.path(f"steer_{_slug(label)}.json")
        save_json({"meta": manifest.meta, "strategy": label, "n": first["n"], "ks": first["ks"],
                   "estimates": first["estimates"], "checkpoints": checkpoints}, path)
        paths.append(path)
    if len(backends) > 1:
        paths.append(run.path("strategy_trajectory.csv"))
        write_csv(trajectory, ["strategy", "epoch", "k", "estimate"], paths[-1], meta=manifest.meta)

    if manifest.prefix_sweep is not None:
        prefixes = list(manifest.prefix_sweep.get("prefixes", steering.DEFAULT_PREFIXES))
        for index, (descriptor, backend) in enumerate(backends):
            report = steering.prefix_sweep(
                items, prefixes, backend, manifest.decode, manifest.insertion, manifest.think_tag
            )
            name = "prefix_report.csv" if index == 0 else f"prefix_report_{_slug(descriptor.display_label)}.csv"
            paths.append(run.path(name))
            steering.write_prefix_report(paths[-1], report, meta=manifest.meta)
            if any(row.errors for row in report.rows):
                logger.warning(f"Prefix sweep on {descriptor.display_label} recorded backend errors")

    run.stage("steer", "completed", paths)
    return EXIT_OK


def cmd_simulate(run):
    manifest = run.manifest
    section = dict(manifest.simulate)
    reverse_overrides = dict(section.pop("reverse", {}) or {})
    section.setdefault("seed", manifest.seed)
    cfg = simlab.SimConfig.from_mapping(section)
    meta = manifest.meta
    paths = [run.path("dynamics.csv"), run.path("dynamics_reverse.csv")]

    train, test = simlab.make_sim_dataset(cfg, np.random.default_rng(cfg.seed))
    forward = simlab.run_dynamics(cfg, paths[0], meta=meta, datasets=(train, test))
    reverse_cfg = replace(cfg, **{"regime": "reverse", "exec_acc": 0.999, "exec_warmup": 0.0, **reverse_overrides})
    reverse_cfg.validate()
    simlab.run_dynamics(reverse_cfg, paths[1], meta=meta, datasets=(train, test))

    policy = simlab.train_checkpoints(cfg, [cfg.epochs], train=train)[cfg.epochs]
    histogram = simlab.confidence_histogram(policy, test, cfg.bin_width)
    final = forward[-1]
    if cfg.balanced_test:
        logger.info(f"Balanced test set: chosen_correct_rate is 1/{cfg.B} by construction; set balanced_test: false to sample labels")
    paths.append(run.path("confidence_histogram.json"))
    save_json({
        "meta": meta,
        "epoch": final.epoch,
        "mean_max_confidence": final.mean_max_confidence,
        "chosen_correct_rate": final.chosen_correct_rate,
        "balanced_test": cfg.balanced_test,
        **histogram.to_dict(),
    }, paths[-1])

    exec_final = simlab.exec_at(cfg, cfg.epochs)
    intervention = {
        "default": final.pass_at_k,
        **{
            f"topk({k})": simlab.eval_policy(simlab.apply_topk_uniform(policy, k), test, cfg.ks, exec_final).pass_at_k
            for k in range(1, cfg.B + 1)
        },
    }
    paths.append(run.path("intervention.json"))
    save_json({"meta": meta, "epoch": cfg.epochs,
               "pass_at_k": {name: {str(k): v for k, v in est.items()} for name, est in intervention.items()}}, paths[-1])

    paths.append(run.path("policy.txt"))
    simlab.save_policy(policy, paths[-1])

    peak = max(r.pass_at_k.get(32, 0.0) for r in forward)
    print(f"forward pass@32: peak {peak:.4f}, final {final.pass_at_k.get(32, float('nan')):.4f}")
    run.stage("simulate", "completed", paths)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="forklab", description="Fork-in-the-road reasoning experiments.")
    subparsers = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        sub = subparsers.add_parser(stage)
        sub.add_argument("--manifest", required=True, help="Path to a YAML experiment manifest")
        sub.add_argument("--out", default=None, help="Output root; the run directory is <out>/<name>")
        sub.add_argument("--seed", type=int, default=None, help="Override the manifest seed")
        sub.add_argument("--resume", action="store_true", help="Keep existing samples and skip finished problems")
    return parser


def run_stage(stage, run, resume=False):
    if stage == "sample":
        return cmd_sample(run, resume=resume)
    return {
        "gen": cmd_gen,
        "grade": cmd_grade,
        "report": cmd_report,
        "probe": cmd_probe,
        "steer": cmd_steer,
        "simulate": cmd_simulate,
    }[stage](run)


def main(argv=None):
    args = build_parser().parse_args(argv)
    run = None
    redirect = None
    try:
        manifest = load_manifest(args.manifest, seed=args.seed)
        run = Run(manifest, out=args.out)
        redirect = redirect_file_logging(run.path("logs", "forklab.log"))
        logger.info(f"Starting stage {args.stage} in {run.dir} .....")
        code = run_stage(args.stage, run, resume=args.resume)
        logger.info(f"Stage {args.stage} was completed with exit code {code}.")
        return code
    except ValidationError as e:
        logger.error(f"Validation error: {e}")
        code = EXIT_VALIDATION
    except BackendError as e:
        logger.error(f"Backend error: {e}")
        code = EXIT_BACKEND
    except ForklabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        code = EXIT_INTERNAL
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        code = EXIT_INTERNAL
    finally:
        if redirect is not None:
            restore_file_logging(redirect)
    log_path = run.path("logs", "forklab.log") if run is not None else FORKLAB_LOGS_PATH
    print(f"forklab {args.stage}: failed (exit {code}); see {log_path}", file=sys.stderr)
    if run is not None:
        run.stage(args.stage, "failed")
    return code
