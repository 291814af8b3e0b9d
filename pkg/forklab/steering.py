import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from tqdm import tqdm

from forklab import metrics, modelio, oracle, simlab, taskgen
from forklab.config import FORKLAB_LOGS_PATH, setup_logging
from forklab.errors import BackendError, CapabilityMissing, ForklabError, ValidationError
from forklab.records import stable_hash, write_csv, write_jsonl

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

STRATEGIES = ("default", "fixed", "top1", "topk")
DEFAULT_PREFIXES = ("", "Okay", "Alright", "Let", "To")
INSERTION_POINTS = ("response", "think", "decision")
DEFAULT_THINK_TAG = "<think>\n"
PREFIX_REPORT_COLUMNS = ["prefix", "accuracy", "mean_length", "backtrack_share", "n"]

_STRATEGY_RE = re.compile(r"^(default|top1|topk\((\d+)\)|fixed\((.+)\))$", re.DOTALL)


@dataclass
class BranchConfidence:
    problem_id: str
    permutation_id: Optional[int]
    # (branch head, renormalized probability) in canonical branch order
    candidates: list
    chosen: str
    chosen_is_correct: bool
    renormalized_confidence: float
    residual_mass: float
    missing: list = field(default_factory=list)

    def to_record(self):
        return {
            "problem_id": self.problem_id,
            "permutation_id": self.permutation_id,
            "candidates": [[head, prob] for head, prob in self.candidates],
            "chosen": self.chosen,
            "chosen_is_correct": self.chosen_is_correct,
            "renormalized_confidence": self.renormalized_confidence,
            "residual_mass": self.residual_mass,
            "missing": list(self.missing),
        }


@dataclass(frozen=True)
class PrefixSpec:
    strategy: str = "default"
    prefix: Optional[str] = None
    k: Optional[int] = None

    # topk(1) is only accepted as the degenerate form of top1 when asked for
    def validate(self, allow_degenerate=False):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"Unknown strategy {self.strategy!r}")
        if self.strategy == "fixed" and not self.prefix:
            raise ValidationError("A fixed prefix must be non-empty")
        if self.strategy == "topk" and (self.k is None or self.k < (1 if allow_degenerate else 2)):
            raise ValidationError(f"topk needs k >= 2, got {self.k}")
        return self

    @property
    def label(self):
        if self.strategy == "fixed":
            return f"fixed({self.prefix})"
        if self.strategy == "topk":
            return f"topk({self.k})"
        return self.strategy

    @classmethod
    def parse(cls, text):
        match = _STRATEGY_RE.match(text.strip())
        if not match:
            raise ValidationError(f"Cannot parse strategy {text!r}; use default, top1, topk(K) or fixed(PREFIX)")
        if match.group(2):
            return cls("topk", k=int(match.group(2))).validate()
        if match.group(3):
            return cls("fixed", prefix=match.group(3)).validate()
        return cls(match.group(1)).validate()


@dataclass
class PrefixRow:
    prefix: str
    accuracy: float
    mean_length: float
    n: int
    errors: int = 0
    backtrack_share: float = 0.0


@dataclass
class PrefixReport:
    rows: list

    def to_rows(self):
        return [
            {
                "prefix": r.prefix,
                "accuracy": r.accuracy,
                "mean_length": r.mean_length,
                "backtrack_share": r.backtrack_share,
                "n": r.n,
            }
            for r in self.rows
        ]


def probe_prompt(instance):
    return taskgen.render_prompt(instance) + taskgen.DECISION_MARKER


def scaffold_for(insertion, think_tag=DEFAULT_THINK_TAG):
    if insertion == "response":
        return ""
    if insertion == "think":
        return think_tag
    if insertion == "decision":
        return taskgen.DECISION_MARKER
    raise ValidationError(f"Unknown insertion point {insertion!r}")


def _head_probabilities(prompt, heads, backend):
    caps = backend.capabilities
    if all(len(h) == 1 for h in heads) and caps.get(modelio.FIRST_TOKEN_DISTRIBUTION):
        m = min(getattr(backend, "logprob_limit", 20), max(2 * len(heads), 5))
        top = {c.token_text: c.prob for c in modelio.top_first_tokens(backend, prompt, m)}
        return {h: top[h] for h in heads if h in top}
    if caps.get(modelio.CONTINUATION_SCORING):
        return {h: float(np.exp(modelio.score_continuation(backend, prompt, h))) for h in heads}
    logger.error("Probing needs single-token branch heads or continuation scoring")
    raise CapabilityMissing("Branch heads are not single tokens and the backend cannot score continuations")


def probe_decision_point(instance, backend):
    heads = instance.branch_heads
    if len(heads) < 2:
        raise ValidationError(f"Instance {instance.id} has a single branch; there is no decision point")

    raw = _head_probabilities(probe_prompt(instance), heads, backend)
    missing = [h for h in heads if h not in raw]
    if missing:
        logger.warning(f"Residual-mass overflow on {instance.id}: heads {missing} are outside the top-token list")
    covered = sum(raw.values())
    if covered <= 0:
        logger.error(f"No branch head of {instance.id} appears in the next-token distribution")
        raise BackendError(f"No branch head of {instance.id} appears in the next-token distribution")

    candidates = [(h, raw.get(h, 0.0) / covered) for h in heads]
    chosen, confidence = max(candidates, key=lambda c: c[1])
    return BranchConfidence(
        problem_id=instance.id,
        permutation_id=instance.permutation_id,
        candidates=candidates,
        chosen=chosen,
        chosen_is_correct=heads.index(chosen) == instance.correct_branch,
        renormalized_confidence=confidence,
        residual_mass=min(max(0.0, 1.0 - covered), 1.0 - 1e-12),
        missing=missing,
    )


def shuffle_sensitivity(instance, n_perms, backend, rng):
    """Probe the identity ordering plus n_perms - 1 random orderings of the same rules."""
    if n_perms < 1:
        raise ValidationError(f"n_perms must be positive, got {n_perms}")
    n = len(instance.rules)
    orders = [list(range(n))] + [taskgen.random_permutation(n, rng) for _ in range(n_perms - 1)]

    results = []
    for order in orders:
        permuted = taskgen.permute_rules(instance, order)
        if oracle.branch_of(permuted.rules, permuted.target) != instance.correct_branch:
            logger.error(f"Permutation of {instance.id} moved the correct branch")
            raise ValidationError(f"Permutation of {instance.id} changed its correct branch")
        results.append((permuted.permutation_id, probe_decision_point(permuted, backend)))
    return results


def _map_items(backend, fn, items, desc):
    workers = max(1, getattr(backend, "max_in_flight", 1))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(tqdm(executor.map(fn, items), total=len(items), desc=desc))


def probe_dataset(instances, backend, n_perms=1, seed=0):
    instances = list(instances)
    logger.info(f"Starting decision-point probes on {len(instances)} instances .....")

    def probe_one(instance):
        rng = random.Random(int(stable_hash([seed, instance.id]), 16))
        return [conf.to_record() for _, conf in shuffle_sensitivity(instance, n_perms, backend, rng)]

    rows = [row for rows in _map_items(backend, probe_one, instances, "Probing") for row in rows]
    logger.info("Decision-point probing was completed.")
    return rows


def write_probe_results(path, rows, meta=None):
    return write_jsonl(rows, path, meta=meta)


def confidence_summary(rows, bin_width=0.05):
    if not rows:
        raise ValidationError("No probe rows to summarize")
    confidence = [r["renormalized_confidence"] for r in rows]
    correct = [bool(r["chosen_is_correct"]) for r in rows]
    histogram = simlab.bin_confidences(confidence, correct, bin_width)
    return {
        "n": len(rows),
        "mean_confidence": float(np.mean(confidence)),
        "chosen_correct_rate": float(np.mean(correct)),
        "histogram": histogram.to_dict(),
    }


def _with_prefix(completions, prefix):
    out = []
    for c in completions:
        if c.error is not None:
            out.append(c)
        else:
            out.append(replace(c, text=prefix + c.text, n_tokens=c.n_tokens + modelio.count_tokens(prefix)))
    return out


def _first_token_candidates(base, k, backend):
    candidates = modelio.top_first_tokens(backend, base, k)
    if not candidates:
        raise BackendError("The backend returned no first-token candidates")
    if len(candidates) < k:
        logger.warning(f"Only {len(candidates)} first-token candidates available; shrinking k from {k}")
    return candidates


def decode_with_prefix(prompt, spec, cfg, backend, insertion="response", think_tag=DEFAULT_THINK_TAG):
    spec.validate(allow_degenerate=True)
    cfg.validate()
    scaffold = scaffold_for(insertion, think_tag)
    base = prompt + scaffold

    if spec.strategy == "default":
        return _with_prefix(backend.complete(base, cfg), scaffold)
    if spec.strategy == "fixed":
        return _with_prefix(backend.complete(base + spec.prefix, cfg), scaffold + spec.prefix)
    if spec.strategy == "top1":
        forced = _first_token_candidates(base, 1, backend)[0].token_text
        return _with_prefix(backend.complete(base + forced, cfg), scaffold + forced)

    candidates = _first_token_candidates(base, spec.k, backend)
    rng = random.Random(int(stable_hash([cfg.seed or 0, prompt, insertion]), 16))
    picks = [rng.randrange(len(candidates)) for _ in range(cfg.n)]
    groups = {}
    for index in sorted(set(picks)):
        forced = candidates[index].token_text
        batch = backend.complete(base + forced, replace(cfg, n=picks.count(index)))
        groups[index] = iter(_with_prefix(batch, scaffold + forced))
    return [next(groups[index]) for index in picks]


def _graded(completions, gold):
    return [c.error is None and oracle.grade_answer(c.text, gold).correct for c in completions]


def prefix_sweep(items, prefixes, backend, cfg, insertion="response", think_tag=DEFAULT_THINK_TAG):
    items = list(items)
    logger.info(f"Starting prefix sweep over {len(prefixes)} prefixes x {len(items)} items .....")
    rows = []
    for prefix in prefixes:
        spec = PrefixSpec("fixed", prefix=prefix) if prefix else PrefixSpec("default")

        def run_item(item):
            try:
                completions = decode_with_prefix(item.prompt, spec, cfg, backend, insertion, think_tag)
            except ForklabError as e:
                logger.warning(f"Prefix {prefix!r} failed on {item.id}: {e}")
                return None
            return completions, _graded(completions, item.gold)

        correct = total = errors = 0
        lengths, texts = [], []
        for result in _map_items(backend, run_item, items, f"Prefix {prefix or '<default>'}"):
            if result is None:
                errors += 1
                continue
            completions, graded = result
            usable = [(c, g) for c, g in zip(completions, graded) if c.error is None]
            errors += len(completions) - len(usable)
            correct += sum(g for _, g in usable)
            total += len(usable)
            lengths.extend(c.n_tokens for c, _ in usable)
            texts.extend(c.text for c, _ in usable)
        rows.append(PrefixRow(
            prefix=prefix,
            accuracy=correct / total if total else 0.0,
            mean_length=float(np.mean(lengths)) if lengths else 0.0,
            n=total,
            errors=errors,
            backtrack_share=metrics.backtrack_share(texts) if texts else 0.0,
        ))
    logger.info("Prefix sweep was completed.")
    return PrefixReport(rows)


def write_prefix_report(path, report, meta=None):
    write_csv(report.to_rows(), PREFIX_REPORT_COLUMNS, path, meta=meta)


def strategy_compare(items, strategies, ks, backend, cfg, insertion="response", think_tag=DEFAULT_THINK_TAG):
    """Same items, same n, one pass@k report per strategy label."""
    items = list(items)
    reports = {}
    for spec in strategies:
        logger.info(f"Starting strategy {spec.label} on {len(items)} items .....")
        results = _map_items(
            backend,
            lambda item: _graded(decode_with_prefix(item.prompt, spec, cfg, backend, insertion, think_tag), item.gold),
            items,
            spec.label,
        )
        reports[spec.label] = metrics.aggregate({item.id: r for item, r in zip(items, results)}, ks)
        logger.info(f"Strategy {spec.label} was completed.")
    return reports


# labelled_backends: (epoch, backend) pairs in checkpoint order
def strategy_trajectory(items, strategies, ks, labelled_backends, cfg, insertion="response"):
    rows = []
    for epoch, backend in labelled_backends:
        for label, report in strategy_compare(items, strategies, ks, backend, cfg, insertion).items():
            for k in report.ks:
                rows.append({"strategy": label, "epoch": epoch, "k": k, "estimate": report.estimates[k]})
    return rows
