"""Coverage estimation and completion statistics.

pass@k uses the unbiased estimator 1 - C(n-c, k) / C(n, k), evaluated in its
product form so n = 64 and beyond never touch factorials.
"""

import math
import numbers
import re
from dataclasses import dataclass, field

import numpy as np

from forklab import oracle
from forklab.config import FORKLAB_LOGS_PATH, setup_logging
from forklab.errors import InsufficientSamples, ValidationError

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

MODE_CLASSIFIER_VERSION = "1"

_FENCE_RE = re.compile(r"```[^\n`]*\n.*?```", re.DOTALL)
_PROGRAM_LINE_RES = (
    re.compile(r"^\s*[A-Za-z_][A-Za-z0-9_]*\s*(\[[^\]]*\])?\s*=(?!=)\s*\S"),
    re.compile(r"^\s*print\s*\("),
)

# Self-reflection markers that revisit an earlier step
_BACKTRACK_RE = re.compile(
    r"\b(wait|hmm+|alternatively|on second thought|double[- ]check|i made a mistake"
    r"|let me (re-?)?(check|verify|reconsider|recompute|re-?examine))\b",
    re.IGNORECASE,
)


@dataclass
class PassAtKReport:
    n: int
    ks: list
    per_problem_c: dict
    estimates: dict
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "n": self.n,
            "ks": list(self.ks),
            "estimates": {str(k): v for k, v in self.estimates.items()},
            "per_problem_c": dict(self.per_problem_c),
        }


@dataclass
class ModeHistogram:
    per_problem_code_fraction: dict
    bin_edges: list
    bin_counts: list
    version: str = MODE_CLASSIFIER_VERSION


@dataclass
class LengthStats:
    mean: float
    median: float
    p95: float
    n: int


def pass_at_k_single(n, c, k):
    if not all(isinstance(x, numbers.Integral) for x in (n, c, k)):
        raise ValidationError("n, c and k must be integers")
    n, c, k = int(n), int(c), int(k)
    if not 1 <= k <= n:
        raise ValidationError(f"pass@k needs 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= c <= n:
        raise ValidationError(f"pass@k needs 0 <= c <= n, got c={c}, n={n}")
    if n - c < k:
        return 1.0
    i = np.arange(k)
    return float(1.0 - np.prod((n - c - i) / (n - i)))


def analytic_pass_at_k(p, k):
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"p must be in [0, 1], got {p}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    return 1.0 - (1.0 - p) ** k


def binomial_se(p, n):
    return math.sqrt(p * (1.0 - p) / n)


# outcomes: problem id -> per-sample correctness in sample order
def aggregate(outcomes, ks):
    if not outcomes:
        logger.error("pass@k aggregation over an empty problem set")
        raise ValidationError("Cannot aggregate pass@k over an empty problem set")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValidationError(f"ks must be positive integers, got {ks}")

    warnings = []
    sizes = {pid: len(samples) for pid, samples in outcomes.items()}
    n = min(sizes.values())
    if len(set(sizes.values())) > 1:
        message = f"Problems have unequal sample counts ({min(sizes.values())}..{max(sizes.values())}); truncating to n={n}"
        logger.warning(message)
        warnings.append(message)
    if ks[-1] > n:
        logger.error(f"Requested k={ks[-1]} but only {n} samples per problem")
        raise InsufficientSamples(f"k={ks[-1]} needs at least {ks[-1]} samples per problem, have {n}")

    problem_ids = sorted(outcomes)
    per_problem_c = {pid: int(sum(bool(x) for x in list(outcomes[pid])[:n])) for pid in problem_ids}
    estimates = {}
    for k in ks:
        values = [pass_at_k_single(n, per_problem_c[pid], k) for pid in problem_ids]
        estimates[k] = float(math.fsum(values) / len(values))
    return PassAtKReport(n=n, ks=ks, per_problem_c=per_problem_c, estimates=estimates, warnings=warnings)


def curve_rows(report):
    return [{"k": k, "estimate": report.estimates[k]} for k in report.ks]


# labelled_reports: (epoch label, report) pairs in checkpoint order
def trajectory_rows(labelled_reports):
    rows = []
    for epoch, report in labelled_reports:
        for k in report.ks:
            rows.append({"epoch": epoch, "k": k, "estimate": report.estimates[k]})
    return rows


def classify_mode(text):
    if not text:
        return "nl"
    if _FENCE_RE.search(text):
        return "code"
    program_lines = sum(
        1 for line in text.splitlines() if any(p.match(line) for p in _PROGRAM_LINE_RES)
    )
    return "code" if program_lines >= 2 else "nl"


def classify_structure(text):
    return "backtracking" if _BACKTRACK_RE.search(text or "") else "linear"


def backtrack_share(texts):
    texts = list(texts)
    if not texts:
        raise ValidationError("No texts to measure the backtracking share of")
    return sum(1 for text in texts if classify_structure(text) == "backtracking") / len(texts)


def classifier_accuracy(labelled):
    if not labelled:
        raise ValidationError("No labelled texts to score the mode classifier on")
    hits = sum(1 for text, label in labelled if classify_mode(text) == label)
    return hits / len(labelled)


# labels_by_problem: problem id -> list of "code" / "nl" labels
def mode_histogram(labels_by_problem, bins=10):
    fractions = {}
    for pid in sorted(labels_by_problem):
        labels = list(labels_by_problem[pid])
        if not labels:
            raise ValidationError(f"Problem {pid} has no labelled samples")
        fractions[pid] = sum(1 for label in labels if label == "code") / len(labels)
    counts, edges = np.histogram(list(fractions.values()), bins=bins, range=(0.0, 1.0))
    return ModeHistogram(
        per_problem_code_fraction=fractions,
        bin_edges=[float(e) for e in edges],
        bin_counts=[int(c) for c in counts],
    )


def _nearest_rank(sorted_values, q):
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


# Percentiles use the nearest-rank rule, so the median of 1..100 is 50
def length_stats(lengths):
    values = sorted(int(x) for x in lengths)
    if not values:
        raise ValidationError("length_stats needs at least one sample")
    if values[0] < 0:
        raise ValidationError("Token counts must be non-negative")
    return LengthStats(
        mean=float(math.fsum(values) / len(values)),
        median=float(_nearest_rank(values, 0.5)),
        p95=float(_nearest_rank(values, 0.95)),
        n=len(values),
    )


def grade_samples(samples, golds):
    """Grade sample records ({problem_id, sample_idx, text, ...}) against golds by problem id.

    Returns problem id -> graded records in sample order, problems sorted.
    """
    graded = {}
    for sample in samples:
        pid = sample["problem_id"]
        if pid not in golds:
            raise ValidationError(f"No gold answer for problem {pid}")
        result = oracle.grade_answer(sample.get("text", ""), str(golds[pid]))
        record = dict(sample)
        record.update(
            extracted=result.extracted,
            correct=result.correct,
            reason=result.reason.value,
            mode=classify_mode(sample.get("text", "")),
        )
        graded.setdefault(pid, []).append(record)
    return {pid: sorted(graded[pid], key=lambda r: r["sample_idx"]) for pid in sorted(graded)}
