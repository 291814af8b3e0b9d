"""Branch-choice simulator: a linear softmax policy over binary cue vectors."""

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from tqdm import tqdm

from forklab import oracle
from forklab.config import FORKLAB_LOGS_PATH, setup_logging
from forklab.errors import ArtifactIOError, TrainingDiverged, ValidationError
from forklab.records import write_csv

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

REGIMES = ("forward", "reverse")
OPTIMIZERS = ("sgd", "adam")
DEFAULT_KS = (1, 2, 4, 8, 16, 32, 64, 128, 256)
DYNAMICS_COLUMNS = ["epoch", "k", "pass_at_k", "train_loss", "mean_max_confidence", "chosen_correct_rate"]

# Probabilities below this are represented by a finite bias
_PROB_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class SimProblem:
    cue_vector: np.ndarray
    correct_branch: int


@dataclass(eq=False)
class SimDataset:
    cues: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.cues = np.asarray(self.cues, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.cues.ndim != 2 or self.labels.shape != (self.cues.shape[0],):
            raise ValidationError("cues must be (N, d) and labels (N,)")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        for cue, label in zip(self.cues, self.labels):
            yield SimProblem(cue, int(label))

    @classmethod
    def from_problems(cls, problems):
        problems = list(problems)
        if not problems:
            raise ValidationError("A dataset needs at least one problem")
        return cls(np.stack([p.cue_vector for p in problems]), [p.correct_branch for p in problems])


@dataclass(eq=False)
class SimPolicy:
    """Branch distribution softmax(weights @ cue + bias)."""

    weights: np.ndarray
    bias: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValidationError("weights must be (B, d) and bias (B,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("Policy parameters must be finite")

    @property
    def B(self):
        return self.weights.shape[0]

    @property
    def d(self):
        return self.weights.shape[1]

    def logits(self, cues):
        return np.atleast_2d(np.asarray(cues, dtype=np.float64)) @ self.weights.T + self.bias

    def probs(self, cues):
        return softmax(self.logits(cues))

    def branch_probs(self, cue):
        return self.probs(cue)[0]

    @classmethod
    def uniform(cls, B, d, seed=0):
        return cls(np.zeros((B, d)), np.zeros(B), seed)

    @classmethod
    def fixed(cls, probs, d=64, seed=0):
        """A cue-insensitive policy with the given branch distribution."""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 1 or len(probs) < 1 or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise ValidationError(f"Fixed branch probabilities must be a distribution, got {probs.tolist()}")
        return cls(np.zeros((len(probs), d)), np.log(np.maximum(probs, _PROB_FLOOR)), seed)


class TopKPolicyView:
    """Uniform over each problem's k most probable branches; the wrapped policy is left alone."""

    def __init__(self, policy, k):
        self.policy = policy
        self.k = k

    @property
    def B(self):
        return self.policy.B

    @property
    def d(self):
        return self.policy.d

    def probs(self, cues):
        base = self.policy.probs(cues)
        order = np.argsort(-base, axis=1, kind="stable")[:, : self.k]
        out = np.zeros_like(base)
        np.put_along_axis(out, order, 1.0 / self.k, axis=1)
        return out

    def branch_probs(self, cue):
        return self.probs(cue)[0]


@dataclass(frozen=True)
class SimConfig:
    B: int = 2
    d: int = 64
    train_size: int = 32
    test_size: int = 256
    learning_rate: float = 0.2
    epochs: int = 1500
    regime: str = "forward"
    exec_acc: float = 0.95
    exec_warmup: float = 1.0
    seed: int = 0
    batch_size: int = None
    optimizer: str = "adam"
    adam_beta2: float = 0.9
    balanced_test: bool = True
    ks: tuple = DEFAULT_KS
    bin_width: float = 0.05

    def validate(self):
        if self.regime not in REGIMES:
            raise ValidationError(f"Unknown regime {self.regime!r}")
        if self.B < (2 if self.regime == "forward" else 1):
            raise ValidationError(f"The {self.regime} regime needs more branches, got B={self.B}")
        if not 0.0 <= self.exec_acc <= 1.0:
            raise ValidationError(f"exec_acc must be in [0, 1], got {self.exec_acc}")
        if self.train_size < 1 or self.test_size < 1:
            raise ValidationError("train_size and test_size must be positive")
        if self.train_size > 1 and self.d < 2 * math.log2(self.train_size):
            raise ValidationError(
                f"d={self.d} is too small to keep {self.train_size} train cues distinct (need d >= 2*log2(train_size))"
            )
        if self.learning_rate < 0 or self.epochs < 0 or self.exec_warmup < 0:
            raise ValidationError("learning_rate, epochs and exec_warmup must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"Unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.adam_beta2 < 1.0:
            raise ValidationError(f"adam_beta2 must be in [0, 1), got {self.adam_beta2}")
        if not self.ks or list(self.ks) != sorted(set(self.ks)) or self.ks[0] < 1:
            raise ValidationError(f"ks must be ascending positive integers, got {list(self.ks)}")
        if not 0.0 < self.bin_width <= 1.0:
            raise ValidationError(f"bin_width must be in (0, 1], got {self.bin_width}")
        return self

    @classmethod
    def from_mapping(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"Unknown simulate keys: {sorted(unknown)}")
        values = dict(data)
        if "ks" in values:
            values["ks"] = tuple(int(k) for k in values["ks"])
        return cls(**values).validate()


# Reference runs for the forward/reverse comparison
FORWARD_REFERENCE = SimConfig()
REVERSE_REFERENCE = replace(SimConfig(), regime="reverse", exec_acc=0.999, exec_warmup=0.0)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    mean_max_confidence: float
    chosen_correct_rate: float
    pass_at_k: dict
    exec_acc: float = 1.0
    train_confidence: float = None


@dataclass
class ConfidenceHistogram:
    bin_edges: list
    correct_counts: list
    wrong_counts: list
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "bin_edges": self.bin_edges,
            "correct_counts": self.correct_counts,
            "wrong_counts": self.wrong_counts,
        }


def softmax(logits):
    logits = np.atleast_2d(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(policy, cues, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. weights and bias."""
    cues = np.atleast_2d(np.asarray(cues, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    logits = policy.logits(cues)
    top = logits.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    loss = float(np.mean(log_norm - logits[np.arange(n), labels]))

    residual = softmax(logits)
    residual[np.arange(n), labels] -= 1.0
    residual /= n
    return loss, residual.T @ cues, residual.sum(axis=0)


def policy_loss(policy, dataset):
    return loss_and_grad(policy, dataset.cues, dataset.labels)[0]


# Step size below which full-batch gradient descent cannot increase the loss
def stability_threshold(dataset):
    augmented_sq = np.sum(dataset.cues ** 2, axis=1) + 1.0
    smoothness = 0.5 * float(augmented_sq.max())
    return 2.0 / smoothness


class SGD:
    def step(self, weights, bias, grad_w, grad_b, learning_rate):
        return weights - learning_rate * grad_w, bias - learning_rate * grad_b


class Adam:
    # eps stays far below the gradients of a separated train set
    def __init__(self, beta1=0.9, beta2=0.9, eps=1e-30):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.moments = None

    def step(self, weights, bias, grad_w, grad_b, learning_rate):
        if self.moments is None:
            self.moments = [np.zeros_like(weights), np.zeros_like(weights), np.zeros_like(bias), np.zeros_like(bias)]
        self.t += 1
        m_w, v_w, m_b, v_b = self.moments
        m_w[:] = self.beta1 * m_w + (1 - self.beta1) * grad_w
        v_w[:] = self.beta2 * v_w + (1 - self.beta2) * grad_w ** 2
        m_b[:] = self.beta1 * m_b + (1 - self.beta1) * grad_b
        v_b[:] = self.beta2 * v_b + (1 - self.beta2) * grad_b ** 2
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        new_w = weights - learning_rate * (m_w / c1) / (np.sqrt(v_w / c2) + self.eps)
        new_b = bias - learning_rate * (m_b / c1) / (np.sqrt(v_b / c2) + self.eps)
        return new_w, new_b


def make_optimizer(name, beta2=0.9):
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam(beta2=beta2)
    raise ValidationError(f"Unknown optimizer {name!r}")


def make_sim_dataset(cfg, rng):
    cfg.validate()
    train_cues = rng.integers(0, 2, size=(cfg.train_size, cfg.d), dtype=np.int8)
    train_labels = rng.integers(0, cfg.B, size=cfg.train_size)

    test_cues = rng.integers(0, 2, size=(cfg.test_size, cfg.d), dtype=np.int8)
    if cfg.balanced_test:
        # every cue appears once with every label
        test_labels = np.tile(np.arange(cfg.B), cfg.test_size)
        test_cues = np.repeat(test_cues, cfg.B, axis=0)
    else:
        test_labels = rng.integers(0, cfg.B, size=cfg.test_size)
    return SimDataset(train_cues, train_labels), SimDataset(test_cues, test_labels)


def sgd_epoch(policy, train, learning_rate, batch_size=None, optimizer=None, rng=None):
    optimizer = optimizer or SGD()
    n = len(train)
    order = rng.permutation(n) if (rng is not None and batch_size) else np.arange(n)
    size = batch_size or n

    weights, bias = policy.weights.copy(), policy.bias.copy()
    current = policy
    for start in range(0, n, size):
        idx = order[start:start + size]
        loss, grad_w, grad_b = loss_and_grad(current, train.cues[idx], train.labels[idx])
        if not math.isfinite(loss) or not (np.all(np.isfinite(grad_w)) and np.all(np.isfinite(grad_b))):
            logger.error(f"Non-finite loss {loss} at batch offset {start} (lr={learning_rate}, |w|max={np.abs(weights).max()})")
            raise TrainingDiverged(f"Loss became non-finite ({loss}) at batch offset {start}; lower the learning rate")
        weights, bias = optimizer.step(weights, bias, grad_w, grad_b, learning_rate)
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            logger.error(f"Parameters overflowed at batch offset {start} (lr={learning_rate})")
            raise TrainingDiverged(f"Policy parameters became non-finite at batch offset {start}")
        current = SimPolicy(weights, bias, policy.seed)
    return current


def exec_at(cfg, epoch):
    if cfg.regime == "forward" and cfg.exec_warmup > 0:
        return cfg.exec_acc * (1.0 - math.exp(-epoch / cfg.exec_warmup))
    return cfg.exec_acc


def eval_policy(policy, test, ks, exec_acc, regime="forward", epoch=0, train_loss=0.0, train_confidence=None):
    """Analytic pass@k: per problem p = P(correct branch | cue) * exec_acc, pass@k = mean of 1 - (1 - p)^k."""
    probs = policy.probs(test.cues)
    rows = np.arange(len(test))
    chosen = np.argmax(probs, axis=1)
    if regime == "reverse":
        p = np.full(len(test), float(exec_acc))
    else:
        p = probs[rows, test.labels] * exec_acc
    return EpochReport(
        epoch=epoch,
        train_loss=float(train_loss),
        mean_max_confidence=float(np.mean(probs.max(axis=1))),
        chosen_correct_rate=float(np.mean(chosen == test.labels)),
        pass_at_k={int(k): float(np.mean(1.0 - (1.0 - p) ** k)) for k in ks},
        exec_acc=float(exec_acc),
        train_confidence=train_confidence,
    )


# Bins are [lo, hi) except the last, which also holds 1.0
def bin_confidences(confidence, correct, bin_width=0.05):
    if not 0.0 < bin_width <= 1.0:
        raise ValidationError(f"bin_width must be in (0, 1], got {bin_width}")
    n_bins = max(1, int(round(1.0 / bin_width)))
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    bins = np.minimum(np.floor(confidence * n_bins + 1e-9).astype(int), n_bins - 1)
    return ConfidenceHistogram(
        bin_edges=[round(i / n_bins, 12) for i in range(n_bins + 1)],
        correct_counts=np.bincount(bins[correct], minlength=n_bins).tolist(),
        wrong_counts=np.bincount(bins[~correct], minlength=n_bins).tolist(),
    )


def confidence_histogram(policy, test, bin_width=0.05):
    probs = policy.probs(test.cues)
    return bin_confidences(probs.max(axis=1), np.argmax(probs, axis=1) == test.labels, bin_width)


def apply_topk_uniform(policy, k):
    if not 1 <= k <= policy.B:
        logger.error(f"Top-k view with k={k} on a {policy.B}-branch policy")
        raise ValidationError(f"k must be in 1..{policy.B}, got {k}")
    return TopKPolicyView(policy, k)


def _train_confidence(policy, train):
    probs = policy.probs(train.cues)
    return float(np.mean(probs[np.arange(len(train)), train.labels]))


def _training_run(cfg, train):
    """Yield (epoch, policy) from the initial policy through cfg.epochs."""
    policy = SimPolicy.uniform(cfg.B, cfg.d, cfg.seed)
    yield 0, policy
    if cfg.regime == "reverse":
        # no branch supervision: the policy never moves
        for epoch in range(1, cfg.epochs + 1):
            yield epoch, policy
        return
    optimizer = make_optimizer(cfg.optimizer, cfg.adam_beta2)
    rng = np.random.default_rng([cfg.seed, 1])
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="Training epochs", disable=cfg.epochs < 10):
        policy = sgd_epoch(policy, train, cfg.learning_rate, cfg.batch_size, optimizer, rng)
        yield epoch, policy


def run_dynamics(cfg, csv_path=None, meta=None, datasets=None):
    cfg.validate()
    logger.info(f"Starting {cfg.regime} dynamics run: B={cfg.B}, d={cfg.d}, epochs={cfg.epochs} .....")
    train, test = datasets or make_sim_dataset(cfg, np.random.default_rng(cfg.seed))

    reports = []
    for epoch, policy in _training_run(cfg, train):
        reports.append(
            eval_policy(
                policy,
                test,
                cfg.ks,
                exec_at(cfg, epoch),
                regime=cfg.regime,
                epoch=epoch,
                train_loss=policy_loss(policy, train),
                train_confidence=_train_confidence(policy, train),
            )
        )

    if csv_path:
        write_csv(dynamics_rows(reports), DYNAMICS_COLUMNS, csv_path, meta=meta)
    logger.info(f"Dynamics run was completed: {len(reports)} evaluations.")
    return reports


def dynamics_rows(reports):
    rows = []
    for report in reports:
        for k, value in report.pass_at_k.items():
            rows.append({
                "epoch": report.epoch,
                "k": k,
                "pass_at_k": value,
                "train_loss": report.train_loss,
                "mean_max_confidence": report.mean_max_confidence,
                "chosen_correct_rate": report.chosen_correct_rate,
            })
    return rows


def train_checkpoints(cfg, epochs, train=None):
    """Snapshot the forward-trained policy at each requested epoch."""
    cfg.validate()
    wanted = sorted(set(int(e) for e in epochs))
    if not wanted or wanted[0] < 0 or wanted[-1] > cfg.epochs:
        raise ValidationError(f"Checkpoint epochs must lie in 0..{cfg.epochs}, got {wanted}")
    if train is None:
        train, _ = make_sim_dataset(cfg, np.random.default_rng(cfg.seed))
    snapshots = {}
    for epoch, policy in _training_run(replace(cfg, epochs=wanted[-1]), train):
        if epoch in wanted:
            snapshots[epoch] = policy
    return snapshots


# Relative error between the analytic gradient and central finite differences
def gradient_check(policy, cues, labels, step=1e-4):
    _, grad_w, grad_b = loss_and_grad(policy, cues, labels)
    analytic = np.concatenate([grad_w.ravel(), grad_b])
    params = np.concatenate([policy.weights.ravel(), policy.bias])
    B, d = policy.weights.shape

    def loss_at(flat):
        candidate = SimPolicy(flat[: B * d].reshape(B, d), flat[B * d:], policy.seed)
        return loss_and_grad(candidate, cues, labels)[0]

    numeric = np.zeros_like(params)
    for i in range(len(params)):
        up, down = params.copy(), params.copy()
        up[i] += step
        down[i] -= step
        numeric[i] = (loss_at(up) - loss_at(down)) / (2 * step)

    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def save_policy(policy, path):
    lines = [f"{policy.B} {policy.d} {policy.seed}"]
    lines += [repr(float(x)) for x in policy.weights.ravel()]
    lines += [repr(float(x)) for x in policy.bias]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        logger.error(f"Could not write policy snapshot {path}: {e}")
        raise ArtifactIOError(path, str(e)) from e
    logger.info(f"Policy snapshot was saved to {path}.")


def load_policy(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line.strip() for line in f if line.strip()]
    except FileNotFoundError as e:
        raise ArtifactIOError(path, "file not found") from e
    try:
        B, d, seed = (int(x) for x in lines[0].split())
        values = np.array([float(x) for x in lines[1:]])
    except (IndexError, ValueError) as e:
        raise ValidationError(f"{path} is not a policy snapshot: {e}") from e
    if len(values) != B * d + B:
        raise ValidationError(f"{path}: expected {B * d + B} parameters, found {len(values)}")
    return SimPolicy(values[: B * d].reshape(B, d), values[B * d:], seed)


# Binary features of a rule list's surface order
def cue_vector(rule_texts, d):
    payload = "\n".join(rule_texts).encode("utf-8")
    bits = []
    counter = 0
    while len(bits) < d:
        digest = hashlib.sha256(counter.to_bytes(4, "big") + payload).digest()
        bits.extend(np.unpackbits(np.frombuffer(digest, dtype=np.uint8)).tolist())
        counter += 1
    return np.array(bits[:d], dtype=np.int8)


def rules_cue(rules, d):
    return cue_vector([oracle.format_rule(r) for r in rules], d)


def sim_problems_from_instances(instances, d):
    instances = list(instances)
    if not instances:
        raise ValidationError("No instances to convert")
    cues = np.stack([rules_cue(inst.rules, d) for inst in instances])
    return SimDataset(cues, [inst.correct_branch for inst in instances])


def prompt_key(prompt):
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


# rows: mix records with "prompt" and "mode"; returns prompt key -> fraction of code rows
def fit_mode_preferences(rows):
    counts = {}
    for row in rows:
        if row["mode"] not in ("nl", "code"):
            raise ValidationError(f"Unknown mode {row['mode']!r} in mix row")
        total, code = counts.get(prompt_key(row["prompt"]), (0, 0))
        counts[prompt_key(row["prompt"])] = (total + 1, code + (row["mode"] == "code"))
    return {key: code / total for key, (total, code) in sorted(counts.items())}
