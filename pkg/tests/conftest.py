import os
import tempfile

# Keep test logs out of the working tree; must run before forklab.config is imported
os.environ.setdefault("FORKLAB_LOGS_PATH", os.path.join(tempfile.gettempdir(), "forklab-tests", "forklab.log"))

import threading
import time

import pytest

from forklab import oracle, taskgen
from forklab.oracle import parse_rule

FIXTURES_DIR = os.path.join(os.path.dirname(__file__), "fixtures")

STAR_RULES = (
    "t = x + 10, e = c + 17, s = y + 13, x = a + 2, b = v + 16, j = s + 17, r = d + 18, "
    "u = o + 20, h = f + 6, o = v + 6, i = p + 16, y = u + 11, a = h + 5, v = 3, d = z + 13, "
    "z = e + 13, g = i + 12, f = m + 11, c = j + 6, p = t + 6, m = b + 3"
)

SHORT_CHAIN_RULES = "n = 10, m = n + 12, k = m + 3, h = k + 4, l = n + 19, j = l + 17, x = j + 2"

# d -> o -> k -> w -> v -> g -> f -> m -> l -> p -> s, plus a short second branch a -> b
FORWARD_EXAMPLE_RULES = (
    "d = 18, o = d + 19, k = o + 9, w = k + 1, v = w + 6, g = v + 14, f = g + 11, "
    "m = f + 9, l = m + 5, p = l + 7, s = p + 11, a = d + 3, b = a + 2"
)


def rules_from_text(text):
    return tuple(parse_rule(part.strip()) for part in text.split(","))


def make_instance(rules_text, target, instance_id="fixture-00000", template_id="alpaca"):
    rules = rules_from_text(rules_text)
    root = oracle.find_root(rules)
    return taskgen.ProblemInstance(
        id=instance_id,
        rules=rules,
        root=root.defined,
        root_value=root.offset,
        target=target,
        answer=oracle.solve_chain(rules, target),
        correct_branch=oracle.branch_of(rules, target),
        template_id=template_id,
        seed=0,
        permutation_id=taskgen.permutation_rank(taskgen._canonical_order(rules)),
    )


@pytest.fixture
def star_rules():
    return rules_from_text(STAR_RULES)


@pytest.fixture
def short_chain_instance():
    return make_instance(SHORT_CHAIN_RULES, "x", "short-00000")


@pytest.fixture
def forward_example_instance():
    return make_instance(FORWARD_EXAMPLE_RULES, "s", "forward-00000")


@pytest.fixture
def small_spec():
    return taskgen.DatasetSpec(branches=2, path_len=3, train_size=8, test_size=30, seed=3)


@pytest.fixture
def small_test_instances(small_spec):
    return taskgen.build_dataset(small_spec)[1]


@pytest.fixture
def fixtures_dir():
    return FIXTURES_DIR


class FakeCompletions:
    """Stands in for ``client.completions`` of an OpenAI client."""

    def __init__(self, respond, failures=(), delay=0.0):
        self.respond = respond
        self.failures = list(failures)
        self.delay = delay
        self.calls = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def create(self, **kwargs):
        with self._lock:
            self.calls.append(kwargs)
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            failure = self.failures.pop(0) if self.failures else None
        try:
            if self.delay:
                time.sleep(self.delay)
            if failure is not None:
                raise failure
            return self.respond(**kwargs)
        finally:
            with self._lock:
                self.in_flight -= 1


class FakeClient:
    def __init__(self, respond, failures=(), delay=0.0):
        self.completions = FakeCompletions(respond, failures, delay)


def echo_choices(**kwargs):
    """One choice per requested sample, each echoing the prompt's tail and its index."""
    tail = kwargs["prompt"][-12:]
    return {
        "choices": [
            {"index": i, "text": f"{tail}|{i}", "finish_reason": "stop", "logprobs": None}
            for i in range(kwargs.get("n", 1))
        ]
    }


@pytest.fixture
def fake_client_factory():
    return FakeClient
