"""Inference backends behind one small interface.

Every backend offers ``complete(prompt, cfg)``; backends that can also read
next-token distributions or score forced continuations advertise it through
``capabilities`` so callers fail before a run starts, not half-way through.

- ``HttpBackend`` talks to an OpenAI-compatible ``/v1/completions`` server.
- ``SimulatedBackend`` answers graph-task prompts itself: it parses the
  prompt, draws a branch from a simlab policy and writes the forward trace.
- ``ReplayBackend`` serves recorded response bodies keyed by request hash,
  and records misses when it wraps another backend.
"""

import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
import openai
from openai import OpenAI
from tqdm import tqdm

from forklab import oracle, simlab, taskgen
from forklab.config import (
    FORKLAB_API_KEY_ENV,
    FORKLAB_BACKOFF_BASE_S,
    FORKLAB_ENDPOINT_URL,
    FORKLAB_LOGPROB_LIMIT,
    FORKLAB_LOGS_PATH,
    FORKLAB_MAX_IN_FLIGHT,
    FORKLAB_MODEL,
    FORKLAB_RETRY_MAX,
    FORKLAB_TIMEOUT_MS,
    setup_logging,
)
from forklab.errors import BackendError, CapabilityMissing, PromptParseError, ValidationError
from forklab.records import read_jsonl, stable_hash, write_jsonl

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

FIRST_TOKEN_DISTRIBUTION = "first_token_distribution"
CONTINUATION_SCORING = "continuation_scoring"
BACKEND_KINDS = ("http", "simulated", "replay")
FINISH_REASONS = ("stop", "length", "error")

RETRYABLE_ERRORS = (
    openai.APITimeoutError,
    openai.APIConnectionError,
    openai.RateLimitError,
    openai.InternalServerError,
)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_HEAD_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*")


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 1.0
    top_p: float = 0.95
    max_tokens: int = 1024
    n: int = 64
    stop: Optional[tuple] = None
    seed: Optional[int] = None
    logprob_top: Optional[int] = None

    def validate(self):
        if self.temperature < 0:
            raise ValidationError(f"temperature must be non-negative, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValidationError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens < 1 or self.n < 1:
            raise ValidationError(f"max_tokens and n must be positive, got {self.max_tokens}, {self.n}")
        if self.logprob_top is not None and self.logprob_top < 0:
            raise ValidationError(f"logprob_top must be non-negative, got {self.logprob_top}")
        return self

    def wire_fields(self):
        fields = asdict(self)
        if fields["stop"] is not None:
            fields["stop"] = list(fields["stop"])
        return fields


PROFILES = {
    "graph": DecodeConfig(temperature=1.0, top_p=0.95, max_tokens=1024, n=64),
    "reasoning": DecodeConfig(temperature=0.6, top_p=0.95, max_tokens=32768, n=64),
}


def decode_profile(name="graph", **overrides):
    if name not in PROFILES:
        raise ValidationError(f"Unknown decode profile {name!r}")
    if overrides.get("stop") is not None:
        overrides["stop"] = tuple(overrides["stop"])
    return replace(PROFILES[name], **overrides).validate()


@dataclass
class Completion:
    text: str
    finish_reason: str = "stop"
    # (token, logprob, {alternative: logprob}) per generated position, when requested
    token_logprobs: Optional[list] = None
    n_tokens: int = 0
    error: Optional[str] = None

    def to_record(self):
        record = {"text": self.text, "finish_reason": self.finish_reason, "n_tokens": self.n_tokens}
        if self.token_logprobs is not None:
            record["token_logprobs"] = [list(t) for t in self.token_logprobs]
        if self.error is not None:
            record["error"] = self.error
        return record


@dataclass(frozen=True)
class TokenCandidate:
    token_text: str
    logprob: float

    @property
    def prob(self):
        return math.exp(self.logprob)


@dataclass
class BackendDescriptor:
    kind: str
    label: Optional[str] = None
    epoch: Optional[int] = None
    endpoint_url: Optional[str] = None
    model: Optional[str] = None
    api_key_env: Optional[str] = None
    max_in_flight: Optional[int] = None
    timeout_ms: Optional[int] = None
    retry_max: Optional[int] = None
    policy: Optional[dict] = None
    slip: float = 0.0
    seed: int = 0
    prefix_branches: Optional[dict] = None
    prefix_mass: float = 0.3
    mode_preferences: Optional[str] = None
    fixture: Optional[str] = None
    record: Optional[dict] = None
    capabilities: dict = field(default_factory=dict)

    def validate(self):
        if self.kind not in BACKEND_KINDS:
            raise ValidationError(f"Unknown backend kind {self.kind!r}")
        if self.kind == "simulated" and not self.policy:
            raise ValidationError("A simulated backend needs a policy reference")
        if self.kind == "replay" and not self.fixture:
            raise ValidationError("A replay backend needs a fixture path")
        if not 0.0 <= self.slip <= 1.0:
            raise ValidationError(f"slip must be in [0, 1], got {self.slip}")
        if not 0.0 <= self.prefix_mass < 1.0:
            raise ValidationError(f"prefix_mass must be in [0, 1), got {self.prefix_mass}")
        unknown = set(self.capabilities) - {FIRST_TOKEN_DISTRIBUTION, CONTINUATION_SCORING}
        if unknown:
            raise ValidationError(f"Unknown capability flags: {sorted(unknown)}")
        return self

    @classmethod
    def from_mapping(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"Unknown backend keys: {sorted(unknown)}")
        return cls(**data).validate()

    @property
    def display_label(self):
        if self.label:
            return self.label
        return f"epoch-{self.epoch}" if self.epoch is not None else self.kind


def count_tokens(text):
    return len(_TOKEN_RE.findall(text or ""))


def require_capability(backend, flag):
    if not backend.capabilities.get(flag):
        logger.error(f"Backend {backend.kind} lacks capability {flag}")
        raise CapabilityMissing(f"The {backend.kind} backend does not support {flag}")


def _merge_candidates(top_logprobs):
    """Fold whitespace variants of the same word together, summing their mass."""
    merged = {}
    for token, logprob in top_logprobs.items():
        key = token.strip() or token
        merged[key] = float(np.logaddexp(merged[key], logprob)) if key in merged else float(logprob)
    return sorted((TokenCandidate(t, min(lp, 0.0)) for t, lp in merged.items()), key=lambda c: (-c.logprob, c.token_text))


def _as_body(response):
    if hasattr(response, "model_dump"):
        return response.model_dump()
    if isinstance(response, dict):
        return response
    raise BackendError(f"Unexpected response type {type(response).__name__}")


def _completions_from_body(body, expected=None):
    choices = body.get("choices") if isinstance(body, dict) else None
    if not isinstance(choices, list):
        raise BackendError("Malformed completion response: no choices")
    if expected is not None and len(choices) != expected:
        raise BackendError(f"Malformed completion response: expected {expected} choices, got {len(choices)}")

    completions = []
    for choice in sorted(choices, key=lambda c: c.get("index", 0)):
        if "text" not in choice:
            raise BackendError("Malformed completion response: choice without text")
        finish_reason = choice.get("finish_reason") or "stop"
        token_logprobs = None
        logprobs = choice.get("logprobs")
        if logprobs and logprobs.get("tokens") is not None:
            tops = logprobs.get("top_logprobs") or [None] * len(logprobs["tokens"])
            token_logprobs = [
                (tok, lp, dict(top or {}))
                for tok, lp, top in zip(logprobs["tokens"], logprobs.get("token_logprobs") or [], tops)
            ]
        n_tokens = choice.get("n_tokens")
        if n_tokens is None:
            n_tokens = len(token_logprobs) if token_logprobs else count_tokens(choice["text"])
        completions.append(Completion(
            text=choice["text"],
            finish_reason=finish_reason if finish_reason in FINISH_REASONS else "stop",
            token_logprobs=token_logprobs,
            n_tokens=int(n_tokens),
        ))
    return completions


def _body_from_completions(completions):
    choices = []
    for i, c in enumerate(completions):
        choice = {"index": i, "text": c.text, "finish_reason": c.finish_reason, "n_tokens": c.n_tokens, "logprobs": None}
        if c.token_logprobs is not None:
            choice["logprobs"] = {
                "tokens": [t[0] for t in c.token_logprobs],
                "token_logprobs": [t[1] for t in c.token_logprobs],
                "top_logprobs": [t[2] for t in c.token_logprobs],
            }
        choices.append(choice)
    return {"choices": choices}


def _error_completions(count, message):
    return [Completion(text="", finish_reason="error", n_tokens=0, error=message) for _ in range(count)]


class HttpBackend:
    kind = "http"

    def __init__(
        self,
        endpoint_url=FORKLAB_ENDPOINT_URL,
        model=FORKLAB_MODEL,
        api_key_env=FORKLAB_API_KEY_ENV,
        max_in_flight=FORKLAB_MAX_IN_FLIGHT,
        timeout_ms=FORKLAB_TIMEOUT_MS,
        retry_max=FORKLAB_RETRY_MAX,
        backoff_base_s=FORKLAB_BACKOFF_BASE_S,
        logprob_limit=FORKLAB_LOGPROB_LIMIT,
        n_per_request=None,
        capabilities=None,
        client=None,
        sleep=time.sleep,
    ):
        if max_in_flight < 1:
            raise ValidationError(f"max_in_flight must be positive, got {max_in_flight}")
        self.model = model
        self.max_in_flight = max_in_flight
        self.retry_max = retry_max
        self.backoff_base_s = backoff_base_s
        self.logprob_limit = logprob_limit
        self.n_per_request = n_per_request
        self.capabilities = {FIRST_TOKEN_DISTRIBUTION: True, CONTINUATION_SCORING: False, **(capabilities or {})}
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        # The key is read from the environment and never stored in manifests or artifacts
        self.client = client or OpenAI(
            base_url=endpoint_url,
            api_key=os.getenv(api_key_env) or "EMPTY",
            timeout=timeout_ms / 1000.0,
            max_retries=0,
        )

    # Send one completions request, retrying transient failures with exponential backoff
    def _request(self, **kwargs):
        payload = {k: v for k, v in kwargs.items() if v is not None}
        delay = self.backoff_base_s
        for attempt in range(self.retry_max + 1):
            try:
                with self._slots:
                    response = self.client.completions.create(model=self.model, **payload)
                return _as_body(response)
            except RETRYABLE_ERRORS as e:
                if attempt == self.retry_max:
                    logger.error(f"Request failed after {attempt + 1} attempts: {e!r}")
                    raise BackendError(f"Request failed after {attempt + 1} attempts: {e}") from e
                logger.warning(f"Transient backend failure ({type(e).__name__}). Retrying in {delay} seconds...")
                self._sleep(delay)
                delay *= 2
            except openai.APIError as e:
                logger.error(f"Backend rejected the request: {e!r}")
                raise BackendError(f"Backend rejected the request: {e}") from e

    def _complete_chunk(self, prompt, cfg, count, chunk_index):
        try:
            body = self._request(
                prompt=prompt,
                n=count,
                temperature=cfg.temperature,
                top_p=cfg.top_p,
                max_tokens=cfg.max_tokens,
                stop=list(cfg.stop) if cfg.stop else None,
                seed=None if cfg.seed is None else cfg.seed + chunk_index,
                logprobs=cfg.logprob_top,
                echo=False,
            )
            return _completions_from_body(body, expected=count)
        except BackendError as e:
            return _error_completions(count, str(e))

    def complete(self, prompt, cfg):
        cfg.validate()
        size = self.n_per_request or cfg.n
        chunks = [(i, min(size, cfg.n - start)) for i, start in enumerate(range(0, cfg.n, size))]
        if len(chunks) == 1:
            return self._complete_chunk(prompt, cfg, chunks[0][1], 0)
        with ThreadPoolExecutor(max_workers=min(self.max_in_flight, len(chunks))) as executor:
            parts = executor.map(lambda c: self._complete_chunk(prompt, cfg, c[1], c[0]), chunks)
            return [completion for part in parts for completion in part]

    def top_first_tokens(self, prompt, m):
        if m > self.logprob_limit:
            raise ValidationError(f"m={m} exceeds the backend logprob limit {self.logprob_limit}")
        body = self._request(prompt=prompt, n=1, max_tokens=1, temperature=1.0, logprobs=m, echo=False)
        try:
            top = body["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError("Malformed response: no top_logprobs for the first position") from e
        return _merge_candidates(top)[:m]

    def score_continuation(self, prompt, continuation):
        body = self._request(prompt=prompt + continuation, n=1, max_tokens=0, echo=True, logprobs=0)
        try:
            logprobs = body["choices"][0]["logprobs"]
            offsets = logprobs["text_offset"]
            values = logprobs["token_logprobs"]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError("Malformed response: echo logprobs missing") from e
        return float(math.fsum(lp for off, lp in zip(offsets, values) if off >= len(prompt) and lp is not None))


@lru_cache(maxsize=4096)
def _parse_cached(prompt):
    return taskgen.parse_prompt(prompt)


class SimulatedBackend:
    """Answers graph-task prompts with forward traces along a policy-drawn branch.

    Each arithmetic step slips by one with probability ``slip`` and the error
    carries into every later step. A response prefix can force the branch:
    the variable written right after the decision marker, or a word listed in
    ``prefix_branches``. At the response start those words share
    ``prefix_mass`` of the first-token distribution in proportion to the
    policy's branch probabilities; the preamble's first token keeps the rest.
    ``mode_preferences`` maps prompt keys to the chance of answering with a
    program instead of prose.
    """

    kind = "simulated"
    max_in_flight = 1

    def __init__(
        self, policy, slip=0.0, seed=0, prefix_branches=None, mode_preferences=None, logprob_limit=20, prefix_mass=0.3
    ):
        if not 0.0 <= slip <= 1.0:
            raise ValidationError(f"slip must be in [0, 1], got {slip}")
        if not 0.0 <= prefix_mass < 1.0:
            raise ValidationError(f"prefix_mass must be in [0, 1), got {prefix_mass}")
        self.policy = policy
        self.slip = slip
        self.seed = seed
        self.prefix_branches = dict(prefix_branches or {})
        self.mode_preferences = dict(mode_preferences or {})
        self.logprob_limit = logprob_limit
        self.prefix_mass = prefix_mass
        self.capabilities = {FIRST_TOKEN_DISTRIBUTION: True, CONTINUATION_SCORING: True}

    def _branches(self, parsed):
        return oracle.list_branches(parsed.rules)

    def branch_distribution(self, parsed):
        branches = self._branches(parsed)
        if len(branches) == 1:
            return np.array([1.0])
        if len(branches) != self.policy.B:
            raise ValidationError(f"Policy has {self.policy.B} branches, prompt has {len(branches)}")
        cue = simlab.rules_cue(parsed.rules, self.policy.d)
        return self.policy.branch_probs(cue)

    def _forced_branch(self, parsed, heads):
        response = parsed.response_prefix
        if response.startswith(taskgen.DECISION_MARKER):
            match = _HEAD_RE.match(response[len(taskgen.DECISION_MARKER):])
            if match and match.group(0) in heads:
                return heads.index(match.group(0))
            return None
        words = response.split()
        if words and words[0] in self.prefix_branches:
            return int(self.prefix_branches[words[0]])
        return None

    def _trace(self, parsed, branch_path, rng, code):
        by_name = {r.defined: r for r in parsed.rules}
        value = parsed.root_value
        lines = [f"{parsed.root} = {parsed.root_value}"] if code else []
        for i, name in enumerate(branch_path, start=1):
            rule = by_name[name]
            value += rule.offset + (1 if rng.random() < self.slip else 0)
            if code:
                lines.append(f"{rule.defined} = {rule.source} + {rule.offset}")
            else:
                lines.append(f"{i}. ${rule.defined} = {rule.source} + {rule.offset} = {value}$")
        closing = f"Thus, ${parsed.target} = \\boxed{{{value}}}$."
        if code:
            program = "\n".join(lines) + f"\nprint({branch_path[-1]})"
            return f"```python\n{program}\n```\nThe program prints {value}.\n{closing}"
        return f"{taskgen.FORWARD_PREAMBLE}\n" + "\n".join(lines) + f"\n{closing}"

    def _sample(self, parsed, probs, branches, rng):
        heads = [b[0] for b in branches]
        forced = self._forced_branch(parsed, heads)
        draw = rng.random()
        branch = forced if forced is not None else int(min(np.searchsorted(np.cumsum(probs), draw, side="right"), len(heads) - 1))

        response = parsed.response_prefix
        code_share = self.mode_preferences.get(simlab.prompt_key(parsed.problem_text), 0.0)
        code = rng.random() < code_share and not response.startswith(taskgen.DECISION_MARKER)
        text = self._trace(parsed, branches[branch], rng, code)
        if text.startswith(response):
            return text[len(response):]
        return "\n" + text

    def complete(self, prompt, cfg):
        cfg.validate()
        parsed = _parse_cached(prompt)
        branches = self._branches(parsed)
        probs = self.branch_distribution(parsed)
        rng = np.random.default_rng([self.seed, cfg.seed or 0, int(simlab.prompt_key(prompt), 16)])
        completions = []
        for _ in range(cfg.n):
            text = self._sample(parsed, probs, branches, rng)
            completions.append(Completion(text=text, finish_reason="stop", n_tokens=count_tokens(text)))
        return completions

    def top_first_tokens(self, prompt, m):
        if m > self.logprob_limit:
            raise ValidationError(f"m={m} exceeds the backend logprob limit {self.logprob_limit}")
        parsed = _parse_cached(prompt)
        response = parsed.response_prefix
        if response == "":
            mass = self._response_start_mass(parsed)
        elif response == taskgen.DECISION_MARKER:
            heads = [b[0] for b in self._branches(parsed)]
            mass = dict(zip(heads, self.branch_distribution(parsed)))
        else:
            raise PromptParseError("Simulated next-token distributions exist only at the response start and the decision point")
        candidates = [TokenCandidate(t, float(np.log(p))) for t, p in mass.items() if p > 0 and np.isfinite(np.log(p))]
        return sorted(candidates, key=lambda c: (-c.logprob, c.token_text))[:m]

    def _response_start_mass(self, parsed):
        preamble_token = _TOKEN_RE.match(taskgen.FORWARD_PREAMBLE).group(0)
        if not self.prefix_branches or self.prefix_mass == 0.0:
            return {preamble_token: 1.0}
        probs = self.branch_distribution(parsed)
        words_per_branch = {}
        for word, branch in self.prefix_branches.items():
            words_per_branch.setdefault(int(branch), []).append(word)
        mass = {preamble_token: 1.0 - self.prefix_mass}
        for branch, words in words_per_branch.items():
            if not 0 <= branch < len(probs):
                raise ValidationError(f"Prefix words {words} name branch {branch}, prompt has {len(probs)}")
            for word in words:
                mass[word] = mass.get(word, 0.0) + self.prefix_mass * float(probs[branch]) / len(words)
        return mass

    def score_continuation(self, prompt, continuation):
        parsed = _parse_cached(prompt)
        heads = [b[0] for b in self._branches(parsed)]
        if parsed.response_prefix != taskgen.DECISION_MARKER or continuation.strip() not in heads:
            raise PromptParseError("Simulated scoring covers branch-head continuations at the decision point only")
        probs = self.branch_distribution(parsed)
        return float(np.log(max(probs[heads.index(continuation.strip())], 1e-300)))


class ReplayBackend:
    """Serves recorded response bodies; with an inner backend, records what is missing."""

    kind = "replay"

    def __init__(self, fixture_path, inner=None, capabilities=None):
        self.fixture_path = fixture_path
        self.inner = inner
        self.max_in_flight = getattr(inner, "max_in_flight", 1)
        base = inner.capabilities if inner else {FIRST_TOKEN_DISTRIBUTION: True, CONTINUATION_SCORING: True}
        self.capabilities = {**base, **(capabilities or {})}
        self._lock = threading.Lock()
        self._bodies = {}
        if os.path.exists(fixture_path):
            for record in read_jsonl(fixture_path):
                self._bodies[record["request_hash"]] = record["response"]
        elif inner is None:
            raise ValidationError(f"Replay fixture {fixture_path} does not exist")
        logger.info(f"Replay backend loaded {len(self._bodies)} recorded responses from {fixture_path}")

    def _lookup(self, request, produce):
        key = stable_hash(request, 64)
        with self._lock:
            if key in self._bodies:
                return self._bodies[key]
        if self.inner is None:
            logger.error(f"No recorded response for request {key[:12]}")
            raise BackendError(f"No recorded response for request {key[:12]} in {self.fixture_path}")
        body = produce()
        with self._lock:
            self._bodies[key] = body
            write_jsonl([{"request_hash": key, "request": request, "response": body}], self.fixture_path, append=True)
        return body

    def complete(self, prompt, cfg):
        cfg.validate()
        request = {"op": "complete", "prompt": prompt, **cfg.wire_fields()}
        body = self._lookup(request, lambda: _body_from_completions(self.inner.complete(prompt, cfg)))
        return _completions_from_body(body, expected=cfg.n)

    def top_first_tokens(self, prompt, m):
        request = {"op": "top_first_tokens", "prompt": prompt, "m": m}

        def produce():
            candidates = self.inner.top_first_tokens(prompt, m)
            top = {c.token_text: c.logprob for c in candidates}
            return {"choices": [{"index": 0, "text": "", "logprobs": {"top_logprobs": [top]}}]}

        body = self._lookup(request, produce)
        return _merge_candidates(body["choices"][0]["logprobs"]["top_logprobs"][0])[:m]

    def score_continuation(self, prompt, continuation):
        request = {"op": "score_continuation", "prompt": prompt, "continuation": continuation}
        body = self._lookup(request, lambda: {"score": self.inner.score_continuation(prompt, continuation)})
        return float(body["score"])


def complete(backend, prompt, cfg):
    return backend.complete(prompt, cfg)


def top_first_tokens(backend, prompt, m):
    require_capability(backend, FIRST_TOKEN_DISTRIBUTION)
    if m < 1:
        raise ValidationError(f"m must be positive, got {m}")
    return backend.top_first_tokens(prompt, m)


def score_continuation(backend, prompt, continuation):
    require_capability(backend, CONTINUATION_SCORING)
    return backend.score_continuation(prompt, continuation)


def sim_complete(policy, prompt, cfg, slip=0.0, seed=0):
    return SimulatedBackend(policy, slip=slip, seed=seed).complete(prompt, cfg)


# Completions for many prompts, in input order, with bounded fan-out
def complete_many(backend, prompts, cfg, max_in_flight=None, desc="Sampling"):
    prompts = list(prompts)
    workers = max(1, max_in_flight or backend.max_in_flight)
    logger.info(f"Starting sampling of {len(prompts)} prompts x {cfg.n} with {workers} workers .....")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(tqdm(executor.map(lambda p: backend.complete(p, cfg), prompts), total=len(prompts), desc=desc))
    logger.info("Sampling was completed.")
    return results


def resolve_policy(spec, train_instances=None):
    kind = spec.get("kind")
    d = int(spec.get("d", 64))
    if kind == "uniform":
        return simlab.SimPolicy.uniform(int(spec.get("branches", 2)), d)
    if kind == "fixed":
        return simlab.SimPolicy.fixed(spec["probs"], d)
    if kind == "snapshot":
        return simlab.load_policy(spec["path"])
    if kind == "trained":
        cfg = simlab.SimConfig.from_mapping(spec.get("simulate", {}))
        train = simlab.sim_problems_from_instances(train_instances, cfg.d) if train_instances else None
        epoch = int(spec["epoch"])
        return simlab.train_checkpoints(cfg, [epoch], train=train)[epoch]
    raise ValidationError(f"Unknown policy kind {kind!r}")


def make_backend(descriptor, train_instances=None):
    if not isinstance(descriptor, BackendDescriptor):
        descriptor = BackendDescriptor.from_mapping(descriptor)
    if descriptor.kind == "http":
        options = {
            key: getattr(descriptor, key)
            for key in ("endpoint_url", "model", "api_key_env", "max_in_flight", "timeout_ms", "retry_max")
            if getattr(descriptor, key) is not None
        }
        return HttpBackend(capabilities=descriptor.capabilities, **options)
    if descriptor.kind == "simulated":
        preferences = None
        if descriptor.mode_preferences:
            preferences = simlab.fit_mode_preferences(read_jsonl(descriptor.mode_preferences))
        return SimulatedBackend(
            resolve_policy(descriptor.policy, train_instances),
            slip=descriptor.slip,
            prefix_mass=descriptor.prefix_mass,
            seed=descriptor.seed,
            prefix_branches=descriptor.prefix_branches,
            mode_preferences=preferences,
        )
    inner = make_backend(descriptor.record, train_instances) if descriptor.record else None
    return ReplayBackend(descriptor.fixture, inner=inner, capabilities=descriptor.capabilities)
