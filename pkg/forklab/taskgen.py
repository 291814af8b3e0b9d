"""Path-star dependency-chain problems and their training data.

A problem is a star graph: one root literal with several disjoint chains of
``v = u + offset`` rules hanging off it. The target sits at the end of one
chain, so a forward solution has to pick a branch at the root before it can
compute anything. The reverse solution substitutes from the target back to
the root and never faces that choice.
"""

import hashlib
import json
import math
import os
import random
import re
import string
from dataclasses import dataclass, field, replace
from typing import Optional

from forklab import oracle
from forklab.config import FORKLAB_LOGS_PATH, setup_logging
from forklab.errors import AlphabetExhausted, ArtifactIOError, PromptParseError, RecordError, ValidationError
from forklab.oracle import DependencyRule
from forklab.records import read_jsonl, write_jsonl

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

FORWARD_PREAMBLE = "To find the target value, we compute the following variables step by step:"
# The decision point: the next token names the first variable, i.e. the branch head
DECISION_MARKER = FORWARD_PREAMBLE + "\n1. $"

DIRECTIONS = ("forward", "reverse")
MODES = ("nl", "code")


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    head: str
    rule_separator: str
    rule_wrap: str
    query: str
    response_marker: str
    pattern: re.Pattern


ALPACA_HEAD = (
    "Below is an instruction that describes a task, paired with an input that provides further context. "
    "Write a response that appropriately completes the request.\n\n"
    "### Instruction:\n"
    "Solve the following math problem, and put your final answer within \\boxed{}.\n\n"
    "### Input:\n"
    "Consider a system of variables where each variable is defined as follows:\n"
)

LETTERS_HEAD = (
    "Q: Let each letter represent a numerical variable. These variables are defined as follows:\n"
)

TEMPLATES = {
    "alpaca": PromptTemplate(
        id="alpaca",
        head=ALPACA_HEAD,
        rule_separator=", ",
        rule_wrap="{rule}",
        query=".\nIf ${root} = {root_value}$, determine the value of ${target}$.",
        response_marker="\n\n### Response:\n",
        pattern=re.compile(
            re.escape(ALPACA_HEAD)
            + r"(?P<rules>.*?)\.\nIf \$(?P<root>\w+) = (?P<root_value>[+-]?\d+)\$, "
            + r"determine the value of \$(?P<target>\w+)\$\."
            + re.escape("\n\n### Response:\n")
            + r"(?P<response>.*)\Z",
            re.DOTALL,
        ),
    ),
    "letters": PromptTemplate(
        id="letters",
        head=LETTERS_HEAD,
        rule_separator="; ",
        rule_wrap="${rule}$",
        query=(
            ".\nWhat is the resulting value of ${target}$? "
            "Put your final answer within \\boxed{{}}."
        ),
        response_marker="\n\nAnswer:\n",
        pattern=re.compile(
            re.escape(LETTERS_HEAD)
            + r"(?P<rules>.*?)\.\nWhat is the resulting value of \$(?P<target>\w+)\$\? "
            + re.escape("Put your final answer within \\boxed{}.")
            + re.escape("\n\nAnswer:\n")
            + r"(?P<response>.*)\Z",
            re.DOTALL,
        ),
    ),
}

DEFAULT_TEMPLATE = "alpaca"


@dataclass(frozen=True)
class StarGraph:
    root: int
    branches: tuple
    target: int

    @property
    def node_count(self):
        return 1 + sum(len(b) for b in self.branches)


@dataclass(frozen=True)
class DatasetSpec:
    branches: int = 2
    path_len: int = 10
    train_size: int = 6400
    test_size: int = 1000
    offset_range: tuple = (1, 20)
    root_range: tuple = (1, 20)
    seed: int = 0
    templates: tuple = (DEFAULT_TEMPLATE,)
    direction: str = "forward"
    alphabet: str = string.ascii_lowercase

    def validate(self):
        if self.branches < 1 or self.path_len < 1:
            raise ValidationError(f"branches and path_len must be >= 1, got {self.branches}, {self.path_len}")
        if self.train_size < 0 or self.test_size < 0 or self.train_size + self.test_size == 0:
            raise ValidationError("train_size and test_size must be non-negative and not both zero")
        for name in ("offset_range", "root_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} is empty: {lo}..{hi}")
        if self.offset_range[0] < 1:
            raise ValidationError("Offsets must be positive integers")
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"Unknown direction {self.direction!r}")
        if not self.templates:
            raise ValidationError("At least one template id is required")
        for template_id in self.templates:
            if template_id not in TEMPLATES:
                raise ValidationError(f"Unknown template {template_id!r}")
        return self

    @classmethod
    def from_mapping(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"Unknown dataset spec keys: {sorted(unknown)}")
        values = dict(data)
        for key in ("offset_range", "root_range", "templates"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values).validate()


@dataclass(frozen=True)
class MixSpec:
    structure: str = "data_level"
    mode_ratio: float = 0.5
    seed: int = 0

    def validate(self):
        if self.structure not in ("data_level", "problem_level"):
            raise ValidationError(f"Unknown mix structure {self.structure!r}")
        if not 0.0 <= self.mode_ratio <= 1.0:
            raise ValidationError(f"mode_ratio must be in [0, 1], got {self.mode_ratio}")
        return self


@dataclass(frozen=True)
class ProblemInstance:
    id: str
    rules: tuple
    root: str
    root_value: int
    target: str
    answer: int
    correct_branch: int
    template_id: str
    seed: int
    permutation_id: Optional[int] = None

    @property
    def prompt(self):
        return render_prompt(self, self.template_id)

    @property
    def branch_heads(self):
        return [branch[0] for branch in oracle.list_branches(self.rules)]


@dataclass(frozen=True)
class TraceStep:
    variable: str
    value: int
    line: str


@dataclass(frozen=True)
class SolutionTrace:
    direction: str
    steps: tuple
    final_answer: int
    text: str


@dataclass(frozen=True)
class TrainRow:
    instance: ProblemInstance
    solution: SolutionTrace


@dataclass(frozen=True)
class MixRow:
    problem_id: str
    mode: str
    solution_text: str


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    answer: str
    meta: dict = field(default_factory=dict)


# One gradeable prompt, whatever task it came from
@dataclass(frozen=True)
class EvalItem:
    id: str
    prompt: str
    gold: str


# Generate an unique id for each instance
def generate_id(split, seed, index):
    digest = hashlib.md5(f"{split}-{seed}-{index}".encode()).hexdigest()
    return f"{split}-{index:05d}-{digest[:8]}"


def _derive_seed(*parts):
    digest = hashlib.md5("-".join(str(p) for p in parts).encode()).hexdigest()
    return int(digest[:8], 16)


def generate_star_graph(branches, path_len, rng):
    if branches < 1 or path_len < 1:
        raise ValidationError(f"branches and path_len must be >= 1, got {branches}, {path_len}")
    paths = tuple(
        tuple(1 + b * path_len + i for i in range(path_len)) for b in range(branches)
    )
    target = paths[rng.randrange(branches)][-1]
    return StarGraph(root=0, branches=paths, target=target)


def _assign_names(count, alphabet, rng):
    if count <= len(alphabet):
        return rng.sample(list(alphabet), count)
    pairs = [a + b for a in alphabet for b in alphabet]
    if count > len(pairs):
        logger.error(f"Alphabet of {len(alphabet)} symbols cannot name {count} variables")
        raise AlphabetExhausted(f"Cannot name {count} variables with two-letter names over {alphabet!r}")
    logger.warning(
        f"{count} variables exceed the single-letter alphabet; using two-letter names "
        "(names may not be single tokens, probing needs continuation scoring)"
    )
    return rng.sample(pairs, count)


def permutation_rank(order):
    """Lehmer rank of a permutation of 0..n-1; the identity ranks 0."""
    n = len(order)
    remaining = list(range(n))
    rank = 0
    for i, value in enumerate(order):
        pos = remaining.index(value)
        rank += pos * math.factorial(n - 1 - i)
        remaining.pop(pos)
    return rank


def _canonical_order(rules):
    root = oracle.find_root(rules)
    ordered = [root.defined]
    for branch in oracle.list_branches(rules):
        ordered.extend(branch)
    position = {name: i for i, name in enumerate(ordered)}
    return [position[rule.defined] for rule in rules]


def instantiate_problem(graph, spec, rng, instance_id="problem-00000", seed=0):
    names = _assign_names(graph.node_count, spec.alphabet, rng)
    root_value = rng.randint(*spec.root_range)

    canonical = [DependencyRule.literal(names[graph.root], root_value)]
    for path in graph.branches:
        previous = graph.root
        for node in path:
            canonical.append(DependencyRule.affine(names[node], names[previous], rng.randint(*spec.offset_range)))
            previous = node

    order = list(range(len(canonical)))
    rng.shuffle(order)
    rules = tuple(canonical[i] for i in order)
    template_id = rng.choice(list(spec.templates))

    target = names[graph.target]
    answer = oracle.solve_chain(rules, target)
    path = oracle.trace_path(rules, target)
    expected = root_value + sum(r.offset for r in rules if r.defined in path[1:])
    if answer != expected:
        raise ValidationError(f"Oracle disagreement on {instance_id}: {answer} != {expected}")

    return ProblemInstance(
        id=instance_id,
        rules=rules,
        root=names[graph.root],
        root_value=root_value,
        target=target,
        answer=answer,
        correct_branch=oracle.branch_of(rules, target),
        template_id=template_id,
        seed=seed,
        permutation_id=permutation_rank(_canonical_order(rules)),
    )


def render_prompt(instance, template_id=None):
    template_id = template_id or instance.template_id
    template = TEMPLATES.get(template_id)
    if template is None:
        logger.error(f"Unknown template id: {template_id}")
        raise ValidationError(f"Unknown template {template_id!r}")
    if not instance.rules:
        raise ValidationError(f"Instance {instance.id} has no rules")

    rules = template.rule_separator.join(
        template.rule_wrap.format(rule=oracle.format_rule(r)) for r in instance.rules
    )
    query = template.query.format(root=instance.root, root_value=instance.root_value, target=instance.target)
    return template.head + rules + query + template.response_marker


@dataclass(frozen=True)
class ParsedPrompt:
    template_id: str
    rules: tuple
    root: str
    root_value: int
    target: str
    response_prefix: str
    full_text: str

    @property
    def problem_text(self):
        """The prompt without any forced response text."""
        return self.full_text[: len(self.full_text) - len(self.response_prefix)]


def parse_prompt(text):
    """Recover rules, root and target from a rendered prompt plus any response prefix."""
    for template in TEMPLATES.values():
        match = template.pattern.match(text)
        if not match:
            continue
        parts = [p for p in match.group("rules").split(template.rule_separator.strip()) if p.strip()]
        try:
            rules = tuple(oracle.parse_rule(p.strip()) for p in parts)
        except ValidationError as e:
            raise PromptParseError(f"Rule list does not parse under template {template.id!r}: {e}") from e
        if not rules:
            raise PromptParseError("Prompt lists no rules")
        root = oracle.find_root(rules)
        groups = match.groupdict()
        if groups.get("root") is not None and (
            groups["root"] != root.defined or int(groups["root_value"]) != root.offset
        ):
            raise PromptParseError("Root assignment in the query contradicts the rule list")
        return ParsedPrompt(
            template_id=template.id,
            rules=rules,
            root=root.defined,
            root_value=root.offset,
            target=groups["target"],
            response_prefix=groups["response"],
            full_text=text,
        )
    raise PromptParseError("Prompt does not match any registered task template")


def _path_rules(instance):
    by_name = {r.defined: r for r in instance.rules}
    return [by_name[name] for name in oracle.trace_path(instance.rules, instance.target)]


def render_solution(instance, direction):
    if direction not in DIRECTIONS:
        raise ValidationError(f"Unknown direction {direction!r}")
    path = _path_rules(instance)
    target = instance.target
    steps = []

    if direction == "forward":
        value = path[0].offset
        for i, rule in enumerate(path[1:], start=1):
            value += rule.offset
            line = f"{i}. ${rule.defined} = {rule.source} + {rule.offset} = {value}$"
            steps.append(TraceStep(rule.defined, value, line))
        body = "\n".join(step.line for step in steps)
        text = f"{FORWARD_PREAMBLE}\n{body}\nThus, ${target} = \\boxed{{{value}}}$."
    else:
        coefficient = path[-1].offset
        for i, rule in enumerate(reversed(path[:-1]), start=1):
            if rule.is_literal:
                value = rule.offset + coefficient
                line = (
                    f"{i}. Substitute ${rule.defined} = {rule.offset}$ into the target expression, "
                    f"yielding ${target} = {value}$."
                )
                steps.append(TraceStep(rule.defined, value, line))
            else:
                coefficient += rule.offset
                line = (
                    f"{i}. Substitute ${rule.defined} = {rule.source} + {rule.offset}$ into the target "
                    f"expression, yielding ${target} = {rule.source} + {coefficient}$."
                )
                steps.append(TraceStep(rule.defined, coefficient, line))
        body = "\n".join(step.line for step in steps)
        text = f"{FORWARD_PREAMBLE}\n{body}\n\nThus, ${target} = \\boxed{{{value}}}$."

    if value != instance.answer:
        raise ValidationError(f"Rendered trace for {instance.id} ends at {value}, expected {instance.answer}")
    return SolutionTrace(direction=direction, steps=tuple(steps), final_answer=value, text=text)


def render_code_solution(instance):
    path = _path_rules(instance)
    steps = []
    value = 0
    for rule in path:
        if rule.is_literal:
            value = rule.offset
            steps.append(TraceStep(rule.defined, value, f"{rule.defined} = {rule.offset}"))
        else:
            value += rule.offset
            steps.append(TraceStep(rule.defined, value, f"{rule.defined} = {rule.source} + {rule.offset}"))
    program = "\n".join(step.line for step in steps) + f"\nprint({instance.target})"
    text = (
        f"```python\n{program}\n```\n"
        f"The program prints {value}.\n"
        f"Thus, ${instance.target} = \\boxed{{{value}}}$."
    )
    return SolutionTrace(direction="code", steps=tuple(steps), final_answer=value, text=text)


def permute_rules(instance, permutation):
    n = len(instance.rules)
    if sorted(permutation) != list(range(n)):
        logger.error(f"Permutation {permutation} is not a bijection over {n} rules")
        raise ValidationError(f"Permutation must be a bijection over 0..{n - 1}")
    rules = tuple(instance.rules[i] for i in permutation)
    permuted = replace(instance, rules=rules, permutation_id=permutation_rank(_canonical_order(rules)))
    if oracle.solve_chain(rules, permuted.target) != instance.answer:
        raise ValidationError(f"Permutation changed the answer of {instance.id}")
    return permuted


def random_permutation(n, rng):
    order = list(range(n))
    rng.shuffle(order)
    return order


def _make_instance(spec, split, index):
    seed = _derive_seed(spec.seed, split, index)
    rng = random.Random(seed)
    graph = generate_star_graph(spec.branches, spec.path_len, rng)
    return instantiate_problem(graph, spec, rng, instance_id=generate_id(split, spec.seed, index), seed=seed)


def build_dataset(spec):
    spec.validate()
    logger.info(
        f"Starting dataset build: {spec.train_size} train / {spec.test_size} test, "
        f"branches={spec.branches}, path_len={spec.path_len} ....."
    )
    train = []
    for index in range(spec.train_size):
        instance = _make_instance(spec, "train", index)
        train.append(TrainRow(instance, render_solution(instance, spec.direction)))
    test = [_make_instance(spec, "test", index) for index in range(spec.test_size)]
    logger.info("Dataset build was completed.")
    return train, test


def instance_to_record(instance):
    return {
        "id": instance.id,
        "prompt": instance.prompt,
        "rules": [oracle.format_rule(r) for r in instance.rules],
        "root": instance.root,
        "root_value": instance.root_value,
        "target": instance.target,
        "answer": instance.answer,
        "correct_branch": instance.correct_branch,
        "template_id": instance.template_id,
        "seed": instance.seed,
        "permutation_id": instance.permutation_id,
    }


def train_row_to_record(row):
    record = instance_to_record(row.instance)
    record["solution_text"] = row.solution.text
    record["direction"] = row.solution.direction
    return record


def instance_from_record(record):
    rules = tuple(oracle.parse_rule(r) for r in record["rules"])
    return ProblemInstance(
        id=record["id"],
        rules=rules,
        root=record["root"],
        root_value=int(record["root_value"]),
        target=record["target"],
        answer=int(record["answer"]),
        correct_branch=int(record["correct_branch"]),
        template_id=record["template_id"],
        seed=int(record["seed"]),
        permutation_id=record.get("permutation_id"),
    )


def write_dataset(out_dir, train_rows, test_instances, meta=None):
    paths = {}
    if train_rows:
        paths["train"] = os.path.join(out_dir, "train.jsonl")
        write_jsonl((train_row_to_record(r) for r in train_rows), paths["train"], meta=meta)
    if test_instances:
        paths["instances"] = os.path.join(out_dir, "instances.jsonl")
        write_jsonl((instance_to_record(i) for i in test_instances), paths["instances"], meta=meta)
    return paths


def load_instances(path):
    return [instance_from_record(record) for record in read_jsonl(path)]


def build_mode_mix(solutions_by_problem, mix):
    mix.validate()
    problem_ids = sorted(solutions_by_problem)
    rows = []

    if mix.structure == "problem_level":
        for pid in problem_ids:
            traces = solutions_by_problem[pid]
            for mode in MODES:
                if traces.get(mode) is None:
                    logger.error(f"Problem {pid} has no {mode} solution")
                    raise ValidationError(f"Problem {pid} is missing a {mode} solution for a problem-level mix")
                rows.append(MixRow(pid, mode, traces[mode].text))
        return rows

    # data_level: one mode per problem, global code count rounded toward code
    n_code = math.ceil(round(mix.mode_ratio * len(problem_ids), 9))
    only_code = [p for p in problem_ids if solutions_by_problem[p].get("nl") is None]
    only_nl = [p for p in problem_ids if solutions_by_problem[p].get("code") is None]
    for pid in only_code:
        if pid in only_nl:
            raise ValidationError(f"Problem {pid} has no solution in any mode")
    free = [p for p in problem_ids if p not in only_code and p not in only_nl]

    need = n_code - len(only_code)
    if need < 0 or need > len(free):
        logger.warning(f"Mode availability forces the code count away from {n_code}")
        need = min(max(need, 0), len(free))
    rng = random.Random(mix.seed)
    code_ids = set(only_code) | set(rng.sample(free, need))

    for pid in problem_ids:
        mode = "code" if pid in code_ids else "nl"
        rows.append(MixRow(pid, mode, solutions_by_problem[pid][mode].text))
    return rows


def write_mix(path, rows, prompts, meta=None):
    records = (
        {"problem_id": r.problem_id, "prompt": prompts[r.problem_id], "mode": r.mode, "solution_text": r.solution_text}
        for r in rows
    )
    return write_jsonl(records, path, meta=meta)


def base_addition_item(a_digits, b_digits, base, item_id=None):
    digits = oracle.DIGITS[:base]
    question = (
        f"You are a mathematician. Assuming that all numbers are in base-{base} where the digits are "
        f"\"{digits}\", what is {a_digits} + {b_digits}?\n\n"
        "Let’s think step by step, and end the response with the result in \\boxed{}."
    )
    gold = oracle.base_add(a_digits, b_digits, base)
    return QAItem(
        id=item_id or f"base{base}-{a_digits}-{b_digits}",
        question=question,
        answer=gold,
        meta={"base": base, "operands": [a_digits, b_digits]},
    )


def _random_operand(base, digit_len, rng):
    digits = oracle.DIGITS[:base]
    if digit_len == 1:
        return rng.choice(digits)
    return rng.choice(digits[1:]) + "".join(rng.choice(digits) for _ in range(digit_len - 1))


def gen_base_addition(base, digit_len, rng, item_id=None):
    if not isinstance(base, int) or not 2 <= base <= 16:
        raise ValidationError(f"Base must be an integer in 2..16, got {base!r}")
    if digit_len < 1:
        raise ValidationError(f"digit_len must be positive, got {digit_len}")
    a = _random_operand(base, digit_len, rng)
    b = _random_operand(base, digit_len, rng)
    return base_addition_item(a, b, base, item_id=item_id)


def gen_base_addition_items(base, digit_len, count, seed):
    rng = random.Random(_derive_seed("base", base, digit_len, seed))
    return [gen_base_addition(base, digit_len, rng, item_id=f"base{base}-{i:04d}") for i in range(count)]


def load_qa_file(path):
    items = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    logger.error(f"Malformed QA record in {path} at line {line_no}")
                    raise RecordError(path, line_no, f"malformed JSON ({e.msg})") from e
                if not isinstance(record, dict):
                    raise RecordError(path, line_no, "record is not an object")
                for key in ("question", "answer"):
                    if key not in record:
                        logger.error(f"QA record in {path} at line {line_no} has no '{key}' field")
                        raise RecordError(path, line_no, f"missing '{key}' field")
                items.append(QAItem(id=f"qa-{line_no:05d}", question=str(record["question"]), answer=str(record["answer"])))
    except FileNotFoundError as e:
        raise ArtifactIOError(path, "file not found") from e
    logger.info(f"{len(items)} QA items were loaded from {path}")
    return items


def eval_items_from_instances(instances):
    return [EvalItem(inst.id, inst.prompt, str(inst.answer)) for inst in instances]


def eval_items_from_qa(items):
    return [EvalItem(item.id, item.question, item.answer) for item in items]
