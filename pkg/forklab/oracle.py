"""Ground truth for dependency-chain problems and answer grading.

Everything here is a pure function of its arguments. The rule codec
(`parse_rule` / `format_rule`) is shared by prompt rendering, record
persistence and the simulated backend's prompt parser, so a rule always
has exactly one textual form: ``v = u + 7`` or ``v = 3``.
"""

import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from forklab.config import FORKLAB_LOGS_PATH, setup_logging
from forklab.errors import (
    CycleDetected,
    UndefinedVariable,
    UnreachableTarget,
    ValidationError,
)

logger = setup_logging(FORKLAB_LOGS_PATH, __name__)

DIGITS = "0123456789ABCDEF"

_RULE_RE = re.compile(
    r"^\s*\$?\s*([A-Za-z][A-Za-z0-9_]*)\s*=\s*"
    r"(?:([A-Za-z][A-Za-z0-9_]*)\s*\+\s*(\d+)|([+-]?\d+))\s*\$?\s*$"
)
_INT_RE = re.compile(r"^[+-]?\d+$")
_BOXED_RE = re.compile(r"\\boxed\s*\{")


@dataclass(frozen=True)
class DependencyRule:
    """``defined = source + offset``, or the root literal ``defined = offset`` when source is None."""

    defined: str
    source: Optional[str]
    offset: int

    @property
    def is_literal(self):
        return self.source is None

    @classmethod
    def literal(cls, defined, value):
        return cls(defined, None, int(value))

    @classmethod
    def affine(cls, defined, source, offset):
        if offset < 1:
            raise ValidationError(f"Offset must be a positive integer, got {offset}")
        return cls(defined, source, int(offset))


class GradeReason(str, Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    NO_ANSWER_FOUND = "no_answer_found"
    PARSE_FAILURE = "parse_failure"


@dataclass(frozen=True)
class GradeResult:
    correct: bool
    extracted: Optional[str]
    reason: GradeReason


def format_rule(rule):
    if rule.is_literal:
        return f"{rule.defined} = {rule.offset}"
    return f"{rule.defined} = {rule.source} + {rule.offset}"


def parse_rule(text):
    match = _RULE_RE.match(text)
    if not match:
        raise ValidationError(f"Cannot parse rule: {text!r}")
    defined, source, offset, literal = match.groups()
    if source is not None:
        return DependencyRule.affine(defined, source, int(offset))
    return DependencyRule.literal(defined, int(literal))


def _index(rules):
    by_name = {}
    for rule in rules:
        if rule.defined in by_name:
            logger.error(f"Variable '{rule.defined}' is defined twice")
            raise ValidationError(f"Variable '{rule.defined}' is defined more than once")
        by_name[rule.defined] = rule
    return by_name


def _walk_to_root(by_name, target):
    """Rules from target back to its literal, target first."""
    if target not in by_name:
        used = any(r.source == target for r in by_name.values())
        raise UndefinedVariable(target) if used else UnreachableTarget(target)

    chain = []
    visited = set()
    current = target
    while True:
        if current in visited:
            raise CycleDetected(current)
        visited.add(current)
        rule = by_name.get(current)
        if rule is None:
            raise UndefinedVariable(current)
        chain.append(rule)
        if rule.is_literal:
            return chain
        current = rule.source


def solve_chain(rules, target):
    chain = _walk_to_root(_index(rules), target)
    return sum(rule.offset for rule in chain)


def trace_path(rules, target):
    chain = _walk_to_root(_index(rules), target)
    return [rule.defined for rule in reversed(chain)]


def find_root(rules):
    literals = [r for r in rules if r.is_literal]
    if len(literals) != 1:
        raise ValidationError(f"Expected exactly one literal rule, found {len(literals)}")
    return literals[0]


def list_branches(rules):
    """Root-to-leaf paths (root excluded), ordered by branch-head name.

    This order is the canonical branch index used by instances, policies and probes.
    """
    by_name = _index(rules)
    root = find_root(rules)
    children = {}
    for rule in rules:
        if not rule.is_literal:
            if rule.source not in by_name:
                raise UndefinedVariable(rule.source)
            children.setdefault(rule.source, []).append(rule.defined)

    branches = []
    for head in sorted(children.get(root.defined, [])):
        path = [head]
        while children.get(path[-1]):
            nxt = children[path[-1]]
            if len(nxt) > 1:
                raise ValidationError(f"Variable '{path[-1]}' forks off the root; not a path-star graph")
            if nxt[0] in path:
                raise CycleDetected(nxt[0])
            path.append(nxt[0])
        branches.append(path)
    return branches


def branch_of(rules, target):
    path = trace_path(rules, target)
    if len(path) < 2:
        raise ValidationError("The root variable does not belong to any branch")
    heads = [branch[0] for branch in list_branches(rules)]
    return heads.index(path[1])


# Content of the last \boxed{...}, scanning braces; None when absent or unbalanced
def extract_boxed(text):
    matches = list(_BOXED_RE.finditer(text or ""))
    if not matches:
        return None
    start = matches[-1].end()
    depth = 1
    pos = start
    while pos < len(text) and depth > 0:
        if text[pos] == "{":
            depth += 1
        elif text[pos] == "}":
            depth -= 1
        pos += 1
    if depth != 0:
        return None
    return text[start:pos - 1].strip()


def normalize_answer(answer):
    value = answer.strip()
    while len(value) >= 2 and value.startswith("$") and value.endswith("$"):
        value = value[1:-1].strip()
    value = value.replace(",", "").replace(" ", "")
    if _INT_RE.match(value):
        return str(int(value))
    return value


def grade_answer(text, gold):
    boxed = extract_boxed(text)
    if boxed is None:
        reason = GradeReason.PARSE_FAILURE if _BOXED_RE.search(text or "") else GradeReason.NO_ANSWER_FOUND
        return GradeResult(False, None, reason)

    predicted = normalize_answer(boxed)
    expected = normalize_answer(str(gold))
    if not predicted:
        return GradeResult(False, predicted, GradeReason.PARSE_FAILURE)

    if _INT_RE.match(expected):
        if not _INT_RE.match(predicted):
            return GradeResult(False, predicted, GradeReason.PARSE_FAILURE)
        correct = int(predicted) == int(expected)
    else:
        correct = predicted.casefold() == expected.casefold()
    return GradeResult(correct, predicted, GradeReason.MATCH if correct else GradeReason.MISMATCH)


def _check_base(base):
    if not isinstance(base, int) or not 2 <= base <= 16:
        raise ValidationError(f"Base must be an integer in 2..16, got {base!r}")


def _digit_values(digits, base):
    if not digits:
        raise ValidationError("Empty digit string")
    values = []
    for ch in digits.upper():
        pos = DIGITS.find(ch)
        if pos < 0 or pos >= base:
            raise ValidationError(f"Invalid digit {ch!r} for base {base}")
        values.append(pos)
    return values


def parse_base(digits, base):
    _check_base(base)
    value = 0
    for d in _digit_values(digits, base):
        value = value * base + d
    return value


def base_add(a_digits, b_digits, base):
    _check_base(base)
    a = _digit_values(a_digits, base)[::-1]
    b = _digit_values(b_digits, base)[::-1]

    out = []
    carry = 0
    for i in range(max(len(a), len(b))):
        total = (a[i] if i < len(a) else 0) + (b[i] if i < len(b) else 0) + carry
        out.append(total % base)
        carry = total // base
    if carry:
        out.append(carry)

    result = "".join(DIGITS[d] for d in reversed(out)).lstrip("0")
    return result or "0"
