"""Prefix-syntax rewrite patterns and rule-file parsing.

A rule line looks like::

    dist2: add(A, mul(A, B)) => mul(A, add(B, 1))
    comm2: reducesum(bitshift(A, S)) => bitshift(reducesum(A), S) if scalar_const(S), shift_left

Uppercase identifiers are pattern variables, lowercase identifiers are
operator kinds (case-insensitive), numbers are scalar constants.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .. import ops
from ..errors import GraphError

CATEGORIES = {"assoc": "Associative", "dist": "Distributive", "comm": "Commutative"}
COMMUTATIVE_BINARY = frozenset({"Add", "Mul"})


@dataclass(frozen=True)
class PVar:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class PConst:
    value: float

    def __str__(self) -> str:
        return f"{self.value:g}"


@dataclass(frozen=True)
class POp:
    kind: str
    args: tuple["Pattern", ...]

    def __str__(self) -> str:
        return f"{self.kind.lower()}({', '.join(str(a) for a in self.args)})"


Pattern = Union[PVar, PConst, POp]


def variables(p: Pattern) -> list[str]:
    """Pattern variables in order of first appearance."""
    out: dict[str, None] = {}

    def walk(q):
        if isinstance(q, PVar):
            out.setdefault(q.name)
        elif isinstance(q, POp):
            for a in q.args:
                walk(a)
    walk(p)
    return list(out)


def op_nodes(p: Pattern) -> list[POp]:
    """Operator nodes in pre-order."""
    if not isinstance(p, POp):
        return []
    return [p] + [n for a in p.args for n in op_nodes(a)]


def rename(p: Pattern, mapping: dict[str, str]) -> Pattern:
    if isinstance(p, PVar):
        return PVar(mapping[p.name])
    if isinstance(p, POp):
        return POp(p.kind, tuple(rename(a, mapping) for a in p.args))
    return p


def canonical(p: Pattern) -> str:
    """Structure string with variables renamed by first appearance."""
    names = {v: f"V{i}" for i, v in enumerate(variables(p))}
    return str(rename(p, names))


def mirrors(p: Pattern) -> list[Pattern]:
    """All operand orderings of commutative binary nodes, deduplicated up to variable renaming."""
    if not isinstance(p, POp):
        return [p]
    choices = [mirrors(a) for a in p.args]
    out = []
    for args in itertools.product(*choices):
        out.append(POp(p.kind, tuple(args)))
        if p.kind in COMMUTATIVE_BINARY and len(args) == 2:
            out.append(POp(p.kind, (args[1], args[0])))
    seen: dict[str, Pattern] = {}
    for q in out:
        seen.setdefault(canonical(q), q)
    return list(seen.values())


@dataclass(frozen=True)
class RewriteRule:
    name: str
    category: str
    lhs: Pattern
    rhs: Pattern
    guards: tuple[tuple[str, tuple[str, ...]], ...] = ()
    variants: tuple[Pattern, ...] = field(default=(), compare=False)

    def __str__(self) -> str:
        text = f"{self.name}: {self.lhs} => {self.rhs}"
        if self.guards:
            text += " if " + ", ".join(f"{g}({', '.join(a)})" if a else g for g, a in self.guards)
        return text

    def flop_delta(self, var_shapes: dict[str, tuple[int, ...]], attrs: dict[str, dict] | None = None) -> tuple[int, int]:
        """(before, after) FLOPs when the variables have the given shapes.

        The lhs is costed per occurrence, the rhs with shared subterms once.
        ``attrs`` maps an operator kind to its attributes (axes, direction...).
        """
        attrs = attrs or {}
        before = _pattern_flops(self.lhs, var_shapes, attrs, shared=False)
        after = _pattern_flops(self.rhs, var_shapes, attrs, shared=True)
        return before, after


def _pattern_flops(p: Pattern, var_shapes, attrs, shared: bool) -> int:
    seen: set[str] = set()
    total = 0

    def walk(q) -> tuple[int, ...]:
        nonlocal total
        if isinstance(q, PVar):
            return tuple(var_shapes[q.name])
        if isinstance(q, PConst):
            return ()
        in_shapes = [walk(a) for a in q.args]
        a = attrs.get(q.kind, {})
        out = ops.infer_op_shapes(q.kind, a, in_shapes, 1)
        key = str(q)
        if not (shared and key in seen):
            total += ops.op_flops(q.kind, a, in_shapes, out)
            seen.add(key)
        return out[0]

    walk(p)
    return total


_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)|([A-Za-z_][A-Za-z0-9_]*)|(.))")


def _tokens(text: str) -> list[str]:
    out = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        tok = m.group(1) or m.group(2) or m.group(3)
        if tok is not None:
            out.append(tok)
        pos = m.end()
    return out


_KINDS_BY_LOWER = {k.lower(): k for k in ops.REGISTRY}
_KINDS_BY_LOWER.update({k.lower(): v for k, v in ops.ALIASES.items()})


def parse_pattern(text: str) -> Pattern:
    toks = _tokens(text)
    pos = 0

    def expr() -> Pattern:
        nonlocal pos
        if pos >= len(toks):
            raise GraphError(f"unexpected end of pattern {text!r}")
        tok = toks[pos]
        pos += 1
        if re.fullmatch(r"\d.*", tok):
            return PConst(float(tok))
        if not re.fullmatch(r"[A-Za-z_]\w*", tok):
            raise GraphError(f"unexpected {tok!r} in pattern {text!r}")
        if pos < len(toks) and toks[pos] == "(":
            pos += 1
            kind = _KINDS_BY_LOWER.get(tok.lower())
            if kind is None:
                raise GraphError(f"unknown operator {tok!r} in pattern {text!r}")
            args = [expr()]
            while toks[pos] == ",":
                pos += 1
                args.append(expr())
            if toks[pos] != ")":
                raise GraphError(f"expected ')' in pattern {text!r}")
            pos += 1
            lo, hi = ops.REGISTRY[kind].inputs
            if not lo <= len(args) <= hi:
                raise GraphError(f"{kind} takes {lo}..{hi} operands in pattern {text!r}")
            return POp(kind, tuple(args))
        if not tok[0].isupper():
            raise GraphError(f"pattern variables must start uppercase, got {tok!r}")
        return PVar(tok)

    try:
        p = expr()
    except IndexError:
        raise GraphError(f"unbalanced pattern {text!r}") from None
    if pos != len(toks):
        raise GraphError(f"trailing input {toks[pos:]} in pattern {text!r}")
    return p


def _parse_guards(text: str) -> tuple[tuple[str, tuple[str, ...]], ...]:
    guards = []
    for m in re.finditer(r"([a-z_]\w*)\s*(?:\(([^)]*)\))?", text):
        args = tuple(a.strip() for a in (m.group(2) or "").split(",") if a.strip())
        guards.append((m.group(1), args))
    return tuple(guards)


def parse_rule(line: str) -> RewriteRule:
    head, sep, body = line.partition(":")
    if not sep or "=>" not in body:
        raise GraphError(f"rule must look like 'name: lhs => rhs', got {line!r}")
    name = head.strip()
    category = None
    if "@" in name:
        name, category = (s.strip() for s in name.split("@", 1))
    else:
        category = next((c for prefix, c in CATEGORIES.items() if name.startswith(prefix)), None)
    if category not in CATEGORIES.values():
        raise GraphError(f"rule {name!r}: cannot infer category, write 'name@Associative: ...'")
    lhs_text, rhs_text = body.split("=>", 1)
    rhs_text, _, guard_text = rhs_text.partition(" if ")
    lhs, rhs = parse_pattern(lhs_text), parse_pattern(rhs_text)
    if not isinstance(lhs, POp):
        raise GraphError(f"rule {name!r}: lhs must be an operator pattern")
    lv, rv = set(variables(lhs)), set(variables(rhs))
    if lv != rv:
        raise GraphError(f"rule {name!r}: lhs variables {sorted(lv)} differ from rhs variables {sorted(rv)}")
    guards = _parse_guards(guard_text)
    for g, args in guards:
        if g not in GUARD_NAMES:
            raise GraphError(f"rule {name!r}: unknown guard {g!r}")
        for a in args:
            if a not in lv:
                raise GraphError(f"rule {name!r}: guard {g} uses unbound variable {a!r}")
    return RewriteRule(name, category, lhs, rhs, guards, tuple(mirrors(lhs)))


GUARD_NAMES = frozenset({"scalar_const", "shift_left"})


def parse_rules(text: str) -> list[RewriteRule]:
    rules = []
    names = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rule = parse_rule(line)
        except GraphError as exc:
            raise GraphError(str(exc), line=lineno) from None
        if rule.name in names:
            raise GraphError(f"duplicate rule name {rule.name!r}", line=lineno)
        names.add(rule.name)
        rules.append(rule)
    return rules


BUILTIN_RULES_PATH = Path(__file__).with_name("builtin.rules")


def load_rules(path: str | Path | None = None) -> list[RewriteRule]:
    return parse_rules(Path(path or BUILTIN_RULES_PATH).read_text())
