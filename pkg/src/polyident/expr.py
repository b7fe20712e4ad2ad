"""Typed expression trees over the matrix-operation grammar.

Shapes are pairs of symbolic dims drawn from ``{"n", "m", "p", "1"}``.  Trees
are immutable; every node carries its shape, its degree (number of variable
leaves) and its canonical, fully parenthesized Matlab-style string.

Summation follows Matlab semantics: ``sum(X, 1)`` collapses the rows of X to a
row vector, ``sum(X, 2)`` collapses the columns to a column vector.
"""

from __future__ import annotations

import enum
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Protocol, Sequence

DIMS = ("n", "m", "p", "1")

Shape = tuple[str, str]
SCALAR: Shape = ("1", "1")


class Rule(str, enum.Enum):
    MATMUL = "MatMul"
    ELEMMUL = "ElemMul"
    MATVECMUL = "MatVecMul"
    TRANSPOSE = "Transpose"
    COLSUM = "ColSum"
    ROWSUM = "RowSum"
    COLREPEAT = "ColRepeat"
    ROWREPEAT = "RowRepeat"
    ELEMREPEAT = "ElemRepeat"
    VARIABLE = "Variable"

    @property
    def arity(self) -> int:
        if self is Rule.VARIABLE:
            return 0
        if self in (Rule.MATMUL, Rule.ELEMMUL, Rule.MATVECMUL):
            return 2
        return 1


UNARY_RULES = (Rule.TRANSPOSE, Rule.COLSUM, Rule.ROWSUM,
               Rule.COLREPEAT, Rule.ROWREPEAT, Rule.ELEMREPEAT)
BINARY_RULES = (Rule.MATMUL, Rule.ELEMMUL, Rule.MATVECMUL)
REPEAT_RULES = (Rule.COLREPEAT, Rule.ROWREPEAT, Rule.ELEMREPEAT)


class GrammarError(ValueError):
    """Raised when an expression cannot be built or parsed."""


class EnumerationLimitError(RuntimeError):
    """Raised when enumeration exceeds its configured size bound."""


def check_shape(shape: Shape) -> Shape:
    if len(shape) != 2 or any(d not in DIMS for d in shape):
        raise GrammarError(f"bad shape {shape!r}")
    return (shape[0], shape[1])


# --- monomials ------------------------------------------------------------

Monomial = tuple[str, ...]  # sorted non-unit dim symbols, () is constant


def monomial(*dims: str) -> Monomial:
    return tuple(sorted(d for d in dims if d != "1"))


def monomial_str(mono: Monomial) -> str:
    return "".join(mono) if mono else "1"


def _mono_key(mono: Monomial):
    return (len(mono), mono)


# --- shape inference ------------------------------------------------------

def product_rule(x: Shape, y: Shape) -> Rule | None:
    """Classify ``x * y``: MatMul when all three dims are non-unit."""
    if x[1] != y[0]:
        return None
    if "1" not in (x[0], x[1], y[1]):
        return Rule.MATMUL
    return Rule.MATVECMUL


def infer_shape(rule: Rule, child_shapes: Sequence[Shape],
                target: Shape | None = None) -> Shape | None:
    """Output shape of ``rule`` applied to ``child_shapes``; None on rejection.

    ``target`` is the repmat output shape for the three repeat rules.
    """
    rule = Rule(rule)
    if len(child_shapes) != rule.arity:
        return None
    if rule is Rule.VARIABLE:
        return target
    if rule.arity == 2:
        x, y = child_shapes
        if rule is Rule.ELEMMUL:
            return x if x == y else None
        if product_rule(x, y) is not rule:
            return None
        return (x[0], y[1])
    (x,) = child_shapes
    r, c = x
    if rule is Rule.TRANSPOSE:
        return (c, r)
    if rule is Rule.COLSUM:
        return ("1", c)
    if rule is Rule.ROWSUM:
        return (r, "1")
    if target is None:
        return None
    tr, tc = target
    if rule is Rule.COLREPEAT:
        ok = c == "1" and r != "1" and tr == r and tc != "1"
    elif rule is Rule.ROWREPEAT:
        ok = r == "1" and c != "1" and tc == c and tr != "1"
    else:
        ok = x == SCALAR and tr != "1" and tc != "1"
    return target if ok else None


def node_complexity(rule: Rule, child_shapes: Sequence[Shape], shape: Shape) -> Monomial:
    if rule is Rule.VARIABLE:
        return ()
    if rule in (Rule.MATMUL, Rule.MATVECMUL):
        x, y = child_shapes
        return monomial(x[0], x[1], y[1])
    if rule in REPEAT_RULES:
        return monomial(*shape)
    return monomial(*child_shapes[0])


# --- expressions ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Expr:
    rule: Rule
    children: tuple["Expr", ...]
    shape: Shape
    degree: int
    name: str | None = None          # variable name for leaves
    target: Shape | None = None      # repmat output shape
    _string: str = field(default="", repr=False)
    _complexity: Monomial = field(default=(), repr=False)
    _counts: tuple = field(default=(), repr=False)

    def __str__(self) -> str:
        return self._string

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and self._string == other._string and self.shape == other.shape

    def __hash__(self) -> int:
        return hash(self._string)

    @property
    def canonical_string(self) -> str:
        return self._string

    @property
    def complexity(self) -> Monomial:
        return self._complexity

    @property
    def leaf_counts(self) -> dict[str, int]:
        return dict(self._counts)

    @property
    def is_scalar(self) -> bool:
        return self.shape == SCALAR

    def nodes(self) -> Iterator["Expr"]:
        """Post-order traversal."""
        for c in self.children:
            yield from c.nodes()
        yield self

    def variables(self) -> set[str]:
        return set(self.leaf_counts)

    def to_json(self) -> dict:
        d = {"rule": self.rule.value,
             "children": [c.to_json() for c in self.children],
             "shape": list(self.shape),
             "degree": self.degree}
        if self.name is not None:
            d["name"] = self.name
        if self.target is not None:
            d["target"] = list(self.target)
        return d


def _render(rule: Rule, children: Sequence[Expr], name, target) -> str:
    if rule is Rule.VARIABLE:
        return name
    s = [str(c) for c in children]
    if rule is Rule.TRANSPOSE:
        body = f"{s[0]}'"
    elif rule is Rule.COLSUM:
        body = f"sum({s[0]}, 1)"
    elif rule is Rule.ROWSUM:
        body = f"sum({s[0]}, 2)"
    elif rule is Rule.ELEMMUL:
        body = f"{s[0]} .* {s[1]}"
    elif rule in (Rule.MATMUL, Rule.MATVECMUL):
        body = f"{s[0]} * {s[1]}"
    else:
        rows = "1" if rule is Rule.COLREPEAT else target[0]
        cols = "1" if rule is Rule.ROWREPEAT else target[1]
        body = f"repmat({s[0]}, {rows}, {cols})"
    return f"({body})"


def variable(name: str, shape: Shape) -> Expr:
    if not re.fullmatch(r"[A-Za-z_]\w*", name) or name in ("sum", "repmat"):
        raise GrammarError(f"bad variable name {name!r}")
    shape = check_shape(shape)
    return Expr(Rule.VARIABLE, (), shape, 1, name=name, _string=name,
                _complexity=(), _counts=((name, 1),))


def build(rule: Rule, children: Sequence[Expr], *, target: Shape | None = None,
          max_degree: int | None = None) -> Expr | None:
    """Build a node, or return None when the shape or degree constraint fails."""
    rule = Rule(rule)
    if rule is Rule.VARIABLE:
        raise GrammarError("use variable() for leaves")
    children = tuple(children)
    shape = infer_shape(rule, [c.shape for c in children], target)
    if shape is None:
        return None
    degree = sum(c.degree for c in children)
    if max_degree is not None and degree > max_degree:
        return None
    own = node_complexity(rule, [c.shape for c in children], shape)
    comp = max([own] + [c._complexity for c in children], key=_mono_key)
    counts = Counter()
    for c in children:
        counts.update(dict(c._counts))
    return Expr(rule, children, shape, degree,
                target=target if rule in REPEAT_RULES else None,
                _string=_render(rule, children, None, target),
                _complexity=comp, _counts=tuple(sorted(counts.items())))


def _must(e: Expr | None, what: str) -> Expr:
    if e is None:
        raise GrammarError(f"invalid {what}")
    return e


def transpose(x: Expr) -> Expr:
    return _must(build(Rule.TRANSPOSE, [x]), "transpose")


def colsum(x: Expr) -> Expr:
    """Matlab ``sum(x, 1)``."""
    return _must(build(Rule.COLSUM, [x]), "sum(., 1)")


def rowsum(x: Expr) -> Expr:
    """Matlab ``sum(x, 2)``."""
    return _must(build(Rule.ROWSUM, [x]), "sum(., 2)")


def mul(x: Expr, y: Expr) -> Expr:
    rule = product_rule(x.shape, y.shape)
    if rule is None:
        raise GrammarError(f"cannot multiply {x.shape} by {y.shape}")
    return _must(build(rule, [x, y]), "product")


def emul(x: Expr, y: Expr) -> Expr:
    return _must(build(Rule.ELEMMUL, [x, y]), f"elementwise product of {x.shape} and {y.shape}")


def repeat_rule(src: Shape, target: Shape) -> Rule | None:
    for rule in REPEAT_RULES:
        if infer_shape(rule, [src], target) is not None:
            return rule
    return None


def repmat(x: Expr, target: Shape) -> Expr:
    rule = repeat_rule(x.shape, target)
    if rule is None:
        raise GrammarError(f"cannot repeat {x.shape} to {target}")
    return _must(build(rule, [x], target=target), "repmat")


def complexity_of(e: Expr) -> Monomial:
    """Largest (by total degree) per-node cost monomial in the tree."""
    return e.complexity


def from_json(d: dict) -> Expr:
    rule = Rule(d["rule"])
    if rule is Rule.VARIABLE:
        return variable(d["name"], tuple(d["shape"]))
    children = [from_json(c) for c in d["children"]]
    target = tuple(d["target"]) if "target" in d else None
    return _must(build(rule, children, target=target), rule.value)


# --- parsing --------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\.\*)|([A-Za-z_]\w*)|(\d+)|(.))")


def _tokenize(text: str) -> list[str]:
    out = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        tok = next(g for g in m.groups() if g is not None)
        out.append(tok)
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text: str, variables: dict[str, Shape]):
        self.toks = _tokenize(text)
        self.i = 0
        self.vars = variables

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expect: str | None = None) -> str:
        tok = self.peek()
        if tok is None or (expect is not None and tok != expect):
            raise GrammarError(f"expected {expect or 'token'} at {self.i}, got {tok!r}")
        self.i += 1
        return tok

    def expr(self) -> Expr:
        left = self.postfix()
        while self.peek() in ("*", ".*"):
            op = self.take()
            right = self.postfix()
            left = mul(left, right) if op == "*" else emul(left, right)
        return left

    def postfix(self) -> Expr:
        e = self.atom()
        while self.peek() == "'":
            self.take()
            e = transpose(e)
        return e

    def _dim(self) -> str:
        tok = self.take()
        if tok not in DIMS:
            raise GrammarError(f"bad repmat dimension {tok!r}")
        return tok

    def atom(self) -> Expr:
        tok = self.take()
        if tok == "(":
            e = self.expr()
            self.take(")")
            return e
        if tok == "sum":
            self.take("(")
            e = self.expr()
            if self.peek() == ",":
                self.take()
                axis = self.take()
            else:  # Matlab default: first non-singleton dimension
                axis = "1" if e.shape[0] != "1" else "2"
            self.take(")")
            if axis == "1":
                return colsum(e)
            if axis == "2":
                return rowsum(e)
            raise GrammarError(f"bad sum axis {axis!r}")
        if tok == "repmat":
            self.take("(")
            e = self.expr()
            self.take(",")
            a = self._dim()
            self.take(",")
            b = self._dim()
            self.take(")")
            r = e.shape[0] if a == "1" else a
            c = e.shape[1] if b == "1" else b
            return repmat(e, (r, c))
        if tok in self.vars:
            return variable(tok, self.vars[tok])
        raise GrammarError(f"unexpected token {tok!r}")


def parse(text: str, variables: dict[str, Shape]) -> Expr:
    """Parse Matlab-style text, e.g. ``"sum((sum(A, 1) * B)', 1)"``."""
    p = _Parser(text, {k: check_shape(tuple(v)) for k, v in variables.items()})
    e = p.expr()
    if p.peek() is not None:
        raise GrammarError(f"trailing input at token {p.i}: {p.peek()!r}")
    return e


# --- grammar configuration and enumeration --------------------------------

@dataclass(frozen=True)
class GrammarConfig:
    variables: tuple[tuple[str, Shape], ...]
    max_degree: int
    allow_matmul: bool = True
    complexity_cap: int | None = None   # max total degree of any node monomial
    rules: frozenset = frozenset(r for r in Rule if r is not Rule.VARIABLE)
    max_count: int = 2_000_000

    @property
    def cap(self) -> int:
        cap = 3 if self.complexity_cap is None else self.complexity_cap
        return min(cap, 3 if self.allow_matmul else 2)

    def dims(self) -> list[str]:
        """Non-unit dims of the variable set; repmat targets are drawn from these."""
        return sorted({d for _, s in self.variables for d in s if d != "1"})

    def repeat_targets(self, shape: Shape) -> list[tuple[Rule, Shape]]:
        dims = self.dims()
        r, c = shape
        out = []
        if c == "1" and r != "1" and Rule.COLREPEAT in self.rules:
            out += [(Rule.COLREPEAT, (r, d)) for d in dims]
        if r == "1" and c != "1" and Rule.ROWREPEAT in self.rules:
            out += [(Rule.ROWREPEAT, (d, c)) for d in dims]
        if shape == SCALAR and Rule.ELEMREPEAT in self.rules:
            out += [(Rule.ELEMREPEAT, (a, b)) for a in dims for b in dims]
        return out

    def admits(self, e: Expr | None) -> bool:
        return (e is not None and e.rule in self.rules | {Rule.VARIABLE}
                and len(e.complexity) <= self.cap)


def unary_moves(x: Expr, config: GrammarConfig, prune_noops: bool = True) -> list[Expr]:
    """All legal single-child extensions of ``x`` under ``config``.

    With ``prune_noops`` value-preserving steps are skipped: transposing a
    scalar, transposing a transpose, and summing along a singleton axis.
    """
    out = []
    r, c = x.shape
    rules = config.rules
    if Rule.TRANSPOSE in rules and not (prune_noops and (x.shape == SCALAR or x.rule is Rule.TRANSPOSE)):
        out.append(build(Rule.TRANSPOSE, [x]))
    if Rule.COLSUM in rules and not (prune_noops and r == "1"):
        out.append(build(Rule.COLSUM, [x]))
    if Rule.ROWSUM in rules and not (prune_noops and c == "1"):
        out.append(build(Rule.ROWSUM, [x]))
    for rule, target in config.repeat_targets(x.shape):
        out.append(build(rule, [x], target=target))
    return [e for e in out if config.admits(e)]


def binary_moves(x: Expr, y: Expr, config: GrammarConfig, ordered: bool = True) -> list[Expr]:
    """Legal binary combinations of ``x`` (left) and ``y`` (right).

    With ``ordered=False`` the commutative element-wise product is skipped,
    for callers that visit each unordered pair twice.
    """
    out = []
    if Rule.ELEMMUL in config.rules and x.shape == y.shape and ordered:
        out.append(build(Rule.ELEMMUL, [x, y]))
    rule = product_rule(x.shape, y.shape)
    if rule is not None and rule in config.rules:
        out.append(build(rule, [x, y]))
    return [e for e in out if config.admits(e)]


class Deduper(Protocol):
    def admit(self, e: Expr) -> bool:
        """Record ``e``; return False when it duplicates an admitted expression."""


class IdentityDeduper:
    """Structural dedup only: two trees are duplicates iff their strings match."""

    def __init__(self):
        self.seen: set[str] = set()

    def admit(self, e: Expr) -> bool:
        if e.canonical_string in self.seen:
            return False
        self.seen.add(e.canonical_string)
        return True


@dataclass
class Enumeration:
    """Per-degree class representatives plus the raw degree-k candidates."""
    config: GrammarConfig
    classes: dict[int, list[Expr]]
    candidates: list[Expr]

    def scalars(self, degree: int | None = None) -> list[Expr]:
        d = self.config.max_degree if degree is None else degree
        return [e for e in self.classes.get(d, []) if e.is_scalar]

    def count(self, degree: int | None = None, scalar_only: bool = True) -> int:
        d = self.config.max_degree if degree is None else degree
        if scalar_only:
            return len(self.scalars(d))
        return len(self.classes.get(d, []))


def enumerate_classes(config: GrammarConfig, dedup: Deduper,
                      keep_candidates: Callable[[Expr], bool] | None = None,
                      max_unary_chain: int = 4) -> Enumeration:
    """Bottom-up enumeration by degree with deduplication at every level.

    Degree-d expressions are binary combinations of admitted lower-degree
    expressions followed by a unary closure.  Under structural dedup the
    closure is cut at ``max_unary_chain`` steps, since repeat/sum cycles
    never terminate on their own.  ``keep_candidates`` selects degree-k trees
    to return even when they duplicate an admitted one.
    """
    if config.max_degree < 1:
        raise ValueError("max_degree must be >= 1")
    classes: dict[int, list[Expr]] = {}
    candidates: list[Expr] = []
    total = 0
    k = config.max_degree
    for d in range(1, k + 1):
        cur: list[Expr] = []

        def offer(e: Expr | None) -> bool:
            nonlocal total
            if e is None:
                return False
            if d == k and keep_candidates is not None and keep_candidates(e):
                candidates.append(e)
            if not dedup.admit(e):
                return False
            cur.append(e)
            total += 1
            if total > config.max_count:
                raise EnumerationLimitError(
                    f"more than {config.max_count} expressions at degree {d}")
            return True

        if d == 1:
            for name, shape in config.variables:
                offer(variable(name, shape))
        for d1 in range(1, d):
            for x in classes[d1]:
                for y in classes[d - d1]:
                    for e in binary_moves(x, y, config):
                        offer(e)
        frontier = list(cur)
        steps = 0
        structural = isinstance(dedup, IdentityDeduper)
        while frontier and not (structural and steps >= max_unary_chain):
            nxt = []
            for x in frontier:
                for e in unary_moves(x, config, prune_noops=False):
                    if offer(e):
                        nxt.append(e)
            frontier = nxt
            steps += 1
        classes[d] = cur
    return Enumeration(config, classes, candidates)


def enumerate_exprs(config: GrammarConfig, dedup: Deduper) -> list[Expr]:
    """All scalar expressions of degree exactly ``config.max_degree``."""
    return enumerate_classes(config, dedup).scalars()


def dumps(e: Expr) -> str:
    return json.dumps(e.to_json())


def loads(s: str) -> Expr:
    return from_json(json.loads(s))


def count_rules(exprs: Iterable[Expr]) -> Counter:
    return Counter(node.rule for e in exprs for node in e.nodes())
