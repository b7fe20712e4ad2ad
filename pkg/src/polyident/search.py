"""Scheduler, search strategies and the curriculum loop.

A search state is a forest of partial expressions that starts with one leaf
per required variable occurrence.  Each step applies one grammar rule to one
or two branches; a tree is complete when a single scalar branch remains.
Completed trees go into a modular basis, and the run stops as soon as the
target descriptor falls inside the span.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .expr import Expr, GrammarConfig, Rule, variable, binary_moves, unary_moves
from .families import TargetSpec
from .fingerprint import (DEFAULT_COPIES, DEFAULT_PRIME, EvalContext, Descriptor,
                          evaluate, evaluate_value, make_context,
                          normalized_key)
from .linsolve import (Basis, Insert, SolutionCertificate, VerificationReport,
                       verify_certificate)

EPSILON = 10.0  # score of a move no table has seen: one depth-1 count


@dataclass
class SearchBudget:
    wall_clock_limit: float = 600.0
    max_trees: int | None = None
    rng_seed: int = 0
    max_steps_per_tree: int | None = None   # default: 2k + 2


@dataclass(frozen=True)
class CandidateMove:
    rule: Rule
    operands: tuple[int, ...]
    node: Expr
    score: float = 1.0


# --- forest ------------------------------------------------------------------

MAX_UNARY_CHAIN = 3
PROBE_COPIES = 2


def _sum_of_repeat(node: Expr) -> bool:
    """Summing along an axis that a repeat just created only rescales."""
    if node.rule not in (Rule.COLSUM, Rule.ROWSUM):
        return False
    child = node.children[0].rule
    if child is Rule.ELEMREPEAT:
        return True
    return (node.rule is Rule.COLSUM and child is Rule.ROWREPEAT) or \
        (node.rule is Rule.ROWSUM and child is Rule.COLREPEAT)


def unary_chain(e: Expr) -> list[Expr]:
    """``e`` and its descendants down through consecutive unary nodes, top first."""
    out = [e]
    while e.rule.arity == 1:
        e = e.children[0]
        out.append(e)
    return out


class MoveCache:
    """Memoized legal-move generation shared by every forest of one run.

    With a context, unary steps that return a branch to a value it already
    held on its current unary chain (up to a constant factor) are pruned.
    The check evaluates on a few leading copies only.
    """

    def __init__(self, config: GrammarConfig, ctx: EvalContext | None = None,
                 max_unary_chain: int = MAX_UNARY_CHAIN, limit: int = 200_000):
        self.config = config
        self.max_unary_chain = max_unary_chain
        self.limit = limit
        self.probe = None
        if ctx is not None:
            probe_vars = {k: v[:PROBE_COPIES] for k, v in ctx.variables.items()}
            self.probe = EvalContext(ctx.prime, PROBE_COPIES, ctx.dims, ctx.seed,
                                     probe_vars, ctx.shapes, ctx.context_id + ":probe")
        self._unary: dict[str, list[Expr]] = {}
        self._binary: dict[tuple[str, str], list[Expr]] = {}
        self._memo: dict = {}

    def _key(self, e: Expr) -> tuple:
        v = evaluate_value(e, self.probe, self._memo)
        return (e.shape, normalized_key(v, self.probe.prime))

    def unary(self, b: Expr) -> list[Expr]:
        s = b.canonical_string
        hit = self._unary.get(s)
        if hit is not None:
            return hit
        self._trim()
        chain = unary_chain(b)
        out = []
        if len(chain) - 1 < self.max_unary_chain:
            seen = {self._key(c) for c in chain} if self.probe is not None else set()
            for node in unary_moves(b, self.config):
                if _sum_of_repeat(node):
                    continue
                if self.probe is not None and self._key(node) in seen:
                    continue
                out.append(node)
        self._unary[s] = out
        return out

    def binary(self, x: Expr, y: Expr) -> list[Expr]:
        key = (x.canonical_string, y.canonical_string)
        hit = self._binary.get(key)
        if hit is None:
            self._trim()
            hit = binary_moves(x, y, self.config, ordered=True)
            # the element-wise product is symmetric; keep one order
            if key[0] > key[1]:
                hit = [e for e in hit if e.rule is not Rule.ELEMMUL]
            self._binary[key] = hit
        return hit

    def _trim(self):
        if len(self._unary) + len(self._binary) + len(self._memo) > self.limit:
            self._unary.clear()
            self._binary.clear()
            self._memo.clear()


class PartialForest:
    """Branches under construction; a completed tree is evaluated in ``ctx``."""

    def __init__(self, config: GrammarConfig, leaves: dict[str, int],
                 ctx: EvalContext | None = None, cache: MoveCache | None = None):
        self.config = config
        self.ctx = ctx
        self.cache = cache or MoveCache(config, ctx)
        shapes = dict(config.variables)
        self.branches: list[Expr] = []
        for name in sorted(leaves):
            self.branches += [variable(name, shapes[name])] * leaves[name]
        self.steps = 0
        self.max_steps: int | None = None

    @classmethod
    def for_target(cls, target: TargetSpec, ctx: EvalContext | None = None,
                   cache: MoveCache | None = None) -> "PartialForest":
        return cls(target.grammar_config(), target.leaf_counts, ctx, cache)

    @property
    def degree_used(self) -> int:
        return sum(b.degree for b in self.branches)

    @property
    def complete(self) -> bool:
        return len(self.branches) == 1 and self.branches[0].is_scalar

    @property
    def tree(self) -> Expr:
        if not self.complete:
            raise ValueError("forest is not a completed tree")
        return self.branches[0]

    def legal_moves(self) -> list[CandidateMove]:
        """Every distinct legal step; steps on identical branches are merged.

        Under a step cap, unary steps are dropped once the remaining steps
        are only enough for the merges still needed.
        """
        seen: set[str] = set()
        out: list[CandidateMove] = []
        bs = self.branches
        unary_ok = self.max_steps is None or self.max_steps - self.steps - 1 >= len(bs) - 1
        for i, b in enumerate(bs if unary_ok else ()):
            for node in self.cache.unary(b):
                if node.canonical_string not in seen:
                    seen.add(node.canonical_string)
                    out.append(CandidateMove(node.rule, (i,), node))
        for i, x in enumerate(bs):
            for j, y in enumerate(bs):
                if i == j:
                    continue
                for node in self.cache.binary(x, y):
                    if node.canonical_string not in seen:
                        seen.add(node.canonical_string)
                        out.append(CandidateMove(node.rule, (i, j), node))
        return out

    def apply(self, move: CandidateMove) -> None:
        for i in sorted(move.operands, reverse=True):
            del self.branches[i]
        self.branches.append(move.node)
        self.steps += 1

    def descriptor(self) -> Descriptor:
        """Descriptor of the completed tree; evaluated only once the tree is done."""
        return evaluate(self.tree, self.ctx)


# --- strategies ----------------------------------------------------------------

class Strategy(Protocol):
    name: str

    def scores(self, forest: PartialForest, moves: Sequence[CandidateMove]) -> np.ndarray: ...


class RandomStrategy:
    name = "random"

    def scores(self, forest, moves):
        return np.ones(len(moves))


def select_move(moves: Sequence[CandidateMove], scores: np.ndarray,
                rng: np.random.Generator, temperature: float = 1.0) -> CandidateMove:
    """Sample a move with probability proportional to score**(1/temperature).

    Temperature 0 picks an argmax, breaking ties uniformly.
    """
    if not moves:
        raise ValueError("no legal moves")
    scores = np.asarray(scores, dtype=float)
    if len(moves) == 1:
        return moves[0]
    if temperature <= 0:
        best = np.flatnonzero(scores == scores.max())
        return moves[int(best[rng.integers(len(best))])]
    logs = np.log(np.maximum(scores, 1e-300)) / temperature
    w = np.exp(logs - logs.max())
    return moves[int(rng.choice(len(moves), p=w / w.sum()))]


# --- n-grams ---------------------------------------------------------------------

def node_label(e: Expr) -> str:
    if e.rule is Rule.VARIABLE:
        return f"Variable[{e.shape[0]},{e.shape[1]}]"
    if e.target is not None:
        return f"{e.rule.value}[{e.target[0]},{e.target[1]}]"
    return e.rule.value


def pattern(e: Expr, depth: int) -> str:
    """Rule skeleton of ``e`` truncated at ``depth`` levels; leaves carry their shape."""
    label = node_label(e)
    if depth <= 1 or not e.children:
        return label
    return label + "(" + ",".join(pattern(c, depth - 1) for c in e.children) + ")"


@dataclass
class NGramModel:
    n_max: int
    tables: list[Counter] = field(default_factory=list)

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        while len(self.tables) < self.n_max:
            self.tables.append(Counter())

    def count(self, depth: int, pat: str) -> int:
        return self.tables[depth - 1].get(pat, 0)

    def add_tree(self, tree: Expr) -> None:
        for node in tree.nodes():
            for d in range(1, self.n_max + 1):
                self.tables[d - 1][pattern(node, d)] += 1

    def score_node(self, node: Expr) -> float:
        total = sum(10.0 ** d * self.count(d, pattern(node, d))
                    for d in range(1, self.n_max + 1))
        return total if total > 0 else EPSILON

    def to_json(self) -> dict:
        return {"n_max": self.n_max, "tables": [dict(t) for t in self.tables]}

    @classmethod
    def from_json(cls, d: dict) -> "NGramModel":
        return cls(int(d["n_max"]), [Counter(t) for t in d["tables"]])


def _solution_trees(solutions: Iterable) -> list[Expr]:
    trees = []
    for s in solutions:
        if isinstance(s, SolutionCertificate):
            trees += s.trees
        elif isinstance(s, Expr):
            trees.append(s)
        else:
            raise TypeError(f"cannot train on {type(s).__name__}")
    return trees


def ngram_train(solutions: Sequence, n_max: int) -> NGramModel:
    """Count depth-1..n_max subtree patterns over every node of every solution tree."""
    trees = _solution_trees(solutions)
    if not trees:
        raise ValueError("n-gram training needs at least one solution tree")
    model = NGramModel(n_max)
    for t in trees:
        model.add_tree(t)
    return model


def ngram_score(model: NGramModel, forest: PartialForest | None, move: CandidateMove) -> float:
    return model.score_node(move.node)


class NGramStrategy:
    def __init__(self, model: NGramModel):
        self.model = model
        self.name = f"ngram:{model.n_max}"
        self._cache: dict[str, float] = {}

    def _score(self, node: Expr) -> float:
        s = node.canonical_string
        v = self._cache.get(s)
        if v is None:
            if len(self._cache) > 500_000:
                self._cache.clear()
            v = self._cache[s] = self.model.score_node(node)
        return v

    def scores(self, forest, moves):
        return np.array([self._score(m.node) for m in moves])


# --- discovery loop ----------------------------------------------------------------

@dataclass
class DiscoveryResult:
    target: TargetSpec
    strategy: str
    success: bool
    wall_time_s: float
    trees_built: int
    trees_abandoned: int
    rank: int
    seed: int
    certificate: SolutionCertificate | None = None
    verification: VerificationReport | None = None
    trees: list[str] = field(default_factory=list)   # distinct completed trees, in order

    def to_json(self) -> dict:
        d = {"target": self.target.to_json(), "k": self.target.k,
             "strategy": self.strategy, "success": self.success,
             "wall_time_s": round(self.wall_time_s, 4),
             "trees_built": self.trees_built, "trees_abandoned": self.trees_abandoned,
             "rank": self.rank, "seed": self.seed,
             "certificate": self.certificate.to_json() if self.certificate else None}
        if self.verification is not None:
            d["verification"] = self.verification.to_json()
        return d


def grow_tree(forest: PartialForest, strategy: Strategy, rng: np.random.Generator,
              temperature: float, max_steps: int) -> bool:
    """Grow ``forest`` to completion; False when the step cap is hit first."""
    forest.max_steps = max_steps
    while not forest.complete:
        if forest.steps >= max_steps:
            return False
        moves = forest.legal_moves()
        if not moves:
            return False
        forest.apply(select_move(moves, strategy.scores(forest, moves), rng, temperature))
    return True


def run_discovery(target: TargetSpec, strategy: Strategy, budget: SearchBudget,
                  ctx: EvalContext | None = None, *, temperature: float = 1.0,
                  verify_seeds: Sequence[int] = (101, 202), record_trees: bool = False,
                  copies: int = DEFAULT_COPIES, prime: int = DEFAULT_PRIME) -> DiscoveryResult:
    """Grow trees until a linear combination of them matches ``target``.

    Deterministic given the budget's seed, except that wall-clock limits can
    cut different runs at different points.
    """
    t0 = time.perf_counter()
    if ctx is None:
        ctx = make_context(target.variable_shapes, target.dims, copies, prime,
                           seed=budget.rng_seed)
    rng = np.random.default_rng(budget.rng_seed)
    basis = Basis.for_context(ctx)
    t_desc = target.target_descriptor(ctx)
    max_steps = budget.max_steps_per_tree or 2 * target.degree + 2
    cache = MoveCache(target.grammar_config(), ctx)
    built = abandoned = 0
    seen: set[str] = set()
    order: list[str] = []
    cert = None
    while True:
        if time.perf_counter() - t0 > budget.wall_clock_limit:
            break
        if budget.max_trees is not None and built >= budget.max_trees:
            break
        forest = PartialForest.for_target(target, ctx, cache)
        if not grow_tree(forest, strategy, rng, temperature, max_steps):
            abandoned += 1
            continue
        built += 1
        tree = forest.tree
        s = tree.canonical_string
        if s in seen:
            continue
        seen.add(s)
        if record_trees:
            order.append(s)
        if basis.add_tree(tree, forest.descriptor()) is Insert.DEPENDENT:
            continue
        if basis.rank >= ctx.copies - 1:
            ctx, basis, t_desc = _grow_context(ctx, basis, target)
        cert = basis.try_match(t_desc, ctx, target.to_json())
        if cert is not None:
            break
    wall = time.perf_counter() - t0
    report = None
    if cert is not None:
        cert.strategy = strategy.name
        cert.wall_time_s = round(wall, 4)
        report = verify_certificate(cert, verify_seeds)
    return DiscoveryResult(target, strategy.name, cert is not None, wall, built, abandoned,
                           basis.rank, budget.rng_seed, cert, report, order)


def _grow_context(ctx: EvalContext, basis: Basis, target: TargetSpec):
    """Double the descriptor length and re-evaluate every stored tree."""
    bigger = ctx.with_copies(2 * ctx.copies)
    fresh = Basis.for_context(bigger)
    for tree in basis.trees:
        fresh.add_tree(tree, evaluate(tree, bigger))
    return bigger, fresh, target.target_descriptor(bigger)


# --- curriculum ------------------------------------------------------------------

@dataclass
class CurriculumReport:
    family: str
    strategy: str
    runs: dict = field(default_factory=dict)       # k -> list[DiscoveryResult]

    def success_fraction(self, k: int) -> float:
        rs = self.runs.get(k, [])
        return sum(r.success for r in rs) / len(rs) if rs else 0.0

    def solutions(self) -> list[SolutionCertificate]:
        return [r.certificate for rs in self.runs.values() for r in rs if r.success]

    def to_json(self) -> dict:
        return {"family": self.family, "strategy": self.strategy,
                "per_k": {str(k): {"success_fraction": self.success_fraction(k),
                                   "wall_times_s": [round(r.wall_time_s, 4) for r in rs],
                                   "runs": [r.to_json() for r in rs]}
                          for k, rs in sorted(self.runs.items())}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def make_strategy(kind: str, solutions: Sequence, **kw) -> Strategy:
    """Build a strategy from a spec string: ``random``, ``ngram:N`` or ``rnn``."""
    if kind == "random":
        return RandomStrategy()
    if kind.startswith("ngram"):
        n = int(kind.split(":", 1)[1]) if ":" in kind else 3
        if not solutions:
            return _EmptyNGram(n)
        return NGramStrategy(ngram_train(solutions, n))
    if kind == "rnn":
        from .neural import RnnStrategy
        return RnnStrategy.from_solutions(solutions, **kw)
    raise ValueError(f"unknown strategy {kind!r}")


class _EmptyNGram(RandomStrategy):
    """An untrained n-gram model scores everything at the floor."""

    def __init__(self, n: int):
        self.name = f"ngram:{n}"


def _run_one(args):
    target, kind, solutions, budget, temperature, kw = args
    strategy = make_strategy(kind, solutions, **kw)
    return run_discovery(target, strategy, budget, temperature=temperature)


def curriculum_run(family, k_min: int, k_max: int, strategy_kind: str, repetitions: int,
                   *, budget: SearchBudget | None = None, seed: int = 0,
                   dims: dict | None = None, temperature: float = 1.0,
                   workers: int = 1, seed_solutions: Sequence = (),
                   strategy_kwargs: dict | None = None, log=None) -> CurriculumReport:
    """Run ``repetitions`` seeded discoveries per degree, retraining between degrees.

    The strategy for degree k is trained on every solution found at lower
    degrees plus ``seed_solutions``.
    """
    if k_min < 1 or k_max < k_min:
        raise ValueError("need 1 <= k_min <= k_max")
    budget = budget or SearchBudget()
    report = CurriculumReport(str(getattr(family, "value", family)), strategy_kind)
    solutions = list(seed_solutions)
    kw = strategy_kwargs or {}
    for k in range(k_min, k_max + 1):
        target = TargetSpec(family, k, dict(dims) if dims else {})
        jobs = []
        for r in range(repetitions):
            b = SearchBudget(budget.wall_clock_limit, budget.max_trees,
                             seed * 1_000_003 + k * 1009 + r, budget.max_steps_per_tree)
            jobs.append((target, strategy_kind, list(solutions), b, temperature, kw))
        if workers > 1 and repetitions > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(workers) as pool:
                results = list(pool.map(_run_one, jobs))
        else:
            results = [_run_one(j) for j in jobs]
        report.runs[k] = results
        for res in results:
            if res.success and res.verification is not None and res.verification.structurally_valid:
                solutions.append(res.certificate)
        if log is not None:
            log(f"k={k}: {sum(r.success for r in results)}/{len(results)} "
                f"[{', '.join(f'{r.wall_time_s:.1f}s' for r in results)}]")
    return report
