"""Incremental linear basis over Z_p for matching a target by tree combinations."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import Expr, Monomial, _mono_key, monomial_str, parse
from .fingerprint import (ContextMismatch, Descriptor, EvalContext, evaluate,
                          make_context, matmul_mod)


class Insert(str, enum.Enum):
    ADDED = "added"
    DEPENDENT = "dependent"


@dataclass
class SolutionCertificate:
    target: dict                  # serialized target spec
    trees: list[Expr]
    weights: list[int]
    prime: int
    dims: dict
    seed: int
    copies: int
    variables: dict               # name -> shape
    strategy: str = ""
    wall_time_s: float = 0.0

    @property
    def complexity(self) -> Monomial:
        return max((t.complexity for t in self.trees), key=_mono_key, default=())

    def combination(self, ctx: EvalContext) -> np.ndarray:
        total = np.zeros(ctx.copies, dtype=np.int64)
        for tree, w in zip(self.trees, self.weights):
            total = (total + evaluate(tree, ctx).values * (w % ctx.prime)) % ctx.prime
        return total

    def to_json(self) -> dict:
        return {"target": self.target,
                "trees": [t.canonical_string for t in self.trees],
                "weights": [int(w) for w in self.weights],
                "prime": self.prime, "dims": dict(self.dims), "seed": self.seed,
                "N": self.copies,
                "variables": {k: list(v) for k, v in self.variables.items()},
                "complexity": monomial_str(self.complexity),
                "strategy": self.strategy, "wall_time_s": self.wall_time_s}

    @classmethod
    def from_json(cls, d: dict) -> "SolutionCertificate":
        variables = {k: tuple(v) for k, v in d["variables"].items()}
        trees = [parse(s, variables) for s in d["trees"]]
        return cls(d["target"], trees, [int(w) for w in d["weights"]], int(d["prime"]),
                   {k: int(v) for k, v in d["dims"].items()}, int(d["seed"]),
                   int(d["N"]), variables, d.get("strategy", ""),
                   float(d.get("wall_time_s", 0.0)))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


class Basis:
    """Reduced row-echelon basis of tree descriptors mod p.

    Row ``i`` of ``rows`` equals ``coef[i] @ F`` where ``F`` stacks the stored
    descriptors.  Each row has a 1 at its pivot column and zeros at every
    other row's pivot, so reducing a vector costs one matrix-vector product.
    Dependent trees are rejected, so stored trees are exactly the pivot trees.
    """

    def __init__(self, prime: int, length: int, context_id: str | None = None):
        self.p = prime
        self.length = length
        self.context_id = context_id
        self.trees: list = []
        self.descs = np.zeros((0, length), dtype=np.int64)
        self.rows = np.zeros((0, length), dtype=np.int64)
        self.coef = np.zeros((0, 0), dtype=np.int64)
        self.pivots: list[int] = []

    @classmethod
    def for_context(cls, ctx: EvalContext) -> "Basis":
        return cls(ctx.prime, ctx.copies, ctx.context_id)

    @property
    def rank(self) -> int:
        return len(self.pivots)

    def _check(self, d: Descriptor):
        if self.context_id is not None and d.context_id != self.context_id:
            raise ContextMismatch("descriptor context does not match basis")
        if len(d.values) != self.length:
            raise ValueError("descriptor length does not match basis")

    def _reduce(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (residual, pivot coefficients) of ``v`` against the rows."""
        if not self.pivots:
            return v % self.p, np.zeros(0, dtype=np.int64)
        c = v[self.pivots] % self.p
        residual = (v - matmul_mod(c[None, :], self.rows, self.p)[0]) % self.p
        return residual, c

    def add_tree(self, e, d: Descriptor) -> Insert:
        self._check(d)
        p = self.p
        residual, c = self._reduce(d.values.astype(np.int64))
        nz = np.flatnonzero(residual)
        if len(nz) == 0:
            return Insert.DEPENDENT
        m = len(self.trees)
        # new row = residual = f_new - c @ coef @ F
        comb = np.zeros(m + 1, dtype=np.int64)
        if m:
            comb[:m] = (-matmul_mod(c[None, :], self.coef, p)[0]) % p
        comb[m] = 1
        q = int(nz[0])
        inv = pow(int(residual[q]), p - 2, p)
        new_row = residual * inv % p
        comb = comb * inv % p
        coef = np.zeros((m + 1, m + 1), dtype=np.int64)
        coef[:m, :m] = self.coef
        rows = self.rows
        if m:
            f = rows[:, q].copy()
            rows = (rows - f[:, None] * new_row[None, :] % p) % p
            coef[:m] = (coef[:m] - f[:, None] * comb[None, :] % p) % p
        coef[m] = comb
        self.rows = np.vstack([rows, new_row[None, :]])
        self.coef = coef
        self.descs = np.vstack([self.descs, d.values[None, :].astype(np.int64)])
        self.pivots.append(q)
        self.trees.append(e)
        return Insert.ADDED

    def solve(self, target: Descriptor) -> np.ndarray | None:
        """Weights over stored trees reproducing ``target``, or None."""
        self._check(target)
        residual, c = self._reduce(target.values.astype(np.int64))
        if np.any(residual):
            return None
        if not self.pivots:
            return np.zeros(0, dtype=np.int64)
        w = matmul_mod(c[None, :], self.coef, self.p)[0]
        check = matmul_mod(w[None, :], self.descs, self.p)[0]
        if not np.array_equal(check, target.values % self.p):
            raise AssertionError("basis bookkeeping produced an invalid solution")
        return w

    def try_match(self, target: Descriptor, ctx: EvalContext | None = None,
                  target_spec: dict | None = None) -> SolutionCertificate | None:
        w = self.solve(target)
        if w is None:
            return None
        keep = [i for i in range(len(w)) if w[i] != 0]
        cert = SolutionCertificate(
            target=target_spec or {},
            trees=[self.trees[i] for i in keep],
            weights=[int(w[i]) for i in keep],
            prime=self.p,
            dims=dict(ctx.dims) if ctx else {},
            seed=ctx.seed if ctx else 0,
            copies=self.length,
            variables=dict(ctx.shapes) if ctx else {})
        return cert


@dataclass
class VerificationEntry:
    seed: int
    dims: dict
    passed: bool
    second_dims: bool = False
    refit: bool | None = None     # same trees, re-solved weights; only probed on failure


@dataclass
class VerificationReport:
    entries: list[VerificationEntry] = field(default_factory=list)

    @property
    def passed_same_dims(self) -> bool:
        return all(e.passed for e in self.entries if not e.second_dims)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def structurally_valid(self) -> bool:
        """Same-dims pass, and the trees still span the target at the second dims."""
        return self.passed_same_dims and all(
            e.passed or bool(e.refit) for e in self.entries if e.second_dims)

    @property
    def dimension_dependent(self) -> bool:
        same = [e for e in self.entries if not e.second_dims]
        other = [e for e in self.entries if e.second_dims]
        return bool(same) and all(e.passed for e in same) and any(not e.passed for e in other)

    def to_json(self) -> dict:
        return {"passed": self.passed,
                "dimension_dependent": self.dimension_dependent,
                "structurally_valid": self.structurally_valid,
                "entries": [{"seed": e.seed, "dims": e.dims, "second_dims": e.second_dims,
                             "passed": e.passed, "refit": e.refit} for e in self.entries]}


def refit_weights(trees: Sequence[Expr], ctx: EvalContext,
                  target: Descriptor) -> np.ndarray | None:
    """Weights over ``trees`` matching ``target`` in ``ctx``, or None."""
    basis = Basis.for_context(ctx)
    for t in trees:
        basis.add_tree(t, evaluate(t, ctx))
    if basis.solve(target) is None:
        return None
    w = np.zeros(len(trees), dtype=np.int64)
    pos = {t.canonical_string: i for i, t in enumerate(trees)}
    for t, wi in zip(basis.trees, basis.solve(target)):
        w[pos[t.canonical_string]] = wi
    return w


def bump_dims(dims: dict) -> dict:
    return {k: v + 1 for k, v in dims.items()}


def verify_certificate(cert: SolutionCertificate, fresh_seeds: Sequence[int],
                       target_fn: Callable[[EvalContext], Descriptor] | None = None,
                       second_dims: dict | None = None,
                       copies: int = 64) -> VerificationReport:
    """Re-check the combination in freshly seeded contexts and at second dims.

    ``target_fn`` computes the target descriptor in a context; by default it
    is rebuilt from ``cert.target`` through the families module.  When the
    fixed weights fail at the second dims, the weights are re-solved over the
    same trees to tell n-dependent weights apart from a wrong tree set.
    """
    if target_fn is None:
        from .families import TargetSpec
        spec = TargetSpec.from_json(cert.target)
        target_fn = spec.target_descriptor
    if second_dims is None:
        second_dims = bump_dims(cert.dims)
    # refitting needs more equations than unknowns to mean anything
    copies = max(copies, 2 * len(cert.trees) + 16)
    report = VerificationReport()
    for dims, second in ((cert.dims, False), (second_dims, True)):
        if second and not second_dims:
            continue
        for seed in fresh_seeds:
            ctx = make_context(cert.variables, dims, copies, cert.prime, seed)
            refit = None
            try:
                target = target_fn(ctx)
                ok = bool(np.array_equal(cert.combination(ctx), target.values))
                if second and not ok:
                    refit = refit_weights(cert.trees, ctx, target) is not None
            except ValueError:
                ok = False
            report.entries.append(VerificationEntry(seed, dict(dims), ok, second, refit))
    return report
