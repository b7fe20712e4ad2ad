"""Numerical descriptors: evaluate expressions on random instantiations mod p.

All arithmetic stays in int64.  The prime must be below 2**31 so that a
product of two residues fits in 63 bits; matrix products split one operand
into 16-bit halves so that a whole inner-product row also fits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .expr import Expr, Rule, Shape

DEFAULT_PRIME = 2_147_483_647  # 2**31 - 1
DEFAULT_COPIES = 1000
MAX_PRIME = 2**31


class ContextMismatch(ValueError):
    pass


def is_prime(p: int) -> bool:
    if p < 2:
        return False
    for q in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if p % q == 0:
            return p == q
    d, s = p - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17):  # deterministic below 3.4e14
        x = pow(a, d, p)
        if x in (1, p - 1):
            continue
        for _ in range(s - 1):
            x = x * x % p
            if x == p - 1:
                break
        else:
            return False
    return True


# --- mod-p kernels ---------------------------------------------------------

def matmul_mod(x: np.ndarray, y: np.ndarray, p: int) -> np.ndarray:
    """Batched ``x @ y mod p`` for residues in [0, p), p < 2**31."""
    lo = y & 0xFFFF
    hi = y >> 16
    out = np.matmul(x, hi) % p
    out = (out << 16) % p
    return (out + np.matmul(x, lo) % p) % p


def mulmod(x: np.ndarray, y, p: int) -> np.ndarray:
    return x * y % p


def powmod(x: np.ndarray, e: int, p: int) -> np.ndarray:
    result = np.ones_like(x)
    base = x % p
    while e:
        if e & 1:
            result = result * base % p
        base = base * base % p
        e >>= 1
    return result


def inverse_mod(x: np.ndarray, p: int) -> np.ndarray:
    """Elementwise Fermat inverse; zero maps to zero."""
    return powmod(x, p - 2, p)


# --- contexts ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EvalContext:
    prime: int
    copies: int
    dims: dict
    seed: int
    variables: dict  # name -> int64 array (copies, rows, cols)
    shapes: dict     # name -> symbolic Shape
    context_id: str = field(default="")

    def size(self, dim: str) -> int:
        return 1 if dim == "1" else self.dims[dim]

    def spec(self) -> dict:
        return {"prime": self.prime, "N": self.copies, "dims": dict(self.dims),
                "seed": self.seed,
                "variables": {k: list(v) for k, v in self.shapes.items()}}

    def with_copies(self, copies: int) -> "EvalContext":
        return make_context(self.shapes, self.dims, copies, self.prime, self.seed)


def _context_id(prime, copies, dims, seed, shapes) -> str:
    blob = json.dumps([prime, copies, sorted(dims.items()), seed,
                       sorted((k, list(v)) for k, v in shapes.items())])
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def make_context(variables: dict[str, Shape], dims: dict[str, int],
                 copies: int = DEFAULT_COPIES, prime: int = DEFAULT_PRIME,
                 seed: int = 0) -> EvalContext:
    """Draw ``copies`` uniform instantiations of every variable over Z_prime."""
    if copies < 1:
        raise ValueError("need at least one copy")
    if not (is_prime(prime) and prime < MAX_PRIME):
        raise ValueError(f"prime must be a prime below 2**31, got {prime}")
    dims = {k: int(v) for k, v in dims.items()}
    if any(v < 1 for v in dims.values()):
        raise ValueError(f"dimensions must be positive: {dims}")
    shapes = {k: (s[0], s[1]) for k, s in variables.items()}
    for s in shapes.values():
        for d in s:
            if d != "1" and d not in dims:
                raise ValueError(f"no size bound for dim {d!r}")
    rng = np.random.default_rng(seed)
    values = {}
    for name in sorted(shapes):
        r, c = shapes[name]
        size = (copies, 1 if r == "1" else dims[r], 1 if c == "1" else dims[c])
        arr = rng.integers(0, prime, size=size, dtype=np.int64)
        arr.flags.writeable = False
        values[name] = arr
    return EvalContext(prime, copies, dims, seed, values, shapes,
                       _context_id(prime, copies, dims, seed, shapes))


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray
    context_id: str

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return descriptors_equal(self, other)

    __hash__ = None


def descriptors_equal(a: Descriptor, b: Descriptor) -> bool:
    if a.context_id != b.context_id:
        raise ContextMismatch("descriptors come from different contexts")
    return bool(np.array_equal(a.values, b.values))


# --- evaluation --------------------------------------------------------------

def apply_rule(rule: Rule, args: list[np.ndarray], p: int,
               target: tuple[int, int] | None = None) -> np.ndarray:
    """One grammar step on batched residue arrays of shape (copies, r, c)."""
    if rule is Rule.TRANSPOSE:
        return np.ascontiguousarray(np.swapaxes(args[0], 1, 2))
    if rule is Rule.COLSUM:
        return args[0].sum(axis=1, keepdims=True) % p
    if rule is Rule.ROWSUM:
        return args[0].sum(axis=2, keepdims=True) % p
    if rule is Rule.ELEMMUL:
        return args[0] * args[1] % p
    if rule in (Rule.MATMUL, Rule.MATVECMUL):
        return matmul_mod(args[0], args[1], p)
    if rule in (Rule.COLREPEAT, Rule.ROWREPEAT, Rule.ELEMREPEAT):
        x = args[0]
        return np.ascontiguousarray(np.broadcast_to(x, (x.shape[0],) + target))
    raise ValueError(f"cannot apply {rule}")


def evaluate_value(e: Expr, ctx: EvalContext, memo: dict | None = None) -> np.ndarray:
    """Full batched value of ``e``: array of shape (copies, rows, cols)."""
    if memo is None:
        memo = {}
    key = e.canonical_string
    hit = memo.get(key)
    if hit is not None:
        return hit
    if e.rule is Rule.VARIABLE:
        if e.name not in ctx.variables:
            raise KeyError(f"variable {e.name!r} not bound in context")
        out = ctx.variables[e.name]
    else:
        args = [evaluate_value(c, ctx, memo) for c in e.children]
        target = None
        if e.target is not None:
            target = (ctx.size(e.target[0]), ctx.size(e.target[1]))
        out = apply_rule(e.rule, args, ctx.prime, target)
    memo[key] = out
    return out


def evaluate(e: Expr, ctx: EvalContext) -> Descriptor:
    if not e.is_scalar:
        raise ValueError(f"only scalar expressions have descriptors, got shape {e.shape}")
    return Descriptor(evaluate_value(e, ctx)[:, 0, 0].copy(), ctx.context_id)


def normalized_key(value: np.ndarray, p: int) -> bytes:
    """Bytes of ``value`` scaled so its first nonzero entry is 1."""
    flat = value.reshape(-1)
    nz = np.flatnonzero(flat)
    if len(nz) == 0:
        return flat.tobytes()
    inv = pow(int(flat[nz[0]]), p - 2, p)
    return (flat * inv % p).tobytes()


class DescriptorDeduper:
    """Deduplicates expressions whose values agree up to a nonzero constant.

    Values of admitted expressions are cached so that a candidate costs one
    grammar step to evaluate.  Proportional rather than exact matching is
    required because ``sum(repmat(x, n, 1), 1)`` equals ``n * x``; exact
    matching would never close the unary rules.
    """

    def __init__(self, ctx: EvalContext, exact: bool = False):
        self.ctx = ctx
        self.exact = exact
        self.values: dict[str, np.ndarray] = {}
        self.keys: dict[tuple, Expr] = {}

    def value(self, e: Expr) -> np.ndarray:
        v = self.values.get(e.canonical_string)
        if v is not None:
            return v
        args = [self.values.get(c.canonical_string) for c in e.children]
        if e.rule is Rule.VARIABLE or any(a is None for a in args):
            return evaluate_value(e, self.ctx)
        target = None
        if e.target is not None:
            target = (self.ctx.size(e.target[0]), self.ctx.size(e.target[1]))
        return apply_rule(e.rule, args, self.ctx.prime, target)

    def key(self, e: Expr, exact: bool | None = None) -> tuple:
        v = self.value(e)
        exact = self.exact if exact is None else exact
        body = v.tobytes() if exact else normalized_key(v, self.ctx.prime)
        return (e.shape, body)

    def admit(self, e: Expr) -> bool:
        v = self.value(e)
        body = v.tobytes() if self.exact else normalized_key(v, self.ctx.prime)
        k = (e.shape, body)
        if k in self.keys:
            return False
        self.keys[k] = e
        self.values[e.canonical_string] = v
        return True
