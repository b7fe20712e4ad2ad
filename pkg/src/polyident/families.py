"""Target families and their brute-force oracles.

Oracles compute target descriptors directly from the defining sums with
their own modular arithmetic, independent of the expression evaluator.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from .expr import GrammarConfig, Shape, monomial
from .fingerprint import Descriptor, EvalContext


class Family(str, enum.Enum):
    AAT = "aat"
    AELEMAAT = "elem-aat"
    SYM = "sym"
    RBM1 = "rbm1"
    RBM2 = "rbm2"
    SUMAB = "sum-ab"
    SUMABK = "sum-abk"


class OracleBudgetError(ValueError):
    """The requested dims make the brute-force oracle too expensive."""


RBM1_MAX_N = 15
RBM2_MAX_N = 7

_DEFAULT_DIMS = {
    Family.AAT: {"n": 5},
    Family.AELEMAAT: {"n": 5},
    Family.SYM: {"n": 7},
    Family.RBM1: {"n": 7},
    Family.RBM2: {"n": 4},
    Family.SUMAB: {"n": 3, "m": 4, "p": 5},
    Family.SUMABK: {"n": 3, "m": 4},
}

# cubic naive cost of each target's matrix chain; absent means exponential
_NAIVE_CUBIC = {
    Family.AAT: ("n", "n", "n"), Family.AELEMAAT: ("n", "n", "n"),
    Family.SUMAB: ("n", "m", "p"), Family.SUMABK: ("n", "m", "n"),
}


# --- modular helpers (deliberately separate from fingerprint's kernels) ----

def _matmul(x: np.ndarray, y: np.ndarray, p: int) -> np.ndarray:
    """Batched product mod p accumulating one inner index at a time."""
    out = np.zeros(x.shape[:-1] + (y.shape[-1],), dtype=np.int64)
    for j in range(x.shape[-1]):
        out = (out + x[..., :, j, None] * y[..., None, j, :] % p) % p
    return out


def _total(x: np.ndarray, p: int) -> np.ndarray:
    return x.reshape(x.shape[0], -1).sum(axis=1) % p


def _pow(x: np.ndarray, k: int, p: int) -> np.ndarray:
    out = np.ones_like(x)
    for _ in range(k):
        out = out * x % p
    return out


def _masks(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)


# --- oracles -----------------------------------------------------------------

def sym_oracle(a: np.ndarray, k: int, p: int) -> np.ndarray:
    """e_k of each vector (last axis) via the truncated product of (1 + a_i x)."""
    a = np.asarray(a, dtype=np.int64) % p
    batch = a.shape[:-1]
    coeffs = np.zeros(batch + (k + 1,), dtype=np.int64)
    coeffs[..., 0] = 1
    for i in range(a.shape[-1]):
        ai = a[..., i]
        for j in range(k, 0, -1):
            coeffs[..., j] = (coeffs[..., j] + coeffs[..., j - 1] * ai % p) % p
    return coeffs[..., k]


def rbm1_oracle(a: np.ndarray, k: int, p: int) -> np.ndarray:
    """Sum over binary masks v of (v . a)^k, for vectors on the last axis."""
    a = np.asarray(a, dtype=np.int64) % p
    n = a.shape[-1]
    if n > RBM1_MAX_N:
        raise OracleBudgetError(f"rbm1 oracle enumerates 2^n masks; n={n} > {RBM1_MAX_N}")
    masks = _masks(n)                          # (2^n, n)
    dots = (a[..., None, :] * masks).sum(axis=-1) % p
    return _pow(dots, k, p).sum(axis=-1) % p


def rbm2_oracle(a: np.ndarray, k: int, p: int) -> np.ndarray:
    """Sum over binary masks v, h of (v' A h)^k, for matrices on the last two axes."""
    a = np.asarray(a, dtype=np.int64) % p
    n = a.shape[-1]
    if max(a.shape[-2:]) > RBM2_MAX_N:
        raise OracleBudgetError(f"rbm2 oracle enumerates 2^(2n) masks; n={n} > {RBM2_MAX_N}")
    vs = _masks(a.shape[-2])
    hs = _masks(n)
    va = np.einsum("vi,...ij->...vj", vs, a) % p     # entries < n * p
    vah = np.einsum("...vj,hj->...vh", va, hs) % p
    return _pow(vah, k, p).reshape(vah.shape[:-2] + (-1,)).sum(axis=-1) % p


def aat_chain(a: np.ndarray, k: int, elementwise_first: bool, p: int,
              alt_odd: bool = False) -> np.ndarray:
    """The matrix chain whose entry sum is the k-th AAT / (A.*A)A' term."""
    if k < 2:
        raise ValueError("AAT families start at k = 2")
    at = np.swapaxes(a, -1, -2)
    half = k // 2
    if not elementwise_first:
        pair = _matmul(a, at, p)
        out = pair
        for _ in range(half - 1):
            out = _matmul(out, pair, p)
        if k % 2:
            out = _matmul(out, a, p)
        return out
    b = a * a % p
    if k % 2 == 0:
        unit = _matmul(b, at, p)
        reps, tail = half, None
    elif alt_odd:
        unit = _matmul(b, at, p)
        reps, tail = half, b
    else:
        unit = _matmul(_matmul(b, at, p), b, p)
        reps, tail = half, None
    out = unit
    for _ in range(reps - 1):
        out = _matmul(out, unit, p)
    if tail is not None:
        out = _matmul(out, tail, p)
    return out


def aat_oracle(a: np.ndarray, k: int, elementwise_first: bool, p: int,
               alt_odd: bool = False) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64) % p
    batched = a.ndim == 3
    if not batched:
        a = a[None]
    out = _total(aat_chain(a, k, elementwise_first, p, alt_odd), p)
    return out if batched else out[0]


# --- target specs -----------------------------------------------------------

@dataclass(frozen=True)
class TargetSpec:
    family: Family
    k: int
    dims: dict = field(default_factory=dict)
    alt_odd: bool = False      # alternate odd-k reading for elem-aat

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not self.dims:
            object.__setattr__(self, "dims", default_dims(self.family, self.k))

    @property
    def variable_shapes(self) -> dict[str, Shape]:
        f = self.family
        if f in (Family.AAT, Family.AELEMAAT, Family.RBM2):
            return {"A": ("n", "n")}
        if f in (Family.SYM, Family.RBM1):
            return {"A": ("n", "1")}
        if f is Family.SUMAB:
            return {"A": ("n", "m"), "B": ("m", "p")}
        return {"A": ("n", "m"), "B": ("m", "n")}

    @property
    def allow_matmul(self) -> bool:
        """Matmul is barred when it would be as costly as the naive target."""
        return self.family not in _NAIVE_CUBIC

    @property
    def leaf_counts(self) -> dict[str, int]:
        """How many times each variable occurs in every term of the target."""
        f, k = self.family, self.k
        if f is Family.AELEMAAT:
            half = k // 2
            if k % 2 == 0:
                deg = 3 * half
            elif self.alt_odd:
                deg = 3 * half + 2
            else:
                deg = 5 * half
            return {"A": deg}
        if f is Family.SUMAB:
            return {"A": 1, "B": 1}
        if f is Family.SUMABK:
            return {"A": k, "B": k}
        return {"A": k}

    @property
    def degree(self) -> int:
        return sum(self.leaf_counts.values())

    @property
    def target_id(self) -> str:
        suffix = "-alt" if self.alt_odd else ""
        return f"{self.family.value}{suffix}:k={self.k}"

    def grammar_config(self) -> GrammarConfig:
        return GrammarConfig(tuple(sorted(self.variable_shapes.items())), self.degree,
                             allow_matmul=self.allow_matmul)

    def naive_complexity(self):
        """Monomial cost of the naive chain, or None when it is exponential."""
        dims = _NAIVE_CUBIC.get(self.family)
        return None if dims is None else monomial(*dims)

    def with_dims(self, dims: dict) -> "TargetSpec":
        return TargetSpec(self.family, self.k, dict(dims), self.alt_odd)

    def to_json(self) -> dict:
        return {"family": self.family.value, "k": self.k, "dims": dict(self.dims),
                "alt_odd": self.alt_odd}

    @classmethod
    def from_json(cls, d: dict) -> "TargetSpec":
        return cls(Family(d["family"]), int(d["k"]), dict(d.get("dims", {})),
                   bool(d.get("alt_odd", False)))

    def target_descriptor(self, ctx: EvalContext) -> Descriptor:
        return target_descriptor(self, ctx)


def default_dims(family: Family, k: int) -> dict:
    """Per-family sizes, grown with k where a small n would admit spurious identities.

    e_k vanishes identically when k > n, and n x n matrices satisfy polynomial
    identities (Cayley-Hamilton) from degree n on, so square targets use n > k.
    """
    family = Family(family)
    dims = dict(_DEFAULT_DIMS[family])
    if family in (Family.SYM, Family.AAT, Family.AELEMAAT, Family.RBM2):
        dims["n"] = max(dims["n"], k + 1)
    if family is Family.RBM2:
        dims["n"] = min(dims["n"], RBM2_MAX_N)
    return dims


def target_descriptor(spec: TargetSpec, ctx: EvalContext) -> Descriptor:
    """Exact mod-p value of the family's defining sum on every copy."""
    p = ctx.prime
    f, k = spec.family, spec.k
    a = ctx.variables["A"]
    if f in (Family.AAT, Family.AELEMAAT):
        vals = aat_oracle(a, k, f is Family.AELEMAAT, p, spec.alt_odd)
    elif f is Family.SYM:
        vals = sym_oracle(a[:, :, 0], k, p)
    elif f is Family.RBM1:
        vals = rbm1_oracle(a[:, :, 0], k, p)
    elif f is Family.RBM2:
        vals = rbm2_oracle(a, k, p)
    elif f is Family.SUMAB:
        vals = _total(_matmul(a, ctx.variables["B"], p), p)
    else:
        ab = _matmul(a, ctx.variables["B"], p)
        out = ab
        for _ in range(k - 1):
            out = _matmul(out, ab, p)
        vals = _total(out, p)
    return Descriptor(np.asarray(vals, dtype=np.int64), ctx.context_id)


# Known efficient solutions for the two-matrix chain target, k = 2..6.
KNOWN_SUMABK_SOLUTIONS = {
    2: "sum((((((sum(A, 1)) * B) * A) * B)'), 1)",
    3: "sum((((((((sum(A, 1)) * B) * A) * B) * A) * B)'), 1)",
    4: "sum((((((((((sum(A, 1)) * B) * A) * B) * A) * B) * A) * B)'), 1)",
    5: "sum((((((((((((sum(A, 1)) * B) * A) * B) * A) * B) * A)  * B) * A) * B)'), 1)",
    6: "sum(((((((((((((sum(A, 1) * B) * A) * B) *A) * B) * A) * B)* A) * B) * A) * B)'), 1)",
}

KNOWN_SUMAB_SOLUTION = "sum((sum(A, 1) * B)', 1)"
SUMAB_TARGET = "sum(sum(A*B))"
