import numpy as np
import pytest

from polyident.expr import parse
from polyident.fingerprint import (DEFAULT_PRIME, ContextMismatch, DescriptorDeduper,
                                   evaluate, evaluate_value, inverse_mod, is_prime,
                                   make_context, matmul_mod, normalized_key, powmod)
from identities import PAIRS, SCALED_PAIRS


def _int_matmul(x, y, p):
    """Exact product through Python integers."""
    out = np.zeros((x.shape[0], y.shape[1]), dtype=object)
    for i in range(x.shape[0]):
        for j in range(y.shape[1]):
            out[i, j] = sum(int(x[i, k]) * int(y[k, j]) for k in range(x.shape[1])) % p
    return out.astype(np.int64)


def test_prime_default():
    assert DEFAULT_PRIME == 2**31 - 1 and is_prime(DEFAULT_PRIME)
    assert not is_prime(2**31 + 1)


def test_matmul_mod_near_p():
    p = DEFAULT_PRIME
    rng = np.random.default_rng(0)
    x = p - 1 - rng.integers(0, 3, size=(2, 7, 5))
    y = p - 1 - rng.integers(0, 3, size=(2, 5, 4))
    got = matmul_mod(x, y, p)
    for c in range(2):
        assert np.array_equal(got[c], _int_matmul(x[c], y[c], p))
    assert got.min() >= 0 and got.max() < p


def test_powmod_and_inverse():
    p = 1_000_003
    x = np.array([2, 3, p - 1], dtype=np.int64)
    assert powmod(x, 5, p).tolist() == [pow(int(v), 5, p) for v in x]
    assert (x * inverse_mod(x, p) % p).tolist() == [1, 1, 1]


@pytest.mark.parametrize("shapes,left,right", PAIRS)
def test_identity_pairs(shapes, left, right):
    dims = {d: 4 + i for i, d in enumerate(sorted({d for s in shapes.values() for d in s} - {"1"}))}
    ctx = make_context(shapes, dims, copies=16, seed=3)
    a, b = parse(left, shapes), parse(right, shapes)
    assert np.array_equal(evaluate_value(a, ctx), evaluate_value(b, ctx))


@pytest.mark.parametrize("shapes,left,right", SCALED_PAIRS)
def test_scaled_pairs_share_normalized_key(shapes, left, right):
    ctx = make_context(shapes, {"n": 5}, copies=16, seed=3)
    va = evaluate_value(parse(left, shapes), ctx)
    vb = evaluate_value(parse(right, shapes), ctx)
    assert not np.array_equal(va, vb)
    assert normalized_key(va, ctx.prime) == normalized_key(vb, ctx.prime)


def test_evaluation_matches_integer_arithmetic():
    shapes = {"A": ("n", "m"), "B": ("m", "p")}
    ctx = make_context(shapes, {"n": 3, "m": 4, "p": 2}, copies=5, seed=1)
    e = parse("sum(sum((A * B) .* (A * B), 1), 2)", shapes)
    got = evaluate(e, ctx).values
    for c in range(5):
        ab = _int_matmul(ctx.variables["A"][c], ctx.variables["B"][c], ctx.prime)
        want = sum(int(v) * int(v) for v in ab.ravel()) % ctx.prime
        assert got[c] == want


def test_distinct_expressions_differ():
    ctx = make_context({"A": ("n", "n")}, {"n": 4}, copies=8, seed=0)
    a = evaluate(parse("sum(sum(A * A, 1), 2)", {"A": ("n", "n")}), ctx)
    b = evaluate(parse("sum(sum(A .* A, 1), 2)", {"A": ("n", "n")}), ctx)
    assert a != b


def test_context_mismatch():
    s = {"A": ("n", "n")}
    e = parse("sum(sum(A, 1), 2)", s)
    d1 = evaluate(e, make_context(s, {"n": 3}, 4, seed=1))
    d2 = evaluate(e, make_context(s, {"n": 3}, 4, seed=2))
    with pytest.raises(ContextMismatch):
        _ = d1 == d2


def test_context_deterministic_and_validated():
    s = {"A": ("n", "n")}
    c1, c2 = make_context(s, {"n": 3}, 4, seed=9), make_context(s, {"n": 3}, 4, seed=9)
    assert c1.context_id == c2.context_id
    assert np.array_equal(c1.variables["A"], c2.variables["A"])
    with pytest.raises(ValueError):
        make_context(s, {"n": 3}, 4, prime=10)
    with pytest.raises(ValueError):
        make_context(s, {}, 4)


def test_deduper_proportional_and_exact():
    s = {"A": ("n", "n")}
    ctx = make_context(s, {"n": 5}, 8, seed=0)
    x = parse("sum(A, 1)", s)
    y = parse("sum(repmat(sum(A, 1), n, 1), 1)", s)
    d = DescriptorDeduper(ctx)
    assert d.admit(x) and not d.admit(y)
    e = DescriptorDeduper(ctx, exact=True)
    assert e.admit(x) and e.admit(y)


def test_no_monomial_collisions():
    ctx = make_context({"A": ("n", "n")}, {"n": 4}, copies=32, seed=11)
    flat = ctx.variables["A"].reshape(32, -1)
    p = ctx.prime
    rng = np.random.default_rng(5)
    seen = {}
    for _ in range(2000):
        k = int(rng.integers(1, 7))
        idx = tuple(sorted(rng.integers(0, 16, size=k).tolist()))
        v = np.ones(32, dtype=np.int64)
        for i in idx:
            v = v * flat[:, i] % p
        key = v.tobytes()
        assert seen.setdefault(key, idx) == idx
