import itertools

import numpy as np
import pytest

from polyident.expr import parse
from polyident.families import (KNOWN_SUMAB_SOLUTION, KNOWN_SUMABK_SOLUTIONS, Family,
                                OracleBudgetError, TargetSpec, aat_oracle, rbm1_oracle,
                                rbm2_oracle, sym_oracle)
from polyident.fingerprint import evaluate, make_context

P = 2_147_483_647


def newton_e(a, k, p):
    """e_k from power sums via Newton's identities, in Python integers."""
    ps = [sum(int(x) ** j for x in a) for j in range(k + 1)]
    e = [1]
    for m in range(1, k + 1):
        s = sum((-1) ** (i - 1) * e[m - i] * ps[i] for i in range(1, m + 1))
        assert s % m == 0
        e.append(s // m)
    return e[k] % p


@pytest.mark.parametrize("n", [1, 3, 5, 8])
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_sym_matches_newton(n, k):
    rng = np.random.default_rng(n * 10 + k)
    a = rng.integers(0, 50, size=n)
    assert int(sym_oracle(a, k, P)) == newton_e(a, k, P)


def test_sym_vanishes_above_n():
    assert int(sym_oracle(np.array([3, 4]), 3, P)) == 0


@pytest.mark.parametrize("n", [1, 2, 6, 12])
def test_rbm1_closed_form_k1(n):
    a = np.random.default_rng(n).integers(0, 1000, size=n)
    assert int(rbm1_oracle(a, 1, P)) == (2 ** (n - 1) * int(a.sum())) % P


def test_rbm1_budget():
    with pytest.raises(OracleBudgetError):
        rbm1_oracle(np.ones(16, dtype=np.int64), 1, P)


def test_rbm2_by_hand():
    # n = 1: only v = h = 1 contributes
    assert int(rbm2_oracle(np.array([[7]]), 3, P)) == 343
    a = np.array([[1, 2], [3, 4]])
    for k in (1, 2, 3):
        want = 0
        for v in itertools.product((0, 1), repeat=2):
            for h in itertools.product((0, 1), repeat=2):
                want += sum(v[i] * a[i, j] * h[j] for i in range(2) for j in range(2)) ** k
        assert int(rbm2_oracle(a, k, P)) == want % P
    # k = 1 closed form: each entry is counted for 4 of the 16 mask pairs
    assert int(rbm2_oracle(a, 1, P)) == 4 * 10


def test_rbm2_budget():
    with pytest.raises(OracleBudgetError):
        rbm2_oracle(np.ones((8, 8), dtype=np.int64), 1, P)


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_aat_matches_integer_power(k):
    a = np.random.default_rng(k).integers(0, 5, size=(4, 4))
    m = np.linalg.matrix_power(a @ a.T, k // 2)
    if k % 2:
        m = m @ a
    assert int(aat_oracle(a, k, False, P)) == int(m.sum()) % P


def test_elem_aat_even_and_odd():
    a = np.random.default_rng(0).integers(0, 5, size=(3, 3))
    b = a * a
    assert int(aat_oracle(a, 2, True, P)) == int((b @ a.T).sum())
    assert int(aat_oracle(a, 4, True, P)) == int((b @ a.T @ b @ a.T).sum())
    assert int(aat_oracle(a, 3, True, P)) == int((b @ a.T @ b).sum())
    assert int(aat_oracle(a, 3, True, P, alt_odd=True)) == int((b @ a.T @ b).sum())
    assert int(aat_oracle(a, 5, True, P, alt_odd=True)) == int((b @ a.T @ b @ a.T @ b).sum())


def test_leaf_counts():
    assert TargetSpec(Family.AAT, 6).leaf_counts == {"A": 6}
    assert TargetSpec(Family.AELEMAAT, 4).leaf_counts == {"A": 6}
    assert TargetSpec(Family.AELEMAAT, 3).leaf_counts == {"A": 5}
    assert TargetSpec(Family.AELEMAAT, 5, alt_odd=True).leaf_counts == {"A": 8}
    assert TargetSpec(Family.SUMABK, 3).leaf_counts == {"A": 3, "B": 3}


def test_matmul_policy():
    assert not TargetSpec(Family.AAT, 3).allow_matmul
    assert not TargetSpec(Family.SUMAB, 1).allow_matmul
    assert TargetSpec(Family.RBM2, 3).allow_matmul
    assert TargetSpec(Family.SYM, 3).naive_complexity() is None


def test_spec_json_roundtrip():
    s = TargetSpec(Family.AELEMAAT, 5, {"n": 4}, alt_odd=True)
    assert TargetSpec.from_json(s.to_json()) == s
    assert s.target_id == "elem-aat-alt:k=5"


def test_sym_dims_grow_with_k():
    assert TargetSpec(Family.SYM, 9).dims["n"] == 10


def _matches(spec, text, copies=8):
    ctx = make_context(spec.variable_shapes, spec.dims, copies, seed=2)
    e = parse(text, spec.variable_shapes)
    return np.array_equal(evaluate(e, ctx).values, spec.target_descriptor(ctx).values)


def test_known_sumab_solution():
    assert _matches(TargetSpec(Family.SUMAB, 1), KNOWN_SUMAB_SOLUTION)


@pytest.mark.parametrize("k", sorted(KNOWN_SUMABK_SOLUTIONS))
def test_known_sumabk_solutions(k):
    spec = TargetSpec(Family.SUMABK, k)
    assert _matches(spec, KNOWN_SUMABK_SOLUTIONS[k])
    e = parse(KNOWN_SUMABK_SOLUTIONS[k], spec.variable_shapes)
    assert len(e.complexity) == 2


def test_sym_small_identity():
    # e_2 = ((sum a)^2 - sum a^2) / 2, the weights being 1/2 and -1/2
    spec = TargetSpec(Family.SYM, 2, {"n": 5})
    ctx = make_context(spec.variable_shapes, spec.dims, 8, seed=0)
    s = evaluate(parse("sum(A, 1) .* sum(A, 1)", spec.variable_shapes), ctx).values
    q = evaluate(parse("A' * A", spec.variable_shapes), ctx).values
    half = pow(2, P - 2, P)
    assert np.array_equal((s - q) % P * half % P, spec.target_descriptor(ctx).values)
