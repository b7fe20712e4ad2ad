import numpy as np
import pytest

from polyident.expr import parse
from polyident.families import KNOWN_SUMABK_SOLUTIONS, Family, TargetSpec
from polyident.neural import (RnnStrategy, Tape, TrainConfig, build_dataset, classifier_loss,
                              embed, head_examples, init_params, load_checkpoint,
                              rnn_score, save_checkpoint, train_classifier,
                              train_strategy_head)
from polyident.search import PartialForest

SQ = {"A": ("n", "n")}


@pytest.fixture(scope="module")
def ds2():
    return build_dataset(2)


def test_dataset_labels_follow_descriptors(ds2):
    by_string = {e.canonical_string: c for e, c in ds2.items}
    a = by_string.get("(((sum(A, 1)) * (sum(A, 2)))')")
    b = by_string.get("((sum(A, 1)) * (sum(A, 2)))")
    assert a is not None and a == b
    assert set(ds2.train).isdisjoint(ds2.test)
    assert sorted(ds2.train + ds2.test) == list(range(len(ds2.items)))
    # every test class also appears in training
    train_classes = {ds2.labels[i] for i in ds2.train}
    assert all(ds2.labels[i] in train_classes for i in ds2.test)


def test_dataset_deterministic(ds2):
    again = build_dataset(2)
    assert again.train == ds2.train and again.n_classes == ds2.n_classes


def test_identity_init_embeds_unary_chains_alike():
    p = init_params(8, noise=0.0)
    a = embed(p, parse("sum(sum(A, 1), 2)", SQ))
    b = embed(p, parse("sum((sum(A', 2))', 2)", SQ))
    assert np.allclose(a, b)
    assert a.shape == (8,)


def test_binary_contraction_matches_definition():
    p = init_params(3, seed=2, noise=0.5)
    e = parse("sum(A, 1) * sum(A, 2)", SQ)
    tape = Tape(p, [e])
    u = tape.child_h(e, 0)
    v = tape.child_h(e, 1)
    w = p.binary["MatVecMul"]
    want = np.maximum(np.einsum("ijk,j,k->i", w, u, v), 0)
    assert np.allclose(tape.root(e), want)


def _numeric_check(params, cw, cb, exprs, labels, per_array=6, seed=0):
    rng = np.random.default_rng(seed)
    _, grads = classifier_loss(params, cw, cb, exprs, labels)
    arrays = params.arrays()
    arrays.update({"cw": cw, "cb": cb})
    worst = 0.0
    for key, arr in arrays.items():
        if key not in grads:
            continue
        for _ in range(per_array):
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + 1e-6
            lp, _ = classifier_loss(params, cw, cb, exprs, labels, with_grads=False)
            arr[idx] = old - 1e-6
            lm, _ = classifier_loss(params, cw, cb, exprs, labels, with_grads=False)
            arr[idx] = old
            num = (lp - lm) / 2e-6
            an = grads[key][idx]
            if abs(num) + abs(an) > 1e-9:
                worst = max(worst, abs(num - an) / (abs(num) + abs(an)))
    return worst


def test_gradient_check(ds2):
    rng = np.random.default_rng(0)
    exprs = [ds2.exprs[i] for i in rng.choice(len(ds2.items), 20, replace=False)]
    p = init_params(4, seed=1, noise=0.3, exprs=exprs)
    labels = rng.integers(0, 3, len(exprs))
    cw, cb = rng.standard_normal((3, 4)), rng.standard_normal(3)
    assert _numeric_check(p, cw, cb, exprs, labels) < 1e-4


def test_classifier_fits_training_set(ds2):
    res = train_classifier([ds2], TrainConfig(epochs=40, seed=0))
    assert res.train_accuracy[2] > 0.9
    assert res.losses[2][-1] < res.losses[2][0]


def test_training_is_deterministic(ds2):
    a = train_classifier([ds2], TrainConfig(epochs=3, seed=4))
    b = train_classifier([ds2], TrainConfig(epochs=3, seed=4))
    assert a.losses == b.losses


def test_single_rule_head_converges():
    t = parse("sum(A, 1)", SQ)
    head = train_strategy_head([t], init_params(6), dropout_rate=0.0, epochs=300, lr=0.5)
    assert head.rules == ["ColSum"]
    with pytest.raises(ValueError):
        train_strategy_head([], init_params(6))


def test_head_examples_use_missing_second_child():
    ex = head_examples([parse("sum(A, 1) * sum(A, 2)", SQ)])
    keys = [k for _, _, k in ex]
    assert keys.count("ColSum") == 1 and keys.count("MatVecMul") == 1
    assert all(b2 is None for _, b2, k in ex if k != "MatVecMul")


def test_rnn_scores_normalize_per_operand_group():
    shapes = {"A": ("n", "m"), "B": ("m", "n")}
    sols = [parse(KNOWN_SUMABK_SOLUTIONS[k], shapes) for k in (2, 3)]
    strat = RnnStrategy.from_solutions(sols, init_params(8), dropout=0.0)
    f = PartialForest.for_target(TargetSpec(Family.SUMABK, 2))
    moves = f.legal_moves()
    s = strat.scores(f, moves)
    groups = {}
    for m, v in zip(moves, s):
        groups[m.operands] = groups.get(m.operands, 0.0) + v
    assert all(abs(v - 1.0) < 1e-9 for v in groups.values())
    assert abs(rnn_score(strat.params, strat.head, f, moves[0]) - s[0]) < 1e-9


def test_untrained_rnn_is_uniform():
    strat = RnnStrategy(init_params(4), None)
    f = PartialForest.for_target(TargetSpec(Family.AAT, 2))
    assert np.all(strat.scores(f, f.legal_moves()) == 1.0)


def test_checkpoint_roundtrip(tmp_path):
    t = parse("sum(A, 1) * sum(A, 2)", SQ)
    p = init_params(5, seed=3)
    head = train_strategy_head([t], p, 0.0, epochs=5)
    save_checkpoint(str(tmp_path), p, {"note": "x"}, head)
    q, h2, manifest = load_checkpoint(str(tmp_path))
    assert manifest["note"] == "x"
    assert np.allclose(embed(p, t), embed(q, t))
    assert h2.rules == head.rules and np.allclose(h2.U, head.U)
