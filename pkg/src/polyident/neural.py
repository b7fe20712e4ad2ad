"""Recursive tree network: equivalence-class embeddings and a rule-predicting head.

Every node maps its children's l-vectors to an l-vector: a unary node applies
``relu(W v)`` and a binary node applies ``relu(sum_jk W[i,j,k] u[j] v[k])``.
Leaves map to one learned vector per variable.  Gradients are hand-written;
a batch of trees is processed as a DAG so shared subtrees are computed once.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expr, GrammarConfig, Rule, enumerate_classes
from .fingerprint import (DescriptorDeduper, EvalContext, evaluate_value, make_context,
                          normalized_key)


class DivergenceError(RuntimeError):
    pass


def node_key(e: Expr) -> str:
    """Parameter group for a node: the rule, plus the target for repeats."""
    if e.target is not None:
        return f"{e.rule.value}[{e.target[0]},{e.target[1]}]"
    return e.rule.value


# --- dataset --------------------------------------------------------------------

@dataclass
class ExprDataset:
    k: int
    items: list[tuple[Expr, int]]
    n_classes: int
    train: list[int]
    test: list[int]

    @property
    def exprs(self) -> list[Expr]:
        return [e for e, _ in self.items]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.items], dtype=np.int64)


def dataset_config(k: int, variables=(("A", ("n", "n")),), allow_matmul: bool = True) -> GrammarConfig:
    return GrammarConfig(tuple(variables), k, allow_matmul=allow_matmul)


def build_dataset(k: int, ctx: EvalContext | None = None, *, seed: int = 0,
                  allow_matmul: bool = True, test_fraction: float = 0.2,
                  up_to_scale: bool = True) -> ExprDataset:
    """Scalar degree-k trees labeled by descriptor, split per class.

    With ``up_to_scale`` two trees share a label when their descriptors differ
    by a constant factor (``sum(repmat(x, n, 1))`` and ``x`` do), otherwise
    only when they are equal.

    The trees are every scalar combination built from lower-degree class
    representatives.  Each class with at least two members sends about
    ``test_fraction`` of them (at least one) to the test split; singleton
    classes are train-only.
    """
    cfg = dataset_config(k, allow_matmul=allow_matmul)
    if ctx is None:
        ctx = make_context(dict(cfg.variables), {"n": 5}, copies=8, seed=seed)
    enum = enumerate_classes(cfg, DescriptorDeduper(ctx),
                             keep_candidates=lambda e: e.is_scalar)
    exprs = sorted({e.canonical_string: e for e in enum.candidates}.values(),
                   key=lambda e: e.canonical_string)
    labels: dict = {}
    items = []
    memo: dict = {}
    for e in exprs:
        v = evaluate_value(e, ctx, memo)
        key = normalized_key(v, ctx.prime) if up_to_scale else v.tobytes()
        items.append((e, labels.setdefault(key, len(labels))))
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, (_, c) in enumerate(items):
        by_class.setdefault(c, []).append(i)
    train, test = [], []
    for c in sorted(by_class):
        idx = by_class[c]
        if len(idx) < 2:
            train += idx
            continue
        perm = rng.permutation(idx).tolist()
        n_test = max(1, int(round(test_fraction * len(idx))))
        test += perm[:n_test]
        train += perm[n_test:]
    return ExprDataset(k, items, len(labels), sorted(train), sorted(test))


# --- parameters -------------------------------------------------------------------

@dataclass
class RnnParams:
    l: int
    leaves: dict[str, np.ndarray]           # variable name -> (l,)
    unary: dict[str, np.ndarray]            # node key -> (l, l)
    binary: dict[str, np.ndarray]           # node key -> (l, l, l)
    seed: int = 0
    curriculum_k: list[int] = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"leaf:{k}": v for k, v in self.leaves.items()}
        out.update({f"unary:{k}": v for k, v in self.unary.items()})
        out.update({f"binary:{k}": v for k, v in self.binary.items()})
        return out

    def copy(self) -> "RnnParams":
        return RnnParams(self.l, {k: v.copy() for k, v in self.leaves.items()},
                         {k: v.copy() for k, v in self.unary.items()},
                         {k: v.copy() for k, v in self.binary.items()},
                         self.seed, list(self.curriculum_k))

    def ensure(self, e: Expr, rng: np.random.Generator | None = None, noise: float = 0.0):
        """Create identity-initialized weights for node kinds first seen in ``e``."""
        rng = rng or np.random.default_rng(self.seed)
        for node in e.nodes():
            if node.rule is Rule.VARIABLE:
                if node.name not in self.leaves:
                    self.leaves[node.name] = _leaf_init(self.l, rng)
            elif node.rule.arity == 1:
                self.unary.setdefault(node_key(node), _unary_init(self.l, rng, noise, True))
            else:
                self.binary.setdefault(node_key(node), _binary_init(self.l, rng, noise, True))


def _leaf_init(l, rng):
    return 1.0 + 0.1 * rng.standard_normal(l)


def _unary_init(l, rng, noise, identity):
    if identity:
        return np.eye(l) + noise * rng.standard_normal((l, l))
    return rng.standard_normal((l, l)) / np.sqrt(l)


def _binary_init(l, rng, noise, identity):
    if identity:
        w = np.zeros((l, l, l))
        idx = np.arange(l)
        w[idx, idx, idx] = 1.0          # z = u * v elementwise
        return w + noise * rng.standard_normal((l, l, l))
    return rng.standard_normal((l, l, l)) / l


def init_params(l: int = 30, variables: Sequence[str] = ("A",), seed: int = 0,
                noise: float = 0.01, identity: bool = True,
                exprs: Sequence[Expr] = ()) -> RnnParams:
    """Identity weights plus Gaussian noise, or a scaled random init when ``identity`` is False."""
    rng = np.random.default_rng(seed)
    p = RnnParams(l, {v: _leaf_init(l, rng) for v in variables}, {}, {}, seed)
    for rule in (Rule.TRANSPOSE, Rule.COLSUM, Rule.ROWSUM):
        p.unary[rule.value] = _unary_init(l, rng, noise, identity)
    for rule in (Rule.MATMUL, Rule.ELEMMUL, Rule.MATVECMUL):
        p.binary[rule.value] = _binary_init(l, rng, noise, identity)
    for e in exprs:
        for node in e.nodes():
            if node.rule in (Rule.COLREPEAT, Rule.ROWREPEAT, Rule.ELEMREPEAT):
                p.unary.setdefault(node_key(node), _unary_init(l, rng, noise, identity))
            elif node.rule is Rule.VARIABLE and node.name not in p.leaves:
                p.leaves[node.name] = _leaf_init(l, rng)
    return p


# --- forward / backward over a DAG -----------------------------------------------------

class Tape:
    """Forward values of every distinct node in a batch, in topological order."""

    def __init__(self, params: RnnParams, roots: Sequence[Expr],
                 dropout: float = 0.0, rng: np.random.Generator | None = None):
        self.params = params
        self.order: list[Expr] = []
        self.index: dict[str, int] = {}
        for r in roots:
            self._visit(r)
        n, l = len(self.order), params.l
        self.h = np.zeros((n, l))
        self.masks = None
        if dropout > 0:
            keep = 1.0 - dropout
            self.masks = (rng.random((n, l)) < keep) / keep
        for i, node in enumerate(self.order):
            self.h[i] = self._forward(node, i)

    def _visit(self, e: Expr) -> int:
        s = e.canonical_string
        i = self.index.get(s)
        if i is not None:
            return i
        for c in e.children:
            self._visit(c)
        self.index[s] = len(self.order)
        self.order.append(e)
        return self.index[s]

    def child_h(self, node: Expr, j: int) -> np.ndarray:
        return self.h[self.index[node.children[j].canonical_string]]

    def _forward(self, node: Expr, i: int) -> np.ndarray:
        p = self.params
        if node.rule is Rule.VARIABLE:
            out = p.leaves[node.name].copy()
        elif node.rule.arity == 1:
            out = np.maximum(p.unary[node_key(node)] @ self.child_h(node, 0), 0.0)
        else:
            w = p.binary[node_key(node)]
            u, v = self.child_h(node, 0), self.child_h(node, 1)
            out = np.maximum((w @ v) @ u, 0.0)
        if self.masks is not None and node.rule is not Rule.VARIABLE:
            out = out * self.masks[i]
        return out

    def root(self, e: Expr) -> np.ndarray:
        return self.h[self.index[e.canonical_string]]

    def backward(self, root_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Gradients w.r.t. every parameter array, keyed as in ``RnnParams.arrays``."""
        p = self.params
        g = np.zeros_like(self.h)
        for s, gr in root_grads.items():
            g[self.index[s]] += gr
        grads: dict[str, np.ndarray] = {}

        def acc(key, val):
            if key in grads:
                grads[key] += val
            else:
                grads[key] = val.copy()

        for i in range(len(self.order) - 1, -1, -1):
            node = self.order[i]
            gi = g[i]
            if not gi.any():
                continue
            if node.rule is Rule.VARIABLE:
                acc(f"leaf:{node.name}", gi)
                continue
            if self.masks is not None:
                gi = gi * self.masks[i]
            gi = gi * (self.h[i] > 0)     # relu; masked zeros stay zero
            if node.rule.arity == 1:
                w = p.unary[node_key(node)]
                c = self.index[node.children[0].canonical_string]
                acc(f"unary:{node_key(node)}", np.outer(gi, self.h[c]))
                g[c] += w.T @ gi
            else:
                w = p.binary[node_key(node)]
                a = self.index[node.children[0].canonical_string]
                b = self.index[node.children[1].canonical_string]
                u, v = self.h[a], self.h[b]
                acc(f"binary:{node_key(node)}", gi[:, None, None] * u[None, :, None] * v[None, None, :])
                g[a] += (w @ v).T @ gi
                g[b] += np.einsum("i,j,ijk->k", gi, u, w)
        return grads


def embed(params: RnnParams, e: Expr) -> np.ndarray:
    """Root vector of ``e``."""
    return Tape(params, [e]).root(e)


def embed_many(params: RnnParams, exprs: Sequence[Expr]) -> np.ndarray:
    tape = Tape(params, exprs)
    return np.stack([tape.root(e) for e in exprs]) if exprs else np.zeros((0, params.l))


# --- softmax classifier ------------------------------------------------------------------

def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def classifier_loss(params: RnnParams, cw: np.ndarray, cb: np.ndarray,
                    exprs: Sequence[Expr], labels: np.ndarray, *, with_grads: bool = True):
    """Mean cross-entropy of the classifier over ``exprs`` and its gradients."""
    tape = Tape(params, exprs)
    x = np.stack([tape.root(e) for e in exprs])
    probs = softmax(x @ cw.T + cb)
    n = len(exprs)
    loss = -np.mean(np.log(probs[np.arange(n), labels] + 1e-300))
    if not with_grads:
        return loss, None
    dz = probs
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    grads = {"cw": dz.T @ x, "cb": dz.sum(axis=0)}
    dx = dz @ cw
    root_grads: dict[str, np.ndarray] = {}
    for e, gx in zip(exprs, dx):
        s = e.canonical_string
        root_grads[s] = root_grads.get(s, 0) + gx
    grads.update(tape.backward(root_grads))
    return loss, grads


@dataclass
class TrainConfig:
    l: int = 30
    lr: float = 0.01
    classifier_lr_mult: float = 100.0
    epochs: int = 60
    batch_size: int = 32
    noise: float = 0.01
    identity_init: bool = True
    momentum: float = 0.0
    clip: float = 5.0
    weight_decay: float = 0.0     # pulls node weights back toward their initial values
    seed: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ClassifierResult:
    params: RnnParams
    accuracy: dict          # k -> test accuracy
    train_accuracy: dict
    losses: dict            # k -> per-epoch mean train loss
    classifiers: dict       # k -> (cw, cb)


def accuracy(params: RnnParams, cw, cb, exprs, labels) -> float:
    if len(exprs) == 0:
        return float("nan")
    x = embed_many(params, exprs)
    return float(np.mean(np.argmax(x @ cw.T + cb, axis=1) == labels))


def train_classifier(datasets: Sequence[ExprDataset], cfg: TrainConfig | None = None,
                     params: RnnParams | None = None, log=None) -> ClassifierResult:
    """Curriculum over the datasets in order, with a fresh classifier per degree.

    Plain SGD (momentum optional); the classifier's step is ``classifier_lr_mult``
    times the base rate, and leaf vectors are trained along with the weights.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    all_exprs = [e for ds in datasets for e in ds.exprs]
    if params is None:
        params = init_params(cfg.l, seed=cfg.seed, noise=cfg.noise,
                             identity=cfg.identity_init, exprs=all_exprs)
    else:
        params = params.copy()
        for e in all_exprs:
            params.ensure(e, rng, cfg.noise)
    anchor = {k: v.copy() for k, v in params.arrays().items()}
    acc, tr_acc, losses, heads = {}, {}, {}, {}
    for ds in datasets:
        exprs = ds.exprs
        labels = ds.labels
        cw = 0.01 * rng.standard_normal((ds.n_classes, cfg.l))
        cb = np.zeros(ds.n_classes)
        vel: dict[str, np.ndarray] = {}
        train = np.array(ds.train)
        losses[ds.k] = []
        for epoch in range(cfg.epochs):
            perm = rng.permutation(train)
            tot = 0.0
            for s in range(0, len(perm), cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                loss, grads = classifier_loss(params, cw, cb, [exprs[i] for i in idx], labels[idx])
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at k={ds.k}, epoch {epoch}")
                tot += loss * len(idx)
                _sgd_step(params, {"cw": cw, "cb": cb}, grads, vel, cfg, anchor)
            losses[ds.k].append(tot / max(len(train), 1))
            if log is not None and (epoch % 10 == 9 or epoch == cfg.epochs - 1):
                log(f"k={ds.k} epoch={epoch + 1} loss={losses[ds.k][-1]:.4f}")
        test = np.array(ds.test, dtype=np.int64)
        acc[ds.k] = accuracy(params, cw, cb, [exprs[i] for i in test], labels[test])
        tr_acc[ds.k] = accuracy(params, cw, cb, [exprs[i] for i in train], labels[train])
        heads[ds.k] = (cw, cb)
        params.curriculum_k.append(ds.k)
    return ClassifierResult(params, acc, tr_acc, losses, heads)


def _sgd_step(params: RnnParams, head: dict, grads: dict, vel: dict, cfg: TrainConfig,
              anchor: dict | None = None):
    arrays = params.arrays()
    arrays.update(head)
    for key, g in grads.items():
        if cfg.weight_decay and anchor is not None and key in anchor:
            g = g + cfg.weight_decay * (arrays[key] - anchor[key])
        lr = cfg.lr * (cfg.classifier_lr_mult if key in head else 1.0)
        norm = np.linalg.norm(g)
        if norm > cfg.clip:
            g = g * (cfg.clip / norm)
        v = vel.get(key)
        v = g if v is None else cfg.momentum * v + g
        vel[key] = v
        arrays[key] -= lr * v


# --- strategy head -----------------------------------------------------------------------

@dataclass
class StrategyHead:
    rules: list[str]          # node keys the head can predict
    U: np.ndarray             # (|rules|, 2l)
    bias: np.ndarray
    b2: np.ndarray            # stands in for the missing second child of unary nodes
    dropout: float = 0.0

    def logits(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        return np.concatenate([x1, x2], axis=-1) @ self.U.T + self.bias

    def to_json(self) -> dict:
        return {"rules": self.rules, "dropout": self.dropout}


def head_examples(trees: Sequence[Expr]) -> list[tuple[Expr, Expr | None, str]]:
    """(left child, right child or None, node key) for every internal node."""
    out = []
    for t in trees:
        for node in t.nodes():
            if node.rule is Rule.VARIABLE:
                continue
            b2 = node.children[1] if len(node.children) == 2 else None
            out.append((node.children[0], b2, node_key(node)))
    return out


def train_strategy_head(solutions: Sequence, params: RnnParams, dropout_rate: float = 0.3,
                        *, epochs: int = 200, lr: float = 0.1, seed: int = 0,
                        rules: Sequence[str] | None = None) -> StrategyHead:
    """Softmax over rule keys from concatenated child embeddings.

    Dropout masks every node activation of the child embeddings,
    resampled each epoch.  Only the head is trained.
    """
    from .search import _solution_trees
    trees = _solution_trees(solutions)
    if not trees:
        raise ValueError("strategy head training needs at least one solution tree")
    params = params.copy()
    rng = np.random.default_rng(seed)
    for t in trees:
        params.ensure(t, rng)
    examples = head_examples(trees)
    keys = sorted(set(rules or []) | {k for _, _, k in examples})
    col = {k: i for i, k in enumerate(keys)}
    l = params.l
    b2 = rng.standard_normal(l)
    U = np.zeros((len(keys), 2 * l))
    bias = np.zeros(len(keys))
    y = np.array([col[k] for _, _, k in examples])
    roots = [c for c1, c2, _ in examples for c in (c1, c2) if c is not None]
    n = len(examples)
    for _ in range(epochs):
        tape = Tape(params, roots, dropout_rate, rng)
        x = np.stack([np.concatenate([tape.root(c1), b2 if c2 is None else tape.root(c2)])
                      for c1, c2, _ in examples])
        probs = softmax(x @ U.T + bias)
        probs[np.arange(n), y] -= 1.0
        U -= lr * probs.T @ x / n
        bias -= lr * probs.sum(axis=0) / n
    return StrategyHead(keys, U, bias, b2, dropout_rate)


class RnnStrategy:
    """Scores each move by the head's probability of its rule, among rules legal for its operands."""

    name = "rnn"

    def __init__(self, params: RnnParams, head: StrategyHead | None):
        self.params = params
        self.head = head
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_solutions(cls, solutions: Sequence, params: RnnParams | None = None,
                       dropout: float = 0.3, seed: int = 0, **kw) -> "RnnStrategy":
        if params is None:
            params = init_params(seed=seed)
        head = train_strategy_head(solutions, params, dropout, seed=seed) if solutions else None
        return cls(params, head)

    def _embed(self, e: Expr) -> np.ndarray:
        s = e.canonical_string
        v = self._cache.get(s)
        if v is None:
            self.params.ensure(e)
            v = embed(self.params, e)
            self._cache[s] = v
        return v

    def scores(self, forest, moves) -> np.ndarray:
        if self.head is None:
            return np.ones(len(moves))
        h = self.head
        col = {k: i for i, k in enumerate(h.rules)}
        groups: dict[tuple, list[int]] = {}
        for i, m in enumerate(moves):
            groups.setdefault(m.operands, []).append(i)
        out = np.zeros(len(moves))
        for ops, idx in groups.items():
            nodes = [moves[i].node for i in idx]
            x1 = self._embed(nodes[0].children[0])
            x2 = self._embed(nodes[0].children[1]) if len(ops) == 2 else h.b2
            z = h.logits(x1, x2)
            # rules unseen in training get the lowest logit on offer
            zs = np.array([z[col[node_key(n)]] if node_key(n) in col else z.min() for n in nodes])
            out[idx] = softmax(zs)
        return out


def rnn_score(params: RnnParams, head: StrategyHead, forest, move) -> float:
    strategy = RnnStrategy(params, head)
    moves = forest.legal_moves()
    scores = strategy.scores(forest, moves)
    for m, s in zip(moves, scores):
        if m.node == move.node:
            return float(s)
    raise ValueError("move is not legal in this forest")


# --- checkpoints -----------------------------------------------------------------------------

def save_checkpoint(path: str, params: RnnParams, extra: dict | None = None,
                    head: StrategyHead | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    arrays = {k: v for k, v in params.arrays().items()}
    if head is not None:
        arrays.update({"head:U": head.U, "head:bias": head.bias, "head:b2": head.b2})
    np.savez(os.path.join(path, "arrays.npz"), **arrays)
    manifest = {"l": params.l, "seed": params.seed, "curriculum_k": params.curriculum_k,
                "leaves": sorted(params.leaves), "unary": sorted(params.unary),
                "binary": sorted(params.binary),
                "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    if head is not None:
        manifest["head"] = head.to_json()
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_checkpoint(path: str) -> tuple[RnnParams, StrategyHead | None, dict]:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    with np.load(os.path.join(path, "arrays.npz")) as z:
        arrays = {k: z[k] for k in z.files}
    pick = lambda prefix: {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + ":")}
    params = RnnParams(int(manifest["l"]), pick("leaf"), pick("unary"), pick("binary"),
                       int(manifest.get("seed", 0)), list(manifest.get("curriculum_k", [])))
    head = None
    if "head" in manifest:
        h = manifest["head"]
        head = StrategyHead(list(h["rules"]), arrays["head:U"], arrays["head:bias"],
                            arrays["head:b2"], float(h.get("dropout", 0.0)))
    return params, head, manifest
