"""Command-line front end.

Every artifact is JSON and carries the ``run_config`` that produced it.
Exit codes: 0 success, 1 nothing found or verification failed, 2 usage or
configuration error, 3 resource error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__
from .expr import EnumerationLimitError, GrammarConfig, monomial_str
from .families import Family, OracleBudgetError, TargetSpec
from .fingerprint import DEFAULT_PRIME, DescriptorDeduper, make_context
from .linsolve import SolutionCertificate, verify_certificate

EXIT_OK, EXIT_NONE_FOUND, EXIT_USAGE, EXIT_RESOURCE = 0, 1, 2, 3

log = logging.getLogger("polyident")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)
    version: str = __version__

    def to_json(self) -> dict:
        return {"command": self.command, "params": self.params, "version": self.version}


def artifact_root() -> str:
    return os.environ.get("POLYIDENT_ARTIFACTS", "artifacts")


def _out_dir(arg: str | None, command: str) -> str:
    path = arg or os.path.join(artifact_root(), f"{command}-{time.strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)


def parse_dims(items) -> dict:
    dims = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        if not sep or not value.isdigit() or int(value) < 1:
            raise UsageError(f"bad --dim {item!r}; expected NAME=POSITIVE_INT")
        dims[name] = int(value)
    return dims


def load_certificates(path: str) -> list[SolutionCertificate]:
    """Certificates from a certificate file, a discovery report or a list of either."""
    with open(path) as f:
        data = json.load(f)
    found = []

    def walk(d):
        if isinstance(d, list):
            for x in d:
                walk(x)
        elif isinstance(d, dict):
            if "weights" in d and "trees" in d:
                found.append(SolutionCertificate.from_json(d))
            else:
                for v in d.values():
                    walk(v)

    walk(data)
    return found


# --- commands ------------------------------------------------------------------

def cmd_discover(args) -> int:
    from .search import SearchBudget, curriculum_run

    k_min = args.k_min if args.k_min is not None else args.k
    k_max = args.k
    if k_max is None or k_min is None or k_min > k_max or k_min < 1:
        raise UsageError("need --k (and optionally --k-min <= --k)")
    dims = parse_dims(args.dim)
    seeds = load_certificates(args.seed_solutions) if args.seed_solutions else []
    kw = {}
    if args.strategy == "rnn":
        if args.checkpoint:
            from .neural import load_checkpoint
            kw["params"] = load_checkpoint(args.checkpoint)[0]
        kw["dropout"] = args.dropout
        kw["seed"] = args.seed
    elif args.strategy != "random" and not args.strategy.startswith("ngram"):
        raise UsageError(f"unknown strategy {args.strategy!r}")
    # build one target up front so bad dims fail before any search
    top = TargetSpec(args.family, k_max, dims)
    top.target_descriptor(make_context(top.variable_shapes, top.dims, 2, seed=0))
    cfg = RunConfig("discover", {
        "family": args.family, "k_min": k_min, "k_max": k_max, "strategy": args.strategy,
        "repetitions": args.reps, "budget_s": args.budget, "max_steps": args.max_steps,
        "seed": args.seed, "dims": dims, "temperature": args.temperature,
        "workers": args.workers, "seed_solutions": args.seed_solutions,
        "checkpoint": args.checkpoint})
    out = _out_dir(args.out, "discover")
    budget = SearchBudget(args.budget, rng_seed=args.seed, max_steps_per_tree=args.max_steps)
    report = curriculum_run(args.family, k_min, k_max, args.strategy, args.reps,
                            budget=budget, seed=args.seed, dims=dims,
                            temperature=args.temperature, workers=args.workers,
                            seed_solutions=seeds, strategy_kwargs=kw,
                            log=lambda m: print(m, flush=True))
    doc = report.to_json()
    doc["run_config"] = cfg.to_json()
    _write_json(os.path.join(out, "report.json"), doc)
    certs = [r.certificate.to_json() | {"run_config": cfg.to_json()}
             for rs in report.runs.values() for r in rs if r.success]
    _write_json(os.path.join(out, "certificates.json"), certs)
    for k in range(k_min, k_max + 1):
        print(f"k={k} success_fraction={report.success_fraction(k):.2f}")
    print(f"artifacts: {out}")
    return EXIT_OK if report.success_fraction(k_max) > 0 else EXIT_NONE_FOUND


def enumeration_counts(k_max: int, cap: int, *, n: int = 5, copies: int = 64,
                       seed: int = 0):
    """Scalar class counts for degrees 1..k_max of a square matrix under a complexity cap."""
    cfg = GrammarConfig((("A", ("n", "n")),), k_max, allow_matmul=cap >= 3,
                        complexity_cap=cap)
    ctx = make_context({"A": ("n", "n")}, {"n": n}, copies, DEFAULT_PRIME, seed)
    from .expr import enumerate_classes
    enum = enumerate_classes(cfg, DescriptorDeduper(ctx))
    return {k: enum.scalars(k) for k in range(1, k_max + 1)}


def cmd_enumerate(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    caps = [args.cap] if args.cap else [2, 3]
    cfg = RunConfig("enumerate", {"k_max": args.k, "caps": caps, "seed": args.seed})
    out = _out_dir(args.out, "enumerate")
    table, listing = {}, {}
    for cap in caps:
        counts = enumeration_counts(args.k, cap, seed=args.seed)
        label = f"O(n^{cap})"
        table[label] = {str(k): len(v) for k, v in counts.items()}
        listing[label] = {str(k): [e.canonical_string for e in v] for k, v in counts.items()}
    print("k    " + "  ".join(f"{c:>9}" for c in table))
    for k in range(1, args.k + 1):
        print(f"{k:<4} " + "  ".join(f"{table[c][str(k)]:>9}" for c in table))
    _write_json(os.path.join(out, "counts.json"), {"counts": table, "run_config": cfg.to_json()})
    _write_json(os.path.join(out, "expressions.json"),
                {"expressions": listing, "run_config": cfg.to_json()})
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    certs = load_certificates(args.path)
    if not certs:
        raise UsageError(f"no certificate found in {args.path}")
    second = parse_dims(args.second_dim) or None
    results = []
    ok_all = True
    for i, cert in enumerate(certs):
        rep = verify_certificate(cert, args.seeds, second_dims=second)
        ok = rep.passed_same_dims and rep.structurally_valid
        ok_all &= ok
        flags = []
        if rep.dimension_dependent:
            flags.append("dimension-dependent weights")
        print(f"[{i}] {TargetSpec.from_json(cert.target).target_id} "
              f"cost={monomial_str(cert.complexity)}: {'PASS' if ok else 'FAIL'}"
              + (f" ({', '.join(flags)})" if flags else ""))
        results.append(rep.to_json())
    if args.out:
        _write_json(args.out, {"reports": results, "run_config": RunConfig(
            "verify", {"path": args.path, "seeds": args.seeds, "second_dims": second}).to_json()})
    return EXIT_OK if ok_all else EXIT_NONE_FOUND


def cmd_train_embed(args) -> int:
    from .neural import TrainConfig, build_dataset, save_checkpoint, train_classifier

    if args.kmax < args.kmin or args.kmin < 1:
        raise UsageError("need 1 <= --kmin <= --kmax")
    tc = TrainConfig(l=args.l, lr=args.lr, epochs=args.epochs, seed=args.seed,
                     identity_init=not args.random_init)
    cfg = RunConfig("train-embed", {"kmin": args.kmin, "kmax": args.kmax,
                                    "train": tc.to_json()})
    out = _out_dir(args.out, "train-embed")
    datasets = [build_dataset(k, seed=args.seed) for k in range(args.kmin, args.kmax + 1)]
    res = train_classifier(datasets, tc, log=lambda m: print(m, flush=True))
    metrics = {"test_accuracy": {str(k): v for k, v in res.accuracy.items()},
               "train_accuracy": {str(k): v for k, v in res.train_accuracy.items()},
               "dataset": {str(d.k): {"expressions": len(d.items), "classes": d.n_classes,
                                      "train": len(d.train), "test": len(d.test)}
                           for d in datasets},
               "run_config": cfg.to_json()}
    save_checkpoint(os.path.join(out, "checkpoint"), res.params,
                    {"run_config": cfg.to_json()})
    _write_json(os.path.join(out, "metrics.json"), metrics)
    for k, v in sorted(res.accuracy.items()):
        print(f"k={k} test_accuracy={v:.4f}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_train_strategy(args) -> int:
    from .neural import load_checkpoint, save_checkpoint, train_strategy_head

    if not args.checkpoint or not os.path.isfile(os.path.join(args.checkpoint, "manifest.json")):
        raise UsageError("--checkpoint must name a directory written by train-embed")
    certs = load_certificates(args.solutions)
    if not certs:
        raise UsageError(f"no certificates in {args.solutions}")
    params, _, _ = load_checkpoint(args.checkpoint)
    head = train_strategy_head(certs, params, args.dropout, epochs=args.epochs, seed=args.seed)
    cfg = RunConfig("train-strategy", {"checkpoint": args.checkpoint,
                                       "solutions": args.solutions, "dropout": args.dropout,
                                       "epochs": args.epochs, "seed": args.seed})
    out = _out_dir(args.out, "train-strategy")
    save_checkpoint(os.path.join(out, "checkpoint"), params, {"run_config": cfg.to_json()}, head)
    print(f"head over {len(head.rules)} rules; artifacts: {out}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polyident", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("discover", help="search for cheaper equivalent expressions")
    d.add_argument("--family", required=True, choices=[f.value for f in Family])
    d.add_argument("--k", type=int, required=True, help="highest degree to attack")
    d.add_argument("--k-min", type=int, help="first curriculum degree (default: --k)")
    d.add_argument("--strategy", default="random", help="random, ngram:N or rnn")
    d.add_argument("--reps", type=int, default=1)
    d.add_argument("--budget", type=float, default=600.0, help="seconds per run")
    d.add_argument("--max-steps", type=int, help="step cap per tree")
    d.add_argument("--temperature", type=float, default=1.0)
    d.add_argument("--dim", action="append", help="NAME=INT, repeatable")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    d.add_argument("--seed-solutions", help="certificates to train the strategy on")
    d.add_argument("--checkpoint", help="rnn checkpoint directory")
    d.add_argument("--dropout", type=float, default=0.3)
    d.add_argument("--out")
    d.set_defaults(func=cmd_discover)

    e = sub.add_parser("enumerate", help="count scalar expression classes per degree")
    e.add_argument("--k", type=int, default=3)
    e.add_argument("--cap", type=int, choices=(2, 3))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_enumerate)

    v = sub.add_parser("verify", help="re-check certificates in fresh contexts")
    v.add_argument("path")
    v.add_argument("--seeds", type=int, nargs="+", default=[7, 8])
    v.add_argument("--second-dim", action="append", help="NAME=INT, repeatable")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train-embed", help="train the tree network on equivalence classes")
    t.add_argument("--kmin", type=int, default=2)
    t.add_argument("--kmax", type=int, default=3)
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--l", type=int, default=30)
    t.add_argument("--random-init", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train_embed)

    s = sub.add_parser("train-strategy", help="fit the rule head on solution trees")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--solutions", required=True)
    s.add_argument("--dropout", type=float, default=0.3)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_strategy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OracleBudgetError, EnumerationLimitError, MemoryError) as e:
        print(f"resource error: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
