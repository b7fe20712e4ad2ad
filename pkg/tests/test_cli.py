import json
import os

from polyident.cli import main


def test_unknown_family_is_usage_error(capsys):
    assert main(["discover", "--family", "nope", "--k", "2"]) == 2


def test_bad_dim_is_usage_error(tmp_path):
    assert main(["discover", "--family", "sum-ab", "--k", "1", "--dim", "n=zero",
                 "--out", str(tmp_path)]) == 2


def test_oracle_budget_is_resource_error(tmp_path):
    assert main(["discover", "--family", "rbm2", "--k", "2", "--dim", "n=9",
                 "--out", str(tmp_path)]) == 3


def test_discover_then_verify(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["discover", "--family", "sum-ab", "--k", "1", "--strategy", "random",
               "--budget", "60", "--workers", "1", "--out", str(out)])
    assert rc == 0
    certs = json.loads((out / "certificates.json").read_text())
    assert certs and certs[0]["run_config"]["params"]["family"] == "sum-ab"
    report = json.loads((out / "report.json").read_text())
    assert report["run_config"]["command"] == "discover"
    assert main(["verify", str(out / "certificates.json")]) == 0
    assert "PASS" in capsys.readouterr().out

    certs[0]["weights"] = [w + 1 for w in certs[0]["weights"]]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(certs[0]))
    assert main(["verify", str(bad)]) == 1


def test_none_found_exit(tmp_path):
    rc = main(["discover", "--family", "rbm2", "--k", "6", "--budget", "2",
               "--workers", "1", "--out", str(tmp_path)])
    assert rc == 1


def test_enumerate_writes_counts(tmp_path, capsys):
    assert main(["enumerate", "--k", "2", "--out", str(tmp_path)]) == 0
    counts = json.loads((tmp_path / "counts.json").read_text())
    assert counts["counts"]["O(n^2)"]["1"] == 1
    assert counts["run_config"]["params"]["k_max"] == 2
    assert os.path.exists(tmp_path / "expressions.json")


def test_train_strategy_needs_checkpoint(tmp_path):
    assert main(["train-strategy", "--checkpoint", str(tmp_path / "missing"),
                 "--solutions", "x.json"]) == 2


def test_train_embed_and_strategy(tmp_path):
    out = tmp_path / "emb"
    assert main(["train-embed", "--kmin", "1", "--kmax", "2", "--epochs", "3",
                 "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["test_accuracy"]) == {"1", "2"}
    sol = tmp_path / "sol.json"
    assert main(["discover", "--family", "aat", "--k", "2", "--budget", "60",
                 "--workers", "1", "--out", str(tmp_path / "d")]) == 0
    sol.write_text((tmp_path / "d" / "certificates.json").read_text())
    assert main(["train-strategy", "--checkpoint", str(out / "checkpoint"),
                 "--solutions", str(sol), "--epochs", "5",
                 "--out", str(tmp_path / "st")]) == 0
    assert os.path.exists(tmp_path / "st" / "checkpoint" / "arrays.npz")
