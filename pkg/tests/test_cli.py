import csv
import json

import numpy as np
import pytest

from collective_ac import cli, trainer, validation

QUICK = {"batch_size": 4, "iterations": 4, "eval_interval": 2, "eval_samples": 4}
GRID = {"grid": {"width": 3, "height": 3, "initial_states": [0, 1], "goal_state": 8,
                 "horizon": 6, "population": 5}}


def write_config(tmp_path, name="cfg.json", **over):
    doc = {"domain": GRID, "observation": "o1", "train": dict(QUICK),
           "output_dir": str(tmp_path / "run")}
    for k, v in over.items():
        if k == "train":
            doc["train"].update(v)
        else:
            doc[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_train_writes_metrics_checkpoint_and_manifest(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--seed", "3"]) == 0
    out = tmp_path / "run"
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["iteration"] for r in rows] == ["2", "4"]
    assert list(rows[0]) == list(cli.METRIC_COLUMNS)
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 3 and len(man["config_sha256"]) == 64 and man["version"]
    assert (out / "checkpoint.npz").is_file()


def test_zero_iterations_gives_header_only(tmp_path):
    cfg = write_config(tmp_path, train={"iterations": 0})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "run" / "metrics.csv").read_text() == ",".join(cli.METRIC_COLUMNS) + "\n"


def test_identical_runs_give_identical_metrics(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(cfg), "--out", str(a), "--workers", "1"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(b), "--workers", "1"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["config_sha256"] == mb["config_sha256"]


def test_jsonl_metrics(tmp_path):
    cfg = write_config(tmp_path, metrics_format="jsonl", record_wall_time=True)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    recs = [json.loads(l) for l in open(tmp_path / "run" / "metrics.jsonl")]
    assert [r["iteration"] for r in recs] == [2, 4]
    assert all(set(r) == set(cli.METRIC_COLUMNS) for r in recs)
    assert all(r["elapsed_ms"] > 0 for r in recs)


@pytest.mark.parametrize("doc", [
    "{not json",
    json.dumps({"domain": {}}),
    json.dumps({"domain": {"grid": {}, "taxi": {}}}),
    json.dumps({"domain": GRID, "train": {"variant": "XX"}}),
    json.dumps({"domain": GRID, "train": {"batch_size": 0}}),
    json.dumps({"domain": GRID, "train": {"lr": 0.1}}),
    json.dumps({"domain": GRID, "observation": "o7"}),
    json.dumps({"domain": GRID, "metrics_format": "xml"}),
    json.dumps({"domain": {"grid": {"goal_state": 99}}}),
    json.dumps({"domain": {"taxi": {"demand_csv": "missing.csv"}}}),
    json.dumps({"domain": GRID, "colour": "blue"}),
])
def test_malformed_config_exits_2_without_outputs(tmp_path, doc, capsys):
    path = tmp_path / "bad.json"
    path.write_text(doc)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(path), "--out", str(out)]) == 2
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_unknown_command_exits_2():
    assert cli.main(["fly"]) == 2


def test_numeric_abort_exits_3(tmp_path, monkeypatch, capsys):
    def boom(*a, **kw):
        raise trainer.NumericalError("injected")

    monkeypatch.setattr(trainer, "actor_grad_factored", boom)
    cfg = write_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 3
    assert "checkpoint.npz" in capsys.readouterr().err


def test_evaluate(tmp_path, capsys):
    cfg = write_config(tmp_path, train={"iterations": 0})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    ck = str(tmp_path / "run" / "checkpoint.npz")
    capsys.readouterr()
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", ck, "--samples", "1"]) == 0
    assert "n/a" in capsys.readouterr().out
    assert cli.main(["evaluate", "--config", str(cfg), "--checkpoint", ck, "--samples", "30"]) == 0
    assert "+/-" in capsys.readouterr().out


def test_evaluate_untrained_matches_uniform_baseline(tmp_path, capsys):
    from collective_ac.countsim import evaluate_policy
    from collective_ac.domains import build_domain
    from collective_ac.model import ObservationModel
    from collective_ac.nets import Mlp, PolicyNet

    cfg = write_config(tmp_path, train={"iterations": 0})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()
    cli.main(["evaluate", "--config", str(cfg), "--checkpoint",
              str(tmp_path / "run" / "checkpoint.npz"), "--samples", "400"])
    got = float(capsys.readouterr().out.split()[1])
    m = build_domain(GRID)
    obs = ObservationModel.for_model(m, "o1")
    uniform = PolicyNet(Mlp((obs.input_dim(m), m.num_actions)))  # all-zero weights
    base, se = evaluate_policy(m, uniform, obs, 4000, np.random.default_rng(0))
    assert abs(got - base) < 5 * se * np.sqrt(4000 / 400) + 1e-9


def test_evaluate_mismatched_observation_exits_2(tmp_path):
    cfg = write_config(tmp_path, train={"iterations": 0})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    other = write_config(tmp_path, name="on.json", observation="oN")
    ck = str(tmp_path / "run" / "checkpoint.npz")
    assert cli.main(["evaluate", "--config", str(other), "--checkpoint", ck]) == 2
    assert cli.main(["evaluate", "--config", str(other), "--checkpoint", "nope.npz"]) == 2


def test_compare_single_matches_train(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "c"),
                     "--variant", "fAfC", "--seeds", "0"]) == 0
    assert (tmp_path / "t" / "metrics.csv").read_bytes() == \
        (tmp_path / "c" / "fAfC" / "seed0" / "metrics.csv").read_bytes()
    summary = list(csv.DictReader(open(tmp_path / "c" / "summary.csv")))
    assert len(summary) == 1 and summary[0]["variant"] == "fAfC"


def test_compare_several_variants(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "c"),
                     "--variant", "fAfC,AC", "--variant", "AfC", "--seeds", "0,1"]) == 0
    summary = list(csv.DictReader(open(tmp_path / "c" / "summary.csv")))
    assert {(r["variant"], r["seed"]) for r in summary} == \
        {(v, s) for v in ("fAfC", "AC", "AfC") for s in ("0", "1")}
    curves = list(csv.DictReader(open(tmp_path / "c" / "curves.csv")))
    assert len(curves) == 6 * 2


@pytest.mark.parametrize("args", [["--variant", "fAfC,fAfC"], ["--variant", "ZZ"],
                                  ["--seeds", "1,1"], ["--seeds", "a"]])
def test_compare_rejects_bad_lists(tmp_path, args):
    cfg = write_config(tmp_path)
    assert cli.main(["compare", "--config", str(cfg), *args]) == 2


def test_validate_passes_and_is_deterministic(capsys):
    assert cli.main(["validate", "--seed", "1"]) == 0
    first = capsys.readouterr().out.splitlines()
    assert len(first) == 5 and all(l.startswith("PASS") for l in first)
    assert cli.main(["validate", "--seed", "1"]) == 0
    assert capsys.readouterr().out.splitlines() == first
    assert cli.main(["validate", "--seed", "2"]) == 0
    assert all(l.startswith("PASS") for l in capsys.readouterr().out.splitlines())


def test_validate_catches_sign_flip(monkeypatch, capsys):
    real = trainer.actor_grad_factored
    monkeypatch.setattr(trainer, "actor_grad_factored", lambda *a, **kw: -real(*a, **kw))
    assert cli.main(["validate"]) == 1
    out, err = capsys.readouterr()
    assert "FAIL finite-difference gradients" in out
    assert "factored actor" in out and "finite-difference gradients" in err


def test_check_result_line():
    r = validation.CheckResult("x", False, 0.5, 0.1, "(detail)")
    assert r.line().startswith("FAIL x: 5.000e-01")
