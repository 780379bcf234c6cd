"""CLI: every subcommand end to end on a tiny synthetic corpus."""

import json
import socket
import threading

import pytest

import fedhar.data as D
from fedhar.cli import main
from fedhar.wire import load_checkpoint

GEN = ["--subjects", "6", "--minutes", "96", "--features", "6",
       "--labels", "3", "--alpha", "0.5", "--seed", "1"]
TINY_MODEL = ["--layers", "1", "--hidden", "8", "--n-positions", "8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus + fold plan + one pretrained base checkpoint, built once."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["gen-synthetic", "--out", str(corpus)] + GEN) == 0
    plan = root / "folds.json"
    assert main(["make-folds", "--data", str(corpus), "--out", str(plan),
                 "--n-folds", "3", "--seed", "0"]) == 0
    ckpts = root / "ckpts"
    ckpts.mkdir()
    base = ckpts / "base_fold0.ckpt"
    assert main(["pretrain", "--data", str(corpus), "--out", str(base),
                 "--fold-plan", str(plan), "--fold", "0",
                 "--epochs", "3", "--lr", "1e-2", "--batch-size", "8",
                 "--seed", "0"] + TINY_MODEL) == 0
    return {"root": root, "corpus": corpus, "plan": plan,
            "ckpts": ckpts, "base": base}


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ------------------------------------------------------------ generate

def test_gen_synthetic_outputs(workspace, tmp_path):
    corpus = workspace["corpus"]
    records = D.load_subject_dir(str(corpus))
    assert len(records) == 6
    assert records[0].features.shape == (96, 6)
    assert records[0].labels.shape == (96, 3)

    manifest = read_json(corpus / "manifest.json")
    assert manifest["command"] == "gen-synthetic"
    assert manifest["seed"] == 1
    assert len(manifest["outputs"]) == 6
    assert manifest["package_version"]


def test_gen_synthetic_is_deterministic(workspace, tmp_path):
    again = tmp_path / "again"
    assert main(["gen-synthetic", "--out", str(again)] + GEN) == 0
    for path in sorted(workspace["corpus"].glob("*.csv")):
        assert (again / path.name).read_bytes() == path.read_bytes()


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["gen-synthetic", "--out", "x", "--subjects", "0"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 2
    capsys.readouterr()


# ----------------------------------------------------------- make-folds

def test_make_folds_plan(workspace):
    plan = D.FoldPlan.load(str(workspace["plan"]))
    assert plan.n_folds == 3
    assert [len(f) for f in plan.folds] == [2, 2, 2]
    assert [len(b) for b in plan.base_subjects] == [4, 4, 4]
    assert (workspace["root"] / "folds.json.manifest.json").exists()


# ------------------------------------------------------------- pretrain

def test_pretrain_outputs(workspace):
    base = workspace["base"]
    ws = load_checkpoint(str(base))
    assert ws.config.hidden_size == 8
    assert str(base) + ".stdz.json"
    assert (workspace["ckpts"] / "base_fold0.ckpt.stdz.json").exists()
    history = read_json(str(base) + ".history.json")
    assert len(history["loss"]) == 3
    manifest = read_json(str(base) + ".manifest.json")
    assert manifest["command"] == "pretrain"
    assert manifest["config"]["model"]["hidden_size"] == 8


def test_pretrain_rerun_is_byte_identical(workspace, tmp_path):
    again = tmp_path / "again.ckpt"
    assert main(["pretrain", "--data", str(workspace["corpus"]),
                 "--out", str(again),
                 "--fold-plan", str(workspace["plan"]), "--fold", "0",
                 "--epochs", "3", "--lr", "1e-2", "--batch-size", "8",
                 "--seed", "0"] + TINY_MODEL) == 0
    assert again.read_bytes() == workspace["base"].read_bytes()


def test_pretrain_fold_plan_changes_training_set(workspace, tmp_path):
    no_plan = tmp_path / "all.ckpt"
    assert main(["pretrain", "--data", str(workspace["corpus"]),
                 "--out", str(no_plan),
                 "--epochs", "3", "--lr", "1e-2", "--batch-size", "8",
                 "--seed", "0"] + TINY_MODEL) == 0
    assert no_plan.read_bytes() != workspace["base"].read_bytes()


# --------------------------------------------------------------- search

def test_search_writes_trial_log_and_best(workspace, tmp_path, capsys):
    out = tmp_path / "trials.jsonl"
    with pytest.warns(D.SplitWarning):  # oversized trials degrade, not abort
        code = main(["search", "--data", str(workspace["corpus"]),
                     "--out", str(out), "--budget", "3", "--epochs", "1",
                     "--seed", "0"])
    assert code == 0
    assert "best trial" in capsys.readouterr().out
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(lines) == 3
    for entry in lines:
        assert set(entry) >= {"trial", "params", "val_mean_ba", "wall_ms"}
    best = read_json(str(out) + ".best.json")
    assert {"trial", "params", "val_mean_ba"} <= set(best)
    assert best["val_mean_ba"] == max(
        e["val_mean_ba"] for e in lines if e["val_mean_ba"] is not None)

    rerun = tmp_path / "rerun.jsonl"
    with pytest.warns(D.SplitWarning):
        assert main(["search", "--data", str(workspace["corpus"]),
                     "--out", str(rerun), "--budget", "3", "--epochs", "1",
                     "--seed", "0"]) == 0
    redo = [json.loads(l) for l in rerun.read_text().splitlines()]
    for a, b in zip(lines, redo):
        a.pop("wall_ms"), b.pop("wall_ms")  # timing is the one free field
        assert a == b
    capsys.readouterr()


def test_search_exits_1_when_no_trial_scores(tmp_path, capsys):
    # 8-minute subjects cannot fill any sampled window size twice over
    corpus = tmp_path / "micro"
    assert main(["gen-synthetic", "--out", str(corpus), "--subjects", "2",
                 "--minutes", "8", "--features", "6", "--labels", "3",
                 "--seed", "0"]) == 0
    out = tmp_path / "trials.jsonl"
    with pytest.warns(D.SplitWarning):
        code = main(["search", "--data", str(corpus), "--out", str(out),
                     "--budget", "2", "--epochs", "1", "--seed", "0"])
    assert code == 1
    assert "no trial produced" in capsys.readouterr().err
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert [e["val_mean_ba"] for e in lines] == [None, None]


# ------------------------------------------------------------- simulate

def test_simulate_fold_zero(workspace, tmp_path, capsys):
    out = tmp_path / "sim"
    code = main(["simulate", "--data", str(workspace["corpus"]),
                 "--fold-plan", str(workspace["plan"]),
                 "--base-ckpt-dir", str(workspace["ckpts"]),
                 "--out", str(out), "--folds", "0",
                 "--rounds", "2", "--local-epochs", "2",
                 "--local-lr", "1e-2", "--batch-size", "8", "--seed", "0"])
    assert code == 0
    assert "fold 0" in capsys.readouterr().out

    fold = read_json(out / "fold0.json")
    assert fold["fold"] == 0
    assert len(fold["rounds"]) == 2
    assert fold["final"] == fold["rounds"][-1]
    assert fold["base"]["summary"]["mean"] is not None

    means = read_json(out / "fold_means.json")
    assert [f["fold"] for f in means["folds"]] == [0]

    summary = read_json(out / "summary.json")
    assert set(summary) == {"mean_ba_overall", "best_fold_mean", "best_client"}
    assert 0.0 <= summary["mean_ba_overall"] <= 1.0
    assert summary["best_client"] >= summary["mean_ba_overall"]

    audit = [json.loads(l) for l in (out / "audit.jsonl").read_text().splitlines()]
    assert sum(e["event"] == "aggregate" for e in audit) == 2
    assert read_json(out / "manifest.json")["command"] == "simulate"


def test_simulate_requires_base_checkpoints(workspace, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    code = main(["simulate", "--data", str(workspace["corpus"]),
                 "--fold-plan", str(workspace["plan"]),
                 "--base-ckpt-dir", str(empty),
                 "--out", str(tmp_path / "sim"), "--folds", "1"])
    assert code == 1
    assert "missing base checkpoint" in capsys.readouterr().err


# ------------------------------------------------------------- evaluate

def test_evaluate_report_schema(workspace, tmp_path):
    out = tmp_path / "eval.json"
    code = main(["evaluate", "--ckpt", str(workspace["base"]),
                 "--data", str(workspace["corpus"]), "--out", str(out)])
    assert code == 0
    report = read_json(out)
    assert report["fold"] == 0
    assert len(report["clients"]) == 6
    assert set(report["summary"]) == {"mean", "median", "q1", "q3", "min", "max"}
    for client in report["clients"]:
        assert {"subject_id", "mean_ba", "n_eval_instances"} <= set(client)


def test_evaluate_missing_checkpoint_exits_1(workspace, tmp_path, capsys):
    code = main(["evaluate", "--ckpt", str(tmp_path / "nope.ckpt"),
                 "--data", str(workspace["corpus"]),
                 "--out", str(tmp_path / "eval.json")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


# ------------------------------------------------------- tcp federation

def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_fed_server_and_clients_loopback(workspace, tmp_path):
    plan = D.FoldPlan.load(str(workspace["plan"]))
    port = str(free_port())
    out = tmp_path / "fed"
    codes = {}

    def serve():
        codes["server"] = main([
            "fed-server", "--base-ckpt", str(workspace["base"]),
            "--out", str(out), "--port", port, "--clients", "2",
            "--fold", "0", "--rounds", "1", "--local-epochs", "1",
            "--local-lr", "1e-2", "--batch-size", "8",
            "--accept-timeout", "30", "--seed", "0"])

    def join(subject_id):
        codes[subject_id] = main([
            "fed-client", "--server", "127.0.0.1", "--port", port,
            "--subject-data", str(workspace["corpus"] / f"{subject_id}.csv"),
            "--base-ckpt", str(workspace["base"]), "--seed", "0"])

    threads = [threading.Thread(target=serve)]
    threads += [threading.Thread(target=join, args=(sid,))
                for sid in plan.folds[0]]
    for t in threads:
        t.start()
    for t in threads:
        t.join(120.0)
        assert not t.is_alive()
    assert set(codes.values()) == {0}

    result = read_json(out / "fold0.json")
    assert len(result["rounds"]) == 1
    assert result["base"] is None  # socket clients only evaluate after rounds
    final = load_checkpoint(str(out / "final_fold0.ckpt"))
    assert final.config.hidden_size == 8
    # standardizer travels with the final ckpt so evaluate works on it directly
    assert (out / "final_fold0.ckpt.stdz.json").exists()
    audit = [json.loads(l) for l in (out / "audit.jsonl").read_text().splitlines()]
    assert sum(e["event"] == "hello" for e in audit) == 2
    assert sum(e["event"] == "done" for e in audit) == 2
