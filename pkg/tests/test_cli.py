import json

import pytest

from futuretod.cli import main

TINY = ["layers=1", "hidden_dim=16", "heads=2", "ffn_dim=32", "max_len=96", "epochs=2", "sync_interval=1",
        "batch_size=16", "learning_rate=0.001"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"dialogues": 40, "task_dialogues": 200, "ood_utterances": 30}))
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data")]) == 0
    args = ["pretrain", "--corpus", str(root / "data" / "corpus.jsonl"), "--out", str(root / "pre")]
    for item in TINY:
        args += ["--set", item]
    assert main(args) == 0
    return root


def manifest(path):
    return json.loads((path / "run_manifest.json").read_text())


def test_synth_and_pretrain_manifests(workspace):
    m = manifest(workspace / "pre")
    assert m["command"] == "pretrain" and m["seed"] == 0
    assert m["config"]["hidden_dim"] == 16 and m["config"]["distill_layers_effective"] == 1
    assert len(m["inputs"]["corpus"]["sha256"]) == 64
    assert m["wall_time_s"] >= 0
    assert (workspace / "pre" / "loss.csv").exists()
    assert manifest(workspace / "data")["command"] == "synth"


def test_stats(workspace, capsys):
    assert main(["stats", "--corpus", str(workspace / "data" / "corpus.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out)["dialogue_count"] == 40


def test_finetune_then_evaluate(workspace, capsys):
    tasks = workspace / "data" / "tasks"
    out = workspace / "ft"
    assert main(["finetune", "--task", "intent", "--data", str(tasks / "intent_train.jsonl"),
                 "--dev", str(tasks / "intent_dev.jsonl"), "--checkpoint", str(workspace / "pre" / "student"),
                 "--out", str(out), "--set", "epochs=1"]) == 0
    assert manifest(out)["config"]["task"] == "intent"
    capsys.readouterr()
    assert main(["evaluate", "--task", "intent", "--checkpoint", str(out),
                 "--data", str(tasks / "intent_test.jsonl"), "--out", str(workspace / "ev")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"acc_all", "acc_in", "recall_out", "acc_out"} <= set(report["metrics"])


def test_evaluate_task_mismatch(workspace):
    tasks = workspace / "data" / "tasks"
    out = workspace / "ft_act"
    assert main(["finetune", "--task", "act", "--data", str(tasks / "act_dev.jsonl"),
                 "--checkpoint", str(workspace / "pre"), "--out", str(out), "--set", "epochs=1"]) == 0
    assert main(["evaluate", "--task", "dst", "--checkpoint", str(out), "--data", str(tasks / "dst_test.jsonl")]) == 1


def test_probe_and_export(workspace):
    tasks = workspace / "data" / "tasks"
    assert main(["probe", "--checkpoint", str(workspace / "pre"), "--data", str(tasks / "rs_train.jsonl"),
                 "--distractors", "20", "--out", str(workspace / "probe")]) == 0
    summary = json.loads((workspace / "probe" / "probe_summary.json").read_text())
    assert 0 <= summary["golden_smaller_ratio"] <= 1
    assert main(["export-embeddings", "--checkpoint", str(workspace / "pre" / "student"),
                 "--data", str(tasks / "intent_test.jsonl"), "--out", str(workspace / "emb")]) == 0
    assert (workspace / "emb" / "embeddings.csv").exists()


def test_errors_exit_non_zero(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert main(["stats", "--corpus", str(bad)]) == 1
    assert main(["pretrain", "--corpus", str(bad), "--out", str(tmp_path / "o"), "--set", "epoch=1"]) == 1
    with pytest.raises(SystemExit):
        main(["nonsense"])
