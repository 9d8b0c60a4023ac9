import csv

import numpy as np
import pytest
import torch

from futuretod.corpus import Utterance
from futuretod.inference import represent
from futuretod.probe import (
    ProbeError, ProbeResult, export_embeddings, future_distance_probe, golden_smaller_ratio, mse,
    run_probe, sample_distractors, write_probe_csv,
)


def test_mse_is_mean_of_squares():
    assert mse(torch.tensor([1.0, 2.0]), torch.tensor([0.0, 0.0])).item() == 2.5


def test_probe_matches_manual(small_corpus, small_vocab, tiny_encoder):
    d = small_corpus[0]
    history, gold = d.turns[:1], d.turns[1]
    distractors = [small_corpus[i].turns[1] for i in (1, 2, 3)]
    res = future_distance_probe(tiny_encoder, small_vocab, history, gold, distractors)
    reps = represent(tiny_encoder, small_vocab, [history, history + (gold,)] + [history + (r,) for r in distractors])
    dist = [float(((reps[i] - reps[0]) ** 2).mean()) for i in range(1, 5)]
    assert res.golden_distance == pytest.approx(dist[0], rel=1e-5)
    assert res.mean_random_distance == pytest.approx(np.mean(dist[1:]), rel=1e-5)


def test_golden_smaller_ratio_strict():
    rs = [ProbeResult(1.0, 2.0), ProbeResult(2.0, 2.0), ProbeResult(3.0, 2.0), ProbeResult(0.0, 0.1)]
    assert golden_smaller_ratio(rs) == 0.5
    with pytest.raises(ProbeError):
        golden_smaller_ratio([])


def test_distractors_exclude_gold_text():
    responses = [Utterance("system", t) for t in ["a", "a", "b", "c", "c", "d"]]
    picked = sample_distractors(responses, 0, np.random.default_rng(0), count=3)
    assert sorted(u.text for u in picked) == ["b", "c", "d"]
    with pytest.raises(ProbeError, match="distinct"):
        sample_distractors(responses, 0, np.random.default_rng(0), count=4)


def test_run_probe_and_csv(tmp_path, small_corpus, small_vocab, tiny_encoder):
    pairs = [(d.turns[:1], d.turns[1]) for d in small_corpus[:12]]
    distinct = len({g.text for _, g in pairs})
    results = run_probe(tiny_encoder, small_vocab, pairs, np.random.default_rng(0), distractors=min(5, distinct - 2))
    write_probe_csv(results, tmp_path / "p.csv")
    rows = list(csv.DictReader((tmp_path / "p.csv").open()))
    assert [r["example_id"] for r in rows] == [str(i) for i in range(12)]
    assert float(rows[0]["golden_distance"]) == results[0].golden_distance


def test_export_embeddings(tmp_path, small_vocab, tiny_encoder):
    utts = [Utterance("user", "hello"), Utterance("user", "bye")]
    export_embeddings(tiny_encoder, small_vocab, utts, ["a", "b"], tmp_path / "e.csv")
    rows = list(csv.reader((tmp_path / "e.csv").open()))
    assert rows[0][:3] == ["id", "label", "e0"] and len(rows[0]) == 2 + 16
    assert rows[2][:2] == ["1", "b"]
    with pytest.raises(ProbeError):
        export_embeddings(tiny_encoder, small_vocab, utts, ["a"], tmp_path / "x.csv")
