"""Future-knowledge probes and embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Optional, Sequence

import numpy as np
import torch

from .corpus import Utterance
from .encoder import Encoder
from .inference import represent
from .tokenizer import Vocab


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeResult:
    golden_distance: float
    mean_random_distance: float
    example_id: str = ""

    @property
    def golden_smaller(self) -> bool:
        return self.golden_distance < self.mean_random_distance


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared coordinate difference along the last axis."""
    return ((a - b) ** 2).mean(-1)


def future_distance_probe(
    encoder: Encoder,
    vocab: Vocab,
    history: Sequence[Utterance],
    gold: Utterance,
    distractors: Sequence[Utterance],
    max_len: Optional[int] = None,
    pooling: Optional[str] = None,
    example_id: str = "",
) -> ProbeResult:
    """Compare repr(history) with repr(history + response) for the gold and each distractor."""
    if not distractors:
        raise ProbeError("distractor pool is empty")
    history = tuple(history)
    inputs = [history] + [history + (r,) for r in (gold, *distractors)]
    reps = represent(encoder, vocab, inputs, max_len, pooling)
    dist = mse(reps[1:], reps[0].unsqueeze(0)).double()
    return ProbeResult(float(dist[0]), float(dist[1:].mean()), example_id)


def golden_smaller_ratio(results: Sequence[ProbeResult]) -> float:
    if not results:
        raise ProbeError("no probe results")
    return sum(r.golden_smaller for r in results) / len(results)


def sample_distractors(
    responses: Sequence[Utterance], gold_index: int, rng: np.random.Generator, count: int = 99
) -> list[Utterance]:
    """Draw ``count`` distinct-text responses, never one whose text equals the gold."""
    gold_text = responses[gold_index].text
    first: dict[str, int] = {}
    for i, r in enumerate(responses):
        if r.text != gold_text:
            first.setdefault(r.text, i)
    candidates = list(first.values())
    if len(candidates) < count:
        raise ProbeError(f"only {len(candidates)} distinct distractors available, need {count}")
    picked = rng.choice(len(candidates), size=count, replace=False)
    return [responses[candidates[i]] for i in picked]


def run_probe(
    encoder: Encoder,
    vocab: Vocab,
    pairs: Sequence[tuple[Sequence[Utterance], Utterance]],
    rng: np.random.Generator,
    distractors: int = 99,
    max_len: Optional[int] = None,
    pooling: Optional[str] = None,
) -> list[ProbeResult]:
    responses = [gold for _, gold in pairs]
    results = []
    for i, (history, gold) in enumerate(pairs):
        pool = sample_distractors(responses, i, rng, distractors)
        results.append(future_distance_probe(encoder, vocab, history, gold, pool, max_len, pooling, str(i)))
    return results


def write_probe_csv(results: Sequence[ProbeResult], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["example_id", "golden_distance", "mean_random_distance"])
        for r in results:
            writer.writerow([r.example_id, repr(r.golden_distance), repr(r.mean_random_distance)])


def export_embeddings(
    encoder: Encoder,
    vocab: Vocab,
    utterances: Sequence[Utterance],
    labels: Sequence[Hashable],
    path: str | Path,
    max_len: Optional[int] = None,
    pooling: Optional[str] = None,
) -> Path:
    """One CSV row per utterance: ``id, label, e0 .. e{d-1}``."""
    if not utterances:
        raise ProbeError("nothing to export")
    if len(labels) != len(utterances):
        raise ProbeError("labels misaligned with utterances")
    reps = represent(encoder, vocab, [(u,) for u in utterances], max_len, pooling).numpy()
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", *(f"e{j}" for j in range(reps.shape[1]))])
        for i, (label, row) in enumerate(zip(labels, reps)):
            writer.writerow([i, label, *(repr(float(x)) for x in row)])
    return path
