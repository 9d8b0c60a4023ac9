"""Dialogues, context/future splitting, and the synthetic task-oriented corpus."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

USER = "user"
SYSTEM = "system"
ROLES = (USER, SYSTEM)

FUTURE_POLICIES = ("1", "3", "5", "all", "fix")


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid dialogue operations."""


@dataclass(frozen=True)
class Utterance:
    role: str
    text: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise CorpusError(f"unknown role {self.role!r}")
        if not self.text.strip():
            raise CorpusError("utterance text is empty")


@dataclass(frozen=True)
class Dialogue:
    id: str
    turns: tuple[Utterance, ...]
    meta: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        if len(self.turns) < 2:
            raise CorpusError(f"dialogue {self.id!r} has fewer than 2 utterances")
        for i, utt in enumerate(self.turns):
            if utt.role != ROLES[i % 2]:
                raise CorpusError(f"dialogue {self.id!r} does not alternate at utterance {i}")

    @property
    def n_turns(self) -> int:
        """Number of user utterances (turn pairs, counting a trailing user turn)."""
        return (len(self.turns) + 1) // 2

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"id": self.id, "turns": [asdict(u) for u in self.turns]}
        if self.meta:
            doc["meta"] = self.meta
        return doc


@dataclass(frozen=True)
class SplitSample:
    context: tuple[Utterance, ...]
    future: tuple[Utterance, ...]
    split_turn: int
    future_window: tuple[Utterance, ...]


@dataclass(frozen=True)
class CorpusStats:
    dialogue_count: int
    utterance_count: int
    mean_context_tokens: float
    mean_future_tokens: float
    mean_context_utts: float
    mean_future_utts: float


def canonicalize(turns: Sequence[Utterance]) -> tuple[Utterance, ...]:
    """Merge consecutive same-role utterances and drop leading system utterances."""
    merged: list[Utterance] = []
    for utt in turns:
        if merged and merged[-1].role == utt.role:
            merged[-1] = Utterance(utt.role, f"{merged[-1].text} {utt.text}")
        else:
            merged.append(utt)
    while merged and merged[0].role != USER:
        merged.pop(0)
    return tuple(merged)


def dialogue_from_json(doc: Any, where: str = "") -> Dialogue:
    if not isinstance(doc, dict):
        raise CorpusError(f"{where}expected a JSON object")
    if not isinstance(doc.get("id"), str):
        raise CorpusError(f"{where}missing string field 'id'")
    raw_turns = doc.get("turns")
    if not isinstance(raw_turns, list):
        raise CorpusError(f"{where}missing list field 'turns'")
    turns = []
    for j, raw in enumerate(raw_turns):
        if not isinstance(raw, dict) or "role" not in raw or "text" not in raw:
            raise CorpusError(f"{where}turn {j} needs 'role' and 'text'")
        if raw["role"] not in ROLES:
            raise CorpusError(f"{where}turn {j} has invalid role {raw['role']!r}")
        if not isinstance(raw["text"], str):
            raise CorpusError(f"{where}turn {j} text is not a string")
        try:
            turns.append(Utterance(raw["role"], raw["text"]))
        except CorpusError as exc:
            raise CorpusError(f"{where}turn {j}: {exc}") from None
    meta = doc.get("meta") or {}
    try:
        return Dialogue(doc["id"], canonicalize(turns), meta)
    except CorpusError as exc:
        raise CorpusError(f"{where}{exc}") from None


def load_corpus(path: str | Path) -> list[Dialogue]:
    """Read a JSONL dialogue file. Every bad line is reported with its line number."""
    path = Path(path)
    dialogues: list[Dialogue] = []
    problems: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            try:
                dialogues.append(dialogue_from_json(doc, f"line {lineno}: "))
            except CorpusError as exc:
                problems.append(str(exc))
    if problems:
        raise CorpusError(f"{path}: " + "; ".join(problems))
    if not dialogues:
        raise CorpusError(f"{path}: no dialogues")
    return dialogues


def save_corpus(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")


def valid_split_turns(d: Dialogue) -> list[int]:
    # turn t is valid when the system reply S_t exists
    return list(range(1, len(d.turns) // 2 + 1))


def split_at_turn(d: Dialogue, t: int) -> SplitSample:
    """Split into C = (U1, S1, ..., Ut) and F = (St, ..., Sn); the window is all of F."""
    valid = valid_split_turns(d)
    if not valid:
        raise CorpusError(f"dialogue {d.id!r} is too short to split")
    if t not in valid:
        raise CorpusError(f"split turn {t} outside [1, {valid[-1]}] for dialogue {d.id!r}")
    cut = 2 * t - 1
    context, future = d.turns[:cut], d.turns[cut:]
    return SplitSample(context, future, t, future)


def sample_split(d: Dialogue, rng: np.random.Generator) -> int:
    valid = valid_split_turns(d)
    if not valid:
        raise CorpusError(f"dialogue {d.id!r} has no valid split")
    return int(valid[rng.integers(len(valid))])


def normalize_policy(policy: Any) -> str:
    key = str(policy).strip().lower()
    if key not in FUTURE_POLICIES:
        raise CorpusError(f"future policy must be one of {FUTURE_POLICIES}, got {policy!r}")
    return key


def sample_future_window(
    future: Sequence[Utterance], policy: Any, rng: np.random.Generator
) -> tuple[Utterance, ...]:
    """Pick a prefix of the future whose length is uniform in [1, min(P, |F|)]."""
    if not future:
        raise CorpusError("future is empty")
    policy = normalize_policy(policy)
    if policy == "fix":
        return tuple(future)
    limit = len(future) if policy == "all" else min(int(policy), len(future))
    length = int(rng.integers(1, limit + 1))
    return tuple(future[:length])


def make_sample(
    d: Dialogue, policy: Any, rng: np.random.Generator, t: int | None = None
) -> SplitSample:
    if t is None:
        t = sample_split(d, rng)
    split = split_at_turn(d, t)
    window = sample_future_window(split.future, policy, rng)
    return SplitSample(split.context, split.future, split.split_turn, window)


def corpus_stats(dialogues: Sequence[Dialogue], vocab: Any) -> CorpusStats:
    """Counts plus token/utterance means over every valid (context, full future) split.

    ``vocab`` only needs a ``tokenize(text) -> list[str]`` method.
    """
    if not dialogues:
        raise CorpusError("corpus is empty")
    ctx_tok, fut_tok, ctx_utt, fut_utt = [], [], [], []
    for d in dialogues:
        lengths = [len(vocab.tokenize(u.text)) for u in d.turns]
        for t in valid_split_turns(d):
            cut = 2 * t - 1
            ctx_tok.append(sum(lengths[:cut]))
            fut_tok.append(sum(lengths[cut:]))
            ctx_utt.append(cut)
            fut_utt.append(len(d.turns) - cut)

    def mean(xs: list[int]) -> float:
        return float(sum(xs) / len(xs)) if xs else 0.0

    return CorpusStats(
        dialogue_count=len(dialogues),
        utterance_count=sum(len(d.turns) for d in dialogues),
        mean_context_tokens=mean(ctx_tok),
        mean_future_tokens=mean(fut_tok),
        mean_context_utts=mean(ctx_utt),
        mean_future_utts=mean(fut_utt),
    )
