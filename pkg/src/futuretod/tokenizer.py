"""Word-level vocabulary, dialogue flattening with role tokens, and MLM corruption."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import USER, Dialogue, Utterance

PAD, CLS, SEP, MASK, UNK, USR, SYS = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[USR]", "[SYS]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK, USR, SYS)
IGNORE = -1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class TokenizerError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Immutable token <-> id mapping. Specials occupy ids 0..6 with [PAD] at 0."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise TokenizerError("vocabulary must start with the special tokens in canonical order")
        if len(set(tokens)) != len(tokens):
            raise TokenizerError("vocabulary contains duplicate tokens")
        self._tokens = tuple(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self._tokens)}
        self.pad_id, self.cls_id, self.sep_id, self.mask_id, self.unk_id, self.usr_id, self.sys_id = range(7)
        self.special_ids = frozenset(range(len(SPECIALS)))

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    tokenize = staticmethod(tokenize)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def ids(self, text: str) -> list[int]:
        return [self.id_of(tok) for tok in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids if i != self.pad_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(list(self._tokens), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(dialogues: Sequence[Dialogue], min_freq: int = 1, extra_texts: Iterable[str] = ()) -> Vocab:
    """Tokens seen at least ``min_freq`` times, ordered by frequency desc then lexicographically."""
    if not dialogues:
        raise TokenizerError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for d in dialogues:
        for utt in d.turns:
            counts.update(tokenize(utt.text))
    for text in extra_texts:
        counts.update(tokenize(text))
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq and tok not in SPECIALS),
                  key=lambda tok: (-counts[tok], tok))
    return Vocab([*SPECIALS, *kept])


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return int(self.attention_mask.sum())


def encode(
    utts: Sequence[Utterance],
    vocab: Vocab,
    max_len: int = 512,
    keep_last: int = 0,
    pad: bool = True,
) -> TokenSequence:
    """Flatten utterances as ``[CLS] ([USR]|[SYS] tokens)* [SEP]``.

    Oversized input loses its oldest tokens first; the last ``keep_last``
    utterances are never cut.
    """
    if not utts:
        raise TokenizerError("nothing to encode")
    if max_len < 3:
        raise TokenizerError(f"max_len {max_len} cannot hold [CLS], one token and [SEP]")
    pieces = [[vocab.usr_id if u.role == USER else vocab.sys_id, *vocab.ids(u.text)] for u in utts]
    protected = len(pieces) - keep_last
    overflow = 2 + sum(map(len, pieces)) - max_len
    i = 0
    while overflow > 0:
        if i >= protected:
            raise TokenizerError("protected utterances alone exceed max_len")
        words = len(pieces[i]) - 1
        if overflow > words:
            overflow -= len(pieces[i])
            pieces[i] = []
            i += 1
        else:
            pieces[i] = [pieces[i][0], *pieces[i][1 + overflow:]]
            overflow = 0
    ids = [vocab.cls_id, *(tok for piece in pieces for tok in piece), vocab.sep_id]
    n = len(ids)
    width = max_len if pad else n
    arr = np.zeros(width, dtype=np.int64)
    arr[:n] = ids
    mask = np.zeros(width, dtype=np.int64)
    mask[:n] = 1
    return TokenSequence(arr, mask, np.full(width, IGNORE, dtype=np.int64))


def maskable_positions(seq: TokenSequence, vocab: Vocab) -> np.ndarray:
    ids = seq.ids
    return (seq.attention_mask == 1) & (ids >= len(SPECIALS))


def apply_mlm_mask(seq: TokenSequence, vocab: Vocab, ratio: float, rng: np.random.Generator) -> TokenSequence:
    """Select each non-special token with probability ``ratio``; 80/10/10 mask/random/keep."""
    if not 0 < ratio < 1:
        raise TokenizerError(f"mask ratio must be in (0, 1), got {ratio}")
    candidates = maskable_positions(seq, vocab)
    if not candidates.any():
        raise TokenizerError("sequence has no maskable tokens")
    # draw for every position so the stream consumed is independent of content
    select = (rng.random(len(seq)) < ratio) & candidates
    action = rng.random(len(seq))
    random_tokens = rng.integers(len(SPECIALS), len(vocab), size=len(seq))
    ids = seq.ids.copy()
    labels = np.full(len(seq), IGNORE, dtype=np.int64)
    labels[select] = ids[select]
    ids[select & (action < 0.8)] = vocab.mask_id
    swap = select & (action >= 0.8) & (action < 0.9)
    ids[swap] = random_tokens[swap]
    return replace(seq, ids=ids, mlm_labels=labels)


def stack(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack into (ids, mask, labels) of width equal to the longest real sequence."""
    if not seqs:
        raise TokenizerError("empty batch")
    width = max(s.n_real for s in seqs)

    def fit(a: np.ndarray, fill: int) -> np.ndarray:
        a = a[:width]
        return np.pad(a, (0, width - len(a)), constant_values=fill)

    ids = np.stack([fit(s.ids, 0) for s in seqs])
    mask = np.stack([fit(s.attention_mask, 0) for s in seqs])
    labels = np.stack([fit(s.mlm_labels, IGNORE) for s in seqs])
    return ids, mask, labels
