"""Batch encoding of utterance lists into pooled representations."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import Tensor

from .corpus import Utterance
from .encoder import Encoder
from .tokenizer import Vocab, encode, stack


def batch_inputs(
    utt_lists: Sequence[Sequence[Utterance]], vocab: Vocab, max_len: int
) -> tuple[Tensor, Tensor]:
    seqs = [encode(u, vocab, max_len, pad=False) for u in utt_lists]
    ids, mask, _ = stack(seqs)
    return torch.from_numpy(ids), torch.from_numpy(mask)


def represent(
    encoder: Encoder,
    vocab: Vocab,
    utt_lists: Sequence[Sequence[Utterance]],
    max_len: Optional[int] = None,
    pooling: Optional[str] = None,
    train: bool = False,
    generator: Optional[torch.Generator] = None,
    batch_size: int = 256,
) -> Tensor:
    """Last-layer pooled vectors ``(N, d)``. Gradients flow only when ``train`` is set."""
    max_len = max_len or encoder.cfg.max_len
    chunks = []
    for start in range(0, len(utt_lists), batch_size):
        ids, mask = batch_inputs(utt_lists[start:start + batch_size], vocab, max_len)
        with torch.set_grad_enabled(train):
            out = encoder(ids, mask, train=train, generator=generator, pooling=pooling)
        chunks.append(out.last)
    return torch.cat(chunks)
