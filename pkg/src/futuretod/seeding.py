"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch

STREAMS = ("corpus", "sample", "mask", "dropout", "probe", "init", "finetune")


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent numpy generator for sub-stream ``name`` of run ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _key(name)]))


def sub_seed(seed: int, name: str, counter: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed), _key(name), int(counter)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def torch_generator(seed: int, name: str, counter: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(sub_seed(seed, name, counter))
