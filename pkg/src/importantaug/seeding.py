"""Named random substreams derived from one run seed.

Every consumer of randomness asks for its own stream by name, so adding
draws in one place (say, more roll shifts) never perturbs another (say,
noise selection).
"""
from __future__ import annotations

import zlib

import numpy as np
import torch

STREAMS = ("data-split", "init", "noise-draw", "roll", "null-replace", "shuffle",
           "dev-noise", "test-noise", "toy")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream_key(name),)))


def torch_seed(seed: int, name: str) -> int:
    """A 63-bit integer seed for torch generators, derived like :func:`substream`."""
    return int(substream(seed, name).integers(0, 2**63 - 1))


def torch_generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(torch_seed(seed, name))
