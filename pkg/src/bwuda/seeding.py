"""Named random sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch

STREAMS = ("data", "init-h", "init-hhat", "init-theta", "batching", "embedding", "split", "probe")


def stream_seed(root: int, name: str, *extra: int) -> int:
    """Return a 32-bit seed for the named stream of ``root``.

    The same ``(root, name, extra)`` always maps to the same value, and
    different names give statistically independent streams.
    """
    key = [int(root) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def rng(root: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name, *extra))


def torch_generator(root: int, name: str, *extra: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(root, name, *extra))
    return g
