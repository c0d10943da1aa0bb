"""One seed per run, split into fixed per-component streams."""

from __future__ import annotations

import numpy as np

_STREAMS = {
    "init": 1,
    "data": 2,
    "pretrain": 3,
    "train": 4,
    "finetune": 5,
    "sampler": 6,
    "env": 7,
    "eval": 8,
    "bench": 9,
}


def component_rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Generator for one component; (seed, stream, index) fully determines the stream."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    if stream not in _STREAMS:
        raise ValueError(f"unknown rng stream {stream!r}")
    return np.random.default_rng([seed, _STREAMS[stream], index])
