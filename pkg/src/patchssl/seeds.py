"""Named seed streams derived from a single master seed.

Every random consumer in the pipeline gets its own stream id. A derived seed
is the first 32-bit word of ``SeedSequence([master, stream_id, *counters])``,
so e.g. the labeled subset for (labeled_count=20, repeat=3) is always
``derive_seed(master, "subset", 20, 3)`` regardless of what else ran before.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "split": 0,
    "subset": 1,
    "init_d": 2,
    "init_g": 3,
    "train": 4,
    "epoch": 5,
    "synth": 6,
}


def derive_seed(master: int, stream: str, *counters: int) -> int:
    if stream not in STREAMS:
        raise KeyError(f"unknown seed stream {stream!r}")
    words = [int(master), STREAMS[stream], *(int(c) for c in counters)]
    if any(w < 0 for w in words):
        raise ValueError("seeds and counters must be non-negative")
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def rng_for(master: int, stream: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stream, *counters))
