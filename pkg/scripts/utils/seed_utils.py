"""
Seed-stream derivation.

Every stage draws from its own numpy Generator derived from one master seed:

    SeedSequence(master_seed, spawn_key=(STREAMS[name],))

Streams are independent of each other and of the order in which they are
requested, so switching off one stage's randomness (e.g. DP noise) never shifts
the draws of another (e.g. batch sampling).
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "split": 1,
    "negatives": 2,
    "init": 3,
    "sampling": 4,
    "noise": 5,
    "pretune": 6,
    "synthetic": 7,
}


def derive_rng(master_seed: int, stream: str) -> np.random.Generator:
    """Return the Generator for a named stream of ``master_seed``."""
    if stream not in STREAMS:
        raise KeyError(f"Unknown random stream '{stream}'; expected one of {sorted(STREAMS)}")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(STREAMS[stream],))
    return np.random.default_rng(seq)


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serialisable state of a Generator's bit generator."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
