"""Seed fan-out: one master seed, independent named streams.

Every source of randomness in a run (weight init, latents, augmentation
draws, data shuffling, evaluation) gets its own generator derived from the
master seed, so adding draws to one stream never perturbs another.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {
    "weights": 1,
    "latent": 2,
    "augment": 3,
    "data": 4,
    "eval": 5,
    "dataset": 6,
    "split": 7,
    "extractor": 8,
}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream under a master seed."""
    try:
        key = _STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown rng stream {name!r}") from None
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def set_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state
