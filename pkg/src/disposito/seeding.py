"""Derived seeds so every stochastic draw is a pure function of (seed, role, step)."""

from __future__ import annotations

import numpy as np
import torch

# role tags keep the streams for different purposes disjoint
DATA = 11
MASK = 13
NOISE = 17
SCENE = 19


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(list(keys))


def torch_gen_for(*keys: int) -> torch.Generator:
    state = np.random.SeedSequence(list(keys)).generate_state(2, dtype=np.uint64)
    gen = torch.Generator()
    gen.manual_seed(int(state[0] >> 1))
    return gen
