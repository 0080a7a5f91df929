"""Named random substreams derived from one master seed.

``latent`` supplies the prior draw and every step's Gaussian noise (consumed in
candidate order), ``accept`` the acceptance uniforms, ``env`` environment
resets, and ``scheduler`` the scheduler's action sampling. Keeping them apart
is what lets a zero-horizon speculative run replay plain ancestral sampling
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STREAM_NAMES = ("latent", "accept", "env", "scheduler")


@dataclass
class RngStreams:
    latent: np.random.Generator
    accept: np.random.Generator
    env: np.random.Generator
    scheduler: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, *key: int) -> "RngStreams":
        """Streams for master ``seed``; ``key`` (e.g. an episode index) selects a family."""
        root = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
        return cls(*(np.random.default_rng(s) for s in root.spawn(len(STREAM_NAMES))))
