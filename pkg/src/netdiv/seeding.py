"""Deterministic per-stage seed derivation.

Every random stage derives its generator from the single root seed plus a
fixed stage counter, so stages can be rerun independently yet reproducibly.
"""

from __future__ import annotations

import numpy as np

STAGE_IDS = {
    "synth": 0,
    "null_model": 1,
    "baseline": 2,
    "bootstrap": 3,
}


def stage_seed(root_seed: int, stage: str, index: int = 0) -> np.random.SeedSequence:
    """Child seed for (stage, index) under the given root seed."""
    return np.random.SeedSequence(entropy=root_seed, spawn_key=(STAGE_IDS[stage], index))


def stage_rng(root_seed: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(stage_seed(root_seed, stage, index))
