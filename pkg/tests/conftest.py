"""Shared fixtures.

The trained toy prior is expensive (a couple of minutes of CPU), so it is
built once per session and shared by the mask-prior, guidance,
partitioning and acceptance tests. The mask set is four 8x8 patterns
composed of two independent binary choices (stripe phase on the left
half, stripe phase on the right half): every pattern is locally
identifiable, the set is closed under complement, and pairwise Hamming
distances are balanced, which keeps the learned sampler's mode
frequencies near uniform.
"""

from __future__ import annotations

import numpy as np
import pytest

from maskfill.grids import Mask
from maskfill.mask_prior import (
    PriorModel,
    PriorTrainConfig,
    ScaledLogitCodec,
    train_prior,
)


def toy_mask_set(h: int = 8, w: int = 8) -> list[Mask]:
    yy, xx = np.mgrid[0:h, 0:w]
    v0 = (xx % 2 == 0).astype(np.uint8)
    v1 = (xx % 2 == 1).astype(np.uint8)

    def halves(left, right):
        m = np.zeros((h, w), dtype=np.uint8)
        m[:, : w // 2] = left[:, : w // 2]
        m[:, w // 2 :] = right[:, w // 2 :]
        return Mask(m)

    return [halves(v0, v0), halves(v0, v1), halves(v1, v0), halves(v1, v1)]


def train_toy_prior(masks, seed: int = 11):
    """Three-phase schedule: a coarse pass then two low-rate refinements.

    The refinements shrink the stationary optimiser noise, which is what
    keeps the sampler's mode frequencies balanced; late-weighted time
    sampling concentrates training where mode commitment happens.
    """
    codec = ScaledLogitCodec()
    phases = [(3000, 3e-3), (2500, 8e-4), (1500, 2e-4)]
    params = None
    for k, (steps, lr) in enumerate(phases):
        cfg = PriorTrainConfig(steps=steps, batch=8, lr=lr, t_dist="late", seed=seed + 1000 * k)
        params, _ = train_prior(masks, cfg, codec=codec, init=params)
    return params


#: wall-clock cost of building the session prior, for acceptance runtime
#: accounting (filled in by the fixture)
TOY_PRIOR_BUILD_SECONDS: dict[str, float] = {}


@pytest.fixture(scope="session")
def toy_masks() -> list[Mask]:
    return toy_mask_set()


@pytest.fixture(scope="session")
def toy_prior(toy_masks) -> PriorModel:
    import time

    start = time.perf_counter()
    params = train_toy_prior(toy_masks)
    TOY_PRIOR_BUILD_SECONDS["train"] = time.perf_counter() - start
    return PriorModel(params=params, codec=ScaledLogitCodec(), n_steps=15)
