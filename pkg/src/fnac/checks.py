"""Finite-difference checks of every loss component through the full encoder."""
from __future__ import annotations

import numpy as np

from .losses import HyperParams
from .model import ModelConfig, init_params
from .ndtensor import gradcheck
from .synthdata import WorldConfig, sample_batch
from .trainer import forward_losses

COMPONENTS = ("contrast", "fns1", "fns2", "tne", "total")
TOLERANCE = 1e-4


def gradient_suite(batch_sizes=(2, 4, 8), d: int = 8, grid: int = 3, seed: int = 0,
                   step: float = 1e-5) -> list:
    """Relative errors for each (batch size, component, parameter).

    Adjacencies are left attached so finite differences and the tape
    differentiate the same function.
    """
    world = WorldConfig(h=grid, w=grid, region_min=2, region_max=4, d_a_raw=6, d_v_raw=5,
                        distractor_prob=0.5, seed=seed)
    hp = HyperParams(tau=0.2, tau_adj=0.3, alpha=0.7, beta=1.3, gamma=1.1, detach_adjacency=False)
    rows = []
    for b in batch_sizes:
        rng = np.random.default_rng([seed, b])
        batch = sample_batch(world, b, 0.3, rng)
        params = init_params(ModelConfig(world.d_a_raw, world.d_v_raw, hidden=7, d=d), rng)
        for comp in COMPONENTS:
            errs = gradcheck(lambda: getattr(forward_losses(params, batch.audio, batch.images, hp), comp),
                             list(params), step)
            rows.extend({"batch_size": b, "component": comp, "param": k, "rel_err": v,
                         "pass": bool(v < TOLERANCE)} for k, v in errs.items())
    return rows
