"""Reference configurations for the directional experiments.

Each function returns ``(world, train_config, experiment_config)``. All runs
use 10 epochs of 100 steps at batch 64 with an NCE-only first epoch. Temperature,
training-stream composition and distractor rate differ per experiment because
each probes a different regime of the synthetic world:

* pilot: sharp temperature (0.03), which makes NCE-only localization sensitive
  to injected false negatives.
* ablation and margin: tau 0.1 with a sharper adjacency (0.05) and half of each
  batch forced into shared classes, so the false-negative terms have something
  to correct. The margin test reuses the ablation's baseline and full models.
* batch sweep: 64 classes so that a 128-sample batch still mixes classes.
* distractor: silent distractors in 80% of images at tau 0.03.
"""
from __future__ import annotations

from .experiments import ExperimentConfig
from .losses import HyperParams
from .synthdata import WorldConfig
from .trainer import TrainConfig

SEEDS = (0, 1, 2)
WEIGHT = 50.0


def _train(tau: float, tau_adj: float, fn_rate: float = 0.0, batch_size: int = 64) -> TrainConfig:
    hp = HyperParams(tau=tau, tau_adj=tau_adj, alpha=WEIGHT, beta=WEIGHT, gamma=WEIGHT)
    return TrainConfig(epochs=10, warmup_epochs=1, steps_per_epoch=100, batch_size=batch_size, lr=1e-3,
                       fn_rate=fn_rate, hyperparams=hp)


def pilot():
    world = WorldConfig(n_classes=10, scene_coupling=0.0, distractor_prob=0.5)
    return world, _train(0.03, 0.03), ExperimentConfig(seeds=SEEDS, rates=(0.0, 0.25, 0.5, 0.75))


def ablation():
    world = WorldConfig(n_classes=10, scene_coupling=0.0, distractor_prob=0.0)
    return world, _train(0.1, 0.05, fn_rate=0.5), ExperimentConfig(seeds=SEEDS)


def margin():
    world, cfg, _ = ablation()
    return world, cfg, ExperimentConfig(seeds=SEEDS, margin_batch=world.n_classes)


def batch_sweep():
    world = WorldConfig(n_classes=64, scene_coupling=0.0, distractor_prob=0.0)
    return world, _train(0.1, 0.1), ExperimentConfig(seeds=SEEDS, batch_sizes=(16, 128))


def distractor():
    world = WorldConfig(n_classes=10, scene_coupling=0.0)
    return world, _train(0.03, 0.03), ExperimentConfig(seeds=SEEDS, distractor_prob=0.8)


ALL = {"pilot-fn-sweep": pilot, "ablate": ablation, "margin-test": margin,
       "batch-sweep": batch_sweep, "distractor-test": distractor}
