"""Adam training loop with an NCE-only warm-up, evaluation and CSV logging."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import ndtensor as nd
from .localization import MetricsReport, evaluate, localize, masked_features
from .losses import HyperParams, fnac_objective
from .model import EncoderParams, ModelConfig, encode_arrays, init_params
from .synthdata import Batch, WorldConfig, eval_set, sample_batch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "contrast", "fns1", "fns2", "tne", "total",
               "ciou", "auc", "miou", "fscore")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_seed: tuple, values: dict):
        self.step = step
        self.batch_seed = batch_seed
        self.values = values
        super().__init__(f"non-finite loss at step {step} (batch seed {list(batch_seed)}): {values}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    steps_per_epoch: int = 50
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 32
    d: int = 16
    fn_rate: float = 0.0
    aug_sigma: float = 0.0
    seed: int = 0
    eval_every: int = 0
    eval_size: int = 256
    loc_threshold: float = 0.5
    hyperparams: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if isinstance(self.hyperparams, dict):
            object.__setattr__(self, "hyperparams", HyperParams(**self.hyperparams))
        if self.epochs < 0 or not 0 <= self.warmup_epochs <= max(self.epochs, 0):
            raise ValueError("need 0 <= warmup_epochs <= epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not 0 <= self.fn_rate <= 1:
            raise ValueError("fn_rate must lie in [0, 1]")
        if not 0 < self.loc_threshold < 1:
            raise ValueError("loc_threshold must lie in (0, 1)")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def replace(self, **changes) -> "TrainConfig":
        hp = changes.pop("hyperparams", self.hyperparams)
        if isinstance(hp, dict):
            hp = HyperParams(**{**asdict(self.hyperparams), **hp})
        base = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "hyperparams"}
        return TrainConfig(**{**base, **changes, "hyperparams": hp})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    params: EncoderParams
    m: dict
    v: dict
    step: int = 0


def model_config(cfg: TrainConfig, world: WorldConfig) -> ModelConfig:
    return ModelConfig(world.d_a_raw, world.d_v_raw, cfg.hidden, cfg.d)


def init_state(cfg: TrainConfig, world: WorldConfig) -> TrainState:
    params = init_params(model_config(cfg, world), np.random.default_rng([cfg.seed, 0x1417]))
    zeros = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    return TrainState(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0)


def adam_step(state: TrainState, grads: dict, cfg: TrainConfig) -> TrainState:
    """One in-place Adam update with bias correction; returns ``state``.

    Weight decay is either decoupled (``p -= lr * wd * p`` alongside the Adam
    step) or coupled (added to the gradient before the moments).
    """
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in state.params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        if not cfg.decoupled_weight_decay:
            g = g + cfg.weight_decay * p.data
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if cfg.decoupled_weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - cfg.lr * update
    state.step = t
    return state


def forward_losses(params: EncoderParams, audio: np.ndarray, images: np.ndarray, hp: HyperParams):
    emb = encode_arrays(params, audio, images)
    loc = localize(emb.z_audio, emb.z_visual_spatial)
    z_sound = masked_features(loc, emb.z_visual_spatial)
    return fnac_objective(emb.z_audio, emb.z_visual_pooled, z_sound, hp)


def predict_maps(params: EncoderParams, batch: Batch) -> np.ndarray:
    with nd.no_grad():
        emb = encode_arrays(params, batch.audio, batch.images)
        return localize(emb.z_audio, emb.z_visual_spatial).data


def evaluate_params(params: EncoderParams, batch: Batch, loc_threshold: float = 0.5) -> MetricsReport:
    return evaluate(predict_maps(params, batch), batch.gt_masks, loc_threshold)


def batch_seed(cfg: TrainConfig, step: int) -> tuple:
    return (cfg.seed, 0xDA7A, step)


def train(cfg: TrainConfig, world: WorldConfig, eval_batch: Optional[Batch] = None,
          state: Optional[TrainState] = None) -> tuple:
    """Train from a seeded initialization; returns ``(state, log_rows)``.

    Batches are drawn fresh each step from ``(seed, step)``, so runs that share
    a seed and batch size see the same data stream regardless of loss weights.
    During the first ``warmup_epochs`` the regularizer weights are zero but
    their values are still computed and logged.
    """
    state = state if state is not None else init_state(cfg, world)
    if cfg.total_steps == 0:
        return state, []
    if eval_batch is None and cfg.eval_every:
        eval_batch = eval_set(world, cfg.eval_size)
    hp = cfg.hyperparams
    warm_hp = hp.with_weights(0.0, 0.0, 0.0)
    rows = []
    for step in range(state.step, cfg.total_steps):
        seed = batch_seed(cfg, step)
        rng = np.random.default_rng(seed)
        batch = sample_batch(world, cfg.batch_size, cfg.fn_rate, rng)
        audio = batch.audio
        if cfg.aug_sigma:
            audio = audio + cfg.aug_sigma * rng.standard_normal(audio.shape)

        state.params.zero_grad()
        with nd.Tape() as tape:
            parts = forward_losses(state.params, audio, batch.images,
                                   warm_hp if step < cfg.warmup_steps else hp)
        values = parts.values()
        if not all(math.isfinite(x) for x in values.values()):
            raise TrainingDiverged(step, seed, values)
        nd.backward(parts.total, tape)
        adam_step(state, {k: t.grad for k, t in state.params.tensors.items()}, cfg)

        row = {"step": step, "epoch": step // cfg.steps_per_epoch, **values}
        done = step + 1
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.total_steps):
            row.update(evaluate_params(state.params, eval_batch, cfg.loc_threshold).summary())
            log.debug("step %d: %s", step, row)
        rows.append(row)
    return state, rows


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, restval="", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
