"""Two-stream encoders mapping raw synthetic inputs to a shared unit sphere."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

CHECKPOINT_FORMAT = "fnac-checkpoint"
CHECKPOINT_VERSION = 1

PARAM_NAMES = ("audio.w1", "audio.b1", "audio.w2", "audio.b2",
               "visual.w1", "visual.b1", "visual.w2", "visual.b2")


class ConfigError(ValueError):
    """Inputs do not match the encoder configuration."""


@dataclass(frozen=True)
class ModelConfig:
    d_a_raw: int = 16
    d_v_raw: int = 16
    hidden: int = 32
    d: int = 16


@dataclass
class EncoderParams:
    config: ModelConfig
    tensors: dict  # name -> Tensor, ordered as PARAM_NAMES

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self:
            t.grad = None

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
                                           for k, t in self.tensors.items()})

    def as_arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> EncoderParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization for every weight and bias."""
    shapes = {
        "audio.w1": (cfg.d_a_raw, cfg.hidden), "audio.b1": (cfg.hidden,),
        "audio.w2": (cfg.hidden, cfg.d), "audio.b2": (cfg.d,),
        "visual.w1": (cfg.d_v_raw, cfg.hidden), "visual.b1": (cfg.hidden,),
        "visual.w2": (cfg.hidden, cfg.d), "visual.b2": (cfg.d,),
    }
    tensors = {}
    for name in PARAM_NAMES:
        stream, part = name.split(".")
        raw_dim = cfg.d_a_raw if stream == "audio" else cfg.d_v_raw
        fan_in = raw_dim if part.endswith("1") else cfg.hidden
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shapes[name]), requires_grad=True, name=name)
    return EncoderParams(cfg, tensors)


def zero_params(cfg: ModelConfig) -> EncoderParams:
    p = init_params(cfg, np.random.default_rng(0))
    for t in p:
        t.data[...] = 0.0
    return p


@dataclass
class Embeddings:
    z_audio: Tensor            # b x d, unit rows
    z_visual_spatial: Tensor   # b x d x h x w, unit per position
    z_visual_pooled: Tensor    # b x d, unit rows


def _mlp(x: Tensor, params: EncoderParams, stream: str) -> Tensor:
    h = nd.relu(nd.add_bias(nd.matmul(x, params[f"{stream}.w1"]), params[f"{stream}.b1"]))
    return nd.add_bias(nd.matmul(h, params[f"{stream}.w2"]), params[f"{stream}.b2"])


def encode_arrays(params: EncoderParams, audio: np.ndarray, images: np.ndarray) -> Embeddings:
    """Encode ``b x d_a_raw`` audio and ``b x h x w x d_v_raw`` images.

    The visual encoder is shared across patches, so patch ``(r, c)`` of the
    input maps to spatial position ``(r, c)`` of the feature map.
    """
    cfg = params.config
    if audio.ndim != 2 or audio.shape[1] != cfg.d_a_raw:
        raise ConfigError(f"audio input {audio.shape} does not match d_a_raw={cfg.d_a_raw}")
    if images.ndim != 4 or images.shape[-1] != cfg.d_v_raw or images.shape[0] != audio.shape[0]:
        raise ConfigError(f"image input {images.shape} does not match d_v_raw={cfg.d_v_raw}")
    b, h, w, _ = images.shape
    z_a = nd.l2_normalize(_mlp(Tensor(audio), params, "audio"))
    patches = Tensor(images.reshape(b * h * w, cfg.d_v_raw))
    z_p = nd.l2_normalize(_mlp(patches, params, "visual"))
    z_v = nd.transpose(nd.reshape(z_p, (b, h, w, cfg.d)), (0, 3, 1, 2))
    pooled = nd.l2_normalize(nd.avg_pool(z_v))
    return Embeddings(z_a, z_v, pooled)


def encode_batch(params: EncoderParams, batch) -> Embeddings:
    return encode_arrays(params, batch.audio, batch.images)


# ---------------------------------------------------------------- checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, params: EncoderParams, run_config: dict, step: int = 0) -> None:
    """Write a JSON checkpoint.

    Schema::

        {"format": "fnac-checkpoint", "version": 1, "step": int,
         "config_hash": sha256 of the canonical JSON of "config",
         "config": {...run configuration...},
         "model": {"d_a_raw", "d_v_raw", "hidden", "d"},
         "params": {name: {"shape": [...], "data": [flat row-major floats]}}}

    Floats are written with ``repr`` precision, so loading is exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config_hash": config_hash(run_config),
        "config": run_config,
        "model": params.config.__dict__,
        "params": {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                   for k, t in params.tensors.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple:
    """Returns ``(params, doc)`` where ``doc`` holds the config and metadata."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not an FNAC checkpoint")
    if doc["config_hash"] != config_hash(doc["config"]):
        raise ConfigError(f"{path}: config hash mismatch")
    cfg = ModelConfig(**doc["model"])
    tensors = {}
    for name in PARAM_NAMES:
        entry = doc["params"][name]
        tensors[name] = Tensor(np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]),
                               requires_grad=True, name=name)
    return EncoderParams(cfg, tensors), doc
