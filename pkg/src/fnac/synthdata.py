"""Synthetic paired audio/visual world.

Each class owns an audio prototype and a visual prototype. A sample's audio
is its class prototype plus noise; its image is an ``h x w`` grid of patch
vectors where one rectangle (the sounding region) shows the class's visual
prototype, an optional disjoint rectangle shows a silent distractor of
another class, and the rest is background.

The noise has an i.i.d. part and a per-sample *scene* part that is shared
between the audio and the background patches (ambient sound and backdrop
of the same recording). The scene is what lets instance discrimination
tell apart two same-class pairs, so it is the spurious cue false negatives
push a plain contrastive model towards.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_MAGIC = b"FNACDS01"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 10
    d_a_raw: int = 16
    d_v_raw: int = 16
    h: int = 5
    w: int = 5
    noise_sigma: float = 0.3
    distractor_prob: float = 0.5
    region_min: int = 3
    region_max: int = 8
    seed: int = 0
    heldout_classes: int = 0
    scene_dim: int = 4
    scene_coupling: float = 1.0
    background_sigma: float = 0.0
    audio_sigma: Optional[float] = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if not 0 <= self.heldout_classes < self.n_classes - 1:
            raise ValueError("heldout_classes must leave at least two training classes")
        if not 1 <= self.region_min <= self.region_max <= self.h * self.w:
            raise ValueError(f"region bounds [{self.region_min}, {self.region_max}] do not fit "
                             f"a {self.h}x{self.w} grid")
        if not _rectangles(self.h, self.w, self.region_min, self.region_max):
            raise ValueError("no rectangle with an admissible area fits the grid")
        if not 0 <= self.distractor_prob <= 1:
            raise ValueError("distractor_prob must lie in [0, 1]")
        if min(self.noise_sigma, self.scene_coupling, self.background_sigma, self.audio_noise) < 0:
            raise ValueError("noise_sigma, scene_coupling and background_sigma must be non-negative")
        if min(self.d_a_raw, self.d_v_raw, self.scene_dim) < 1:
            raise ValueError("raw and scene dimensions must be positive")

    @property
    def audio_noise(self) -> float:
        return self.noise_sigma if self.audio_sigma is None else self.audio_sigma

    @property
    def train_classes(self) -> int:
        return self.n_classes - self.heldout_classes

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    audio_raw: np.ndarray          # (d_a_raw,)
    image_raw: np.ndarray          # (h, w, d_v_raw)
    class_id: int
    gt_mask: np.ndarray            # (h, w) bool
    distractor_class: Optional[int] = None
    distractor_mask: Optional[np.ndarray] = None
    distractor_skipped: bool = False


@dataclass
class Batch:
    samples: list
    fn_pair_count: int = 0
    rewritten: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def audio(self) -> np.ndarray:
        return np.stack([s.audio_raw for s in self.samples])

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image_raw for s in self.samples])

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([s.class_id for s in self.samples])

    @property
    def gt_masks(self) -> np.ndarray:
        return np.stack([s.gt_mask for s in self.samples])

    @property
    def distractor_masks(self) -> np.ndarray:
        return np.stack([s.distractor_mask for s in self.samples])

    @property
    def has_distractor(self) -> np.ndarray:
        return np.array([s.distractor_class is not None for s in self.samples])


@dataclass(frozen=True)
class _Prototypes:
    audio: np.ndarray        # (C, d_a_raw)
    visual: np.ndarray       # (C, d_v_raw)
    background: np.ndarray   # (d_v_raw,)
    scene_audio: np.ndarray  # (scene_dim, d_a_raw)
    scene_visual: np.ndarray  # (scene_dim, d_v_raw)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@lru_cache(maxsize=32)
def prototypes(cfg: WorldConfig) -> _Prototypes:
    rng = np.random.default_rng([cfg.seed, 0x9807])
    return _Prototypes(
        audio=_unit_rows(rng.standard_normal((cfg.n_classes, cfg.d_a_raw))),
        visual=_unit_rows(rng.standard_normal((cfg.n_classes, cfg.d_v_raw))),
        background=_unit_rows(rng.standard_normal(cfg.d_v_raw)),
        scene_audio=rng.standard_normal((cfg.scene_dim, cfg.d_a_raw)) / math.sqrt(cfg.scene_dim),
        scene_visual=rng.standard_normal((cfg.scene_dim, cfg.d_v_raw)) / math.sqrt(cfg.scene_dim),
    )


@lru_cache(maxsize=64)
def _rectangles(h: int, w: int, amin: int, amax: int) -> tuple:
    out = []
    for rh in range(1, h + 1):
        for rw in range(1, w + 1):
            if amin <= rh * rw <= amax:
                out.extend((top, left, rh, rw)
                           for top in range(h - rh + 1) for left in range(w - rw + 1))
    return tuple(out)


def _rect_mask(h: int, w: int, rect) -> np.ndarray:
    top, left, rh, rw = rect
    m = np.zeros((h, w), dtype=bool)
    m[top:top + rh, left:left + rw] = True
    return m


@lru_cache(maxsize=64)
def _disjoint_index(h: int, w: int, amin: int, amax: int) -> tuple:
    rects = _rectangles(h, w, amin, amax)
    masks = [_rect_mask(h, w, r) for r in rects]
    return tuple(tuple(j for j, mj in enumerate(masks) if not (mi & mj).any()) for mi in masks)


def generate_sample(cfg: WorldConfig, class_id: int, rng: np.random.Generator) -> Sample:
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class_id {class_id} outside [0, {cfg.n_classes})")
    proto = prototypes(cfg)
    h, w, sigma = cfg.h, cfg.w, cfg.noise_sigma
    rects = _rectangles(h, w, cfg.region_min, cfg.region_max)

    scene = rng.standard_normal(cfg.scene_dim) * cfg.scene_coupling
    audio = proto.audio[class_id] + cfg.audio_noise * (rng.standard_normal(cfg.d_a_raw) + scene @ proto.scene_audio)

    k = int(rng.integers(len(rects)))
    gt = _rect_mask(h, w, rects[k])
    image = np.empty((h, w, cfg.d_v_raw))
    image[:] = proto.background + sigma * (scene @ proto.scene_visual)
    if cfg.background_sigma:
        image += cfg.background_sigma * rng.standard_normal(image.shape)
    image[gt] = proto.visual[class_id]

    distractor_class = None
    distractor_mask = np.zeros((h, w), dtype=bool)
    skipped = False
    if rng.random() < cfg.distractor_prob:
        options = _disjoint_index(h, w, cfg.region_min, cfg.region_max)[k]
        if options:
            j = options[int(rng.integers(len(options)))]
            distractor_mask = _rect_mask(h, w, rects[j])
            other = int(rng.integers(cfg.n_classes - 1))
            distractor_class = other + (other >= class_id)
            image[distractor_mask] = proto.visual[distractor_class]
        else:
            skipped = True
    image += sigma * rng.standard_normal(image.shape)
    return Sample(audio, image, class_id, gt, distractor_class, distractor_mask, skipped)


def fn_pair_count(class_ids) -> int:
    """Number of unordered same-class pairs."""
    counts = np.bincount(np.asarray(class_ids, dtype=np.int64))
    return int((counts * (counts - 1) // 2).sum())


def sample_batch(cfg: WorldConfig, b: int, fn_rate: float, rng: np.random.Generator) -> Batch:
    """Draw ``b`` pairs with uniform classes, then force ``ceil(fn_rate*(b-1))``
    non-anchor samples to share the anchor's (index 0) class."""
    if b < 2:
        raise ValueError("batch size must be at least 2")
    if not 0 <= fn_rate <= 1:
        raise ValueError(f"fn_rate must lie in [0, 1], got {fn_rate}")
    classes = rng.integers(cfg.train_classes, size=b)
    n_rewrite = math.ceil(fn_rate * (b - 1) - 1e-9)
    rewritten = []
    if n_rewrite:
        rewritten = sorted(int(i) for i in 1 + rng.choice(b - 1, size=n_rewrite, replace=False))
        classes[rewritten] = classes[0]
    samples = [generate_sample(cfg, int(c), rng) for c in classes]
    return Batch(samples, fn_pair_count(classes), rewritten)


def batch_of_classes(cfg: WorldConfig, classes, rng: np.random.Generator) -> Batch:
    samples = [generate_sample(cfg, int(c), rng) for c in classes]
    return Batch(samples, fn_pair_count(classes))


def eval_set(cfg: WorldConfig, n: int, seed_offset: int = 0xE7A1) -> Batch:
    """Held-out evaluation pairs from a seed reserved for evaluation."""
    rng = np.random.default_rng([cfg.seed, seed_offset])
    return batch_of_classes(cfg, rng.integers(cfg.train_classes, size=n), rng)


def heldout_set(cfg: WorldConfig, n: int) -> Batch:
    """Pairs drawn only from the held-out classes."""
    if cfg.heldout_classes == 0:
        raise ValueError("world has no held-out classes")
    rng = np.random.default_rng([cfg.seed, 0x4E1D])
    classes = cfg.train_classes + rng.integers(cfg.heldout_classes, size=n)
    return batch_of_classes(cfg, classes, rng)


# ----------------------------------------------------------- false negatives


def fn_incidence(class_histogram, b: int, trials: int = 0, rng: Optional[np.random.Generator] = None,
                 chunk: int = 4096) -> tuple:
    """Probability that a sample has at least one same-class companion in its batch.

    Returns ``(analytic, monte_carlo)``. The analytic value is exact for i.i.d.
    class draws with frequencies proportional to the histogram:
    ``sum_c p_c (1 - (1 - p_c)^(b-1))``, which is ``1 - (1 - 1/C)^(b-1)`` for
    ``C`` uniform classes. ``monte_carlo`` is None when ``trials == 0``.
    """
    counts = np.asarray(class_histogram, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0 or (counts < 0).any() or counts.sum() <= 0:
        raise ValueError("class histogram must be a non-empty vector of non-negative counts")
    if b < 1:
        raise ValueError("batch size must be positive")
    p = counts / counts.sum()
    analytic = float(np.sum(p * (1.0 - (1.0 - p) ** (b - 1))))
    if trials <= 0:
        return analytic, None
    if b == 1:
        return analytic, 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    hits = 0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        draws = np.sort(rng.choice(p.size, size=(n, b), p=p), axis=1)
        same = draws[:, 1:] == draws[:, :-1]
        has = np.zeros((n, b), dtype=bool)
        has[:, 1:] |= same
        has[:, :-1] |= same
        hits += int(has.sum())
        done += n
    return analytic, hits / (trials * b)


# ----------------------------------------------------------------- file I/O


def _sample_record(s: Sample) -> bytes:
    dc = -1 if s.distractor_class is None else s.distractor_class
    return b"".join([
        struct.pack("<ii", s.class_id, dc),
        np.packbits(s.gt_mask.reshape(-1)).tobytes(),
        np.packbits(s.distractor_mask.reshape(-1)).tobytes(),
        s.audio_raw.astype("<f8").tobytes(),
        s.image_raw.astype("<f8").tobytes(),
    ])


def write_dataset(path, cfg: WorldConfig, samples, seed: int) -> None:
    """Binary dataset: magic, u32 header length, JSON header, fixed-size records.

    Record layout (little-endian): class id i32, distractor class i32 (-1 if
    none), gt mask and distractor mask as packed bitmaps of ``h*w`` bits each,
    audio as ``d_a_raw`` f64, image as ``h*w*d_v_raw`` f64 in row-major
    (row, column, channel) order.
    """
    header = json.dumps({"version": FORMAT_VERSION, "seed": seed, "n_samples": len(samples),
                         "config": cfg.to_dict()}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for s in samples:
            fh.write(_sample_record(s))


def read_dataset(path) -> tuple:
    """Inverse of :func:`write_dataset`; returns ``(cfg, header, samples)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != FORMAT_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    if header["version"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {header['version']}")
    cfg = WorldConfig(**header["config"])
    hw = cfg.h * cfg.w
    nbits = (hw + 7) // 8
    off = 12 + hlen
    samples = []
    for _ in range(header["n_samples"]):
        cid, dc = struct.unpack_from("<ii", raw, off)
        off += 8
        gt = np.unpackbits(np.frombuffer(raw, np.uint8, nbits, off))[:hw].reshape(cfg.h, cfg.w).astype(bool)
        off += nbits
        dm = np.unpackbits(np.frombuffer(raw, np.uint8, nbits, off))[:hw].reshape(cfg.h, cfg.w).astype(bool)
        off += nbits
        audio = np.frombuffer(raw, "<f8", cfg.d_a_raw, off).astype(np.float64)
        off += 8 * cfg.d_a_raw
        image = np.frombuffer(raw, "<f8", hw * cfg.d_v_raw, off).astype(np.float64)
        off += 8 * hw * cfg.d_v_raw
        samples.append(Sample(audio, image.reshape(cfg.h, cfg.w, cfg.d_v_raw), cid, gt,
                              None if dc < 0 else dc, dm))
    return cfg, header, samples


def write_jsonl(path, samples) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({
                "class_id": s.class_id,
                "distractor_class": s.distractor_class,
                "gt_mask": s.gt_mask.astype(int).tolist(),
                "distractor_mask": s.distractor_mask.astype(int).tolist(),
                "audio_raw": s.audio_raw.tolist(),
                "image_raw": s.image_raw.tolist(),
            }) + "\n")
