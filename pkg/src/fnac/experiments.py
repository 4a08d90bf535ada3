"""Deterministic experiment procedures with machine-readable verdicts.

Each procedure is a pure function of its configs and seed list. Results come
back as an :class:`ExperimentReport` whose verdict fields are recomputed from
the per-condition table it carries.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import ndtensor as nd
from .losses import HyperParams
from .localization import region_activation
from .model import EncoderParams, encode_arrays
from .synthdata import Batch, WorldConfig, batch_of_classes, eval_set
from .trainer import TrainConfig, evaluate_params, predict_maps, train

#: (alpha, beta, gamma) switches for the six ablation rows.
ABLATION_ROWS = {
    "baseline": (0, 0, 0),
    "audio_adj": (1, 0, 0),
    "image_adj": (0, 1, 0),
    "fns": (1, 1, 0),
    "tne": (0, 0, 1),
    "full": (1, 1, 1),
}


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    eval_size: int = 512
    rates: tuple = (0.0, 0.25, 0.5, 0.75)
    batch_sizes: tuple = (16, 128)
    margin_batch: int = 10
    distractor_prob: float = 0.8
    threads: int = 1

    def __post_init__(self):
        for name in ("seeds", "rates", "batch_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.eval_size < 1 or self.margin_batch < 2 or self.threads < 1:
            raise ValueError("eval_size, margin_batch and threads must be positive (margin_batch >= 2)")
        if not 0 <= self.distractor_prob <= 1:
            raise ValueError("distractor_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ExperimentReport:
    name: str
    config: dict
    seeds: list
    table: list                      # one dict per (condition, seed)
    verdict: dict
    matrices: dict = field(default_factory=dict)   # name -> 2-D array

    def to_dict(self) -> dict:
        return {"name": self.name, "config": self.config, "seeds": list(self.seeds),
                "table": self.table, "verdict": self.verdict,
                "matrices": sorted(self.matrices)}

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True)

    def write(self, directory) -> Path:
        """Write ``report.json``, ``table.csv`` and one CSV per similarity matrix."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json() + "\n")
        columns = _columns(self.table)
        with open(directory / "table.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for row in self.table:
                writer.writerow({k: _cell(v) for k, v in row.items()})
        for key, mat in self.matrices.items():
            np.savetxt(directory / f"sim_{key}.csv", np.asarray(mat), delimiter=",", fmt="%.17g")
        return directory

    @classmethod
    def read(cls, directory) -> "ExperimentReport":
        directory = Path(directory)
        doc = json.loads((directory / "report.json").read_text())
        mats = {k: np.loadtxt(directory / f"sim_{k}.csv", delimiter=",", ndmin=2) for k in doc["matrices"]}
        return cls(doc["name"], doc["config"], doc["seeds"], doc["table"], doc["verdict"], mats)


def _clean(obj):
    # JSON has no NaN; map it to null
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def _columns(rows) -> list:
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    return cols


def run_dir(root, name: str, seed: int) -> Path:
    """Fresh directory ``<root>/<name>-<UTC timestamp>-seed<seed>``."""
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    base = Path(root) / f"{name}-{stamp}-seed{seed}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _weights(hp: HyperParams, row: str) -> HyperParams:
    a, b, g = ABLATION_ROWS[row]
    return hp.with_weights(hp.alpha * a, hp.beta * b, hp.gamma * g)


def train_condition(world: WorldConfig, cfg: TrainConfig, ev: Batch) -> tuple:
    state, _ = train(cfg, world)
    return state.params, evaluate_params(state.params, ev, cfg.loc_threshold)


def _mean_by(table, key, value) -> dict:
    groups: dict = {}
    for r in table:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def _base_config(world, cfg, exp) -> dict:
    return {"world": world.to_dict(), "train": cfg.to_dict(), "experiment": exp.to_dict()}


# ------------------------------------------------------------------ pilot


def pilot_fn_sweep(world: WorldConfig, cfg: TrainConfig, exp: ExperimentConfig) -> ExperimentReport:
    """NCE-only CIoU as a function of the injected false-negative rate."""
    rates = list(exp.rates)
    if len(rates) < 3:
        raise ExperimentError("rank correlation needs at least three rates")
    if rates != sorted(rates) or not all(0 <= r <= 1 for r in rates):
        raise ExperimentError("rates must be ascending values in [0, 1]")
    ev = eval_set(world, exp.eval_size)
    hp = cfg.hyperparams.with_weights(0.0, 0.0, 0.0)
    jobs = [(r, s) for r in rates for s in exp.seeds]

    def job(item):
        r, s = item
        _, m = train_condition(world, cfg.replace(fn_rate=r, seed=s, hyperparams=hp), ev)
        return {"fn_rate": r, "seed": s, **m.summary()}

    table = _pmap(job, jobs, exp.threads)
    verdict = pilot_verdict(table)
    return ExperimentReport("pilot-fn-sweep", _base_config(world, cfg, exp), list(exp.seeds), table, verdict)


def pilot_verdict(table) -> dict:
    means = _mean_by(table, "fn_rate", "ciou")
    rates = sorted(means)
    rho = spearman(rates, [means[r] for r in rates])
    pooled = spearman([r["fn_rate"] for r in table], [r["ciou"] for r in table])
    return {"mean_ciou": {str(r): means[r] for r in rates}, "spearman": rho,
            "spearman_pooled": pooled, "pass": bool(rho <= -0.8)}


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; NaN when either side is constant."""
    if len(set(x)) < 2 or len(set(y)) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


# ------------------------------------------------------------------ ablation


def ablation(world: WorldConfig, cfg: TrainConfig, exp: ExperimentConfig,
             rows: Sequence[str] = tuple(ABLATION_ROWS), keep_params: bool = False):
    """Train every ablation row on identical seeds and batch streams.

    The configured ``alpha``, ``beta`` and ``gamma`` are the weights of the full
    model; each row switches a subset of them off. With ``keep_params`` the
    trained parameters are returned as ``{(row, seed): params}`` alongside.
    """
    unknown = set(rows) - set(ABLATION_ROWS)
    if unknown:
        raise ExperimentError(f"unknown ablation rows {sorted(unknown)}")
    ev = eval_set(world, exp.eval_size)
    jobs = [(r, s) for r in rows for s in exp.seeds]

    def job(item):
        row, s = item
        c = cfg.replace(seed=s, hyperparams=_weights(cfg.hyperparams, row))
        params, m = train_condition(world, c, ev)
        hp = c.hyperparams
        return params, {"row": row, "seed": s, "alpha": hp.alpha, "beta": hp.beta, "gamma": hp.gamma,
                        "batch_seed_root": s, **m.summary()}

    results = _pmap(job, jobs, exp.threads)
    table = [r for _, r in results]
    report = ExperimentReport("ablate", _base_config(world, cfg, exp), list(exp.seeds), table,
                              ablation_verdict(table))
    if keep_params:
        return report, {k: p for k, (p, _) in zip(jobs, results)}
    return report


def ablation_verdict(table) -> dict:
    m = _mean_by(table, "row", "ciou")
    out = {"mean_ciou": m}
    if {"baseline", "fns", "tne", "full"} <= set(m):
        out.update(
            full_minus_baseline=m["full"] - m["baseline"],
            full_gt_fns_gt_baseline=bool(m["full"] > m["fns"] > m["baseline"]),
            full_gt_tne_gt_baseline=bool(m["full"] > m["tne"] > m["baseline"]),
        )
        out["pass"] = bool(out["full_gt_fns_gt_baseline"] and out["full_gt_tne_gt_baseline"]
                           and out["full_minus_baseline"] >= 0.05)
    return out


# ------------------------------------------------------------------ margins


def similarity_matrix(params: EncoderParams, batch: Batch) -> np.ndarray:
    """Audio-row by pooled-visual-column cosine matrix."""
    with nd.no_grad():
        emb = encode_arrays(params, batch.audio, batch.images)
        return emb.z_audio.data @ emb.z_visual_pooled.data.T


def margin_batches(world: WorldConfig, b: int, seed: int) -> tuple:
    """An all-one-class batch and an all-distinct-class batch of size ``b``."""
    if world.train_classes < b:
        raise ExperimentError(f"cannot draw {b} distinct classes from {world.train_classes}")
    rng = np.random.default_rng([seed, 0x3A26])
    c = int(rng.integers(world.train_classes))
    fn = batch_of_classes(world, [c] * b, rng)
    tn = batch_of_classes(world, rng.permutation(world.train_classes)[:b], rng)
    return fn, tn


def margin_test(world: WorldConfig, models: dict, b: int, seed: int) -> tuple:
    """Mean audio-visual cosine on a false-negative and a true-negative batch.

    ``models`` maps a label to parameters. Means run over all ``b x b``
    entries. Returns ``(rows, matrices)``.
    """
    fn, tn = margin_batches(world, b, seed)
    rows, mats = [], {}
    for label, params in models.items():
        s_fn, s_tn = similarity_matrix(params, fn), similarity_matrix(params, tn)
        mats[f"{label}_fn_seed{seed}"] = s_fn
        mats[f"{label}_tn_seed{seed}"] = s_tn
        off = ~np.eye(b, dtype=bool)
        rows.append({"model": label, "seed": seed, "fn_mean": float(s_fn.mean()), "tn_mean": float(s_tn.mean()),
                     "margin": float(s_fn.mean() - s_tn.mean()),
                     "fn_diag_minus_offdiag": float(np.diag(s_fn).mean() - s_fn[off].mean())})
    return rows, mats


def margin_experiment(world: WorldConfig, cfg: TrainConfig, exp: ExperimentConfig,
                      trained: Optional[dict] = None) -> ExperimentReport:
    """Train (or reuse) a baseline and a full model per seed and compare margins.

    ``trained`` may supply ``{(row, seed): params}`` for rows ``baseline`` and
    ``full``, as returned by :func:`ablation` with ``keep_params``.
    """
    if world.train_classes < exp.margin_batch:
        raise ExperimentError(f"margin batch {exp.margin_batch} exceeds {world.train_classes} classes")
    if trained is None:
        _, trained = ablation(world, cfg, exp, rows=("baseline", "full"), keep_params=True)
    table, mats = [], {}
    for s in exp.seeds:
        rows, m = margin_test(world, {"baseline": trained[("baseline", s)], "full": trained[("full", s)]},
                              exp.margin_batch, s)
        table.extend(rows)
        mats.update(m)
    margins = _mean_by(table, "model", "margin")
    verdict = {"mean_margin": margins,
               "pass": bool(margins["full"] > margins["baseline"] and margins["full"] > 0.1)}
    return ExperimentReport("margin-test", _base_config(world, cfg, exp), list(exp.seeds), table, verdict, mats)


# ------------------------------------------------------------------ batch size


def batch_sweep(world: WorldConfig, cfg: TrainConfig, exp: ExperimentConfig) -> ExperimentReport:
    """CIoU gap between the full model and the baseline at each batch size."""
    sizes = list(exp.batch_sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes) or sizes[0] < 2:
        raise ExperimentError("batch sizes must be strictly ascending and at least 2")
    ev = eval_set(world, exp.eval_size)
    jobs = [(b, row, s) for b in sizes for row in ("baseline", "full") for s in exp.seeds]

    def job(item):
        b, row, s = item
        c = cfg.replace(batch_size=b, seed=s, hyperparams=_weights(cfg.hyperparams, row))
        _, m = train_condition(world, c, ev)
        return {"batch_size": b, "row": row, "seed": s, **m.summary()}

    table = _pmap(job, jobs, exp.threads)
    return ExperimentReport("batch-sweep", _base_config(world, cfg, exp), list(exp.seeds), table,
                            batch_verdict(table))


def batch_verdict(table) -> dict:
    gaps = {}
    for b in sorted({r["batch_size"] for r in table}):
        sub = [r for r in table if r["batch_size"] == b]
        m = _mean_by(sub, "row", "ciou")
        gaps[b] = m["full"] - m["baseline"]
    sizes = sorted(gaps)
    return {"gap": {str(b): g for b, g in gaps.items()},
            "pass": bool(len(sizes) > 1 and gaps[sizes[-1]] > gaps[sizes[0]])}


# ------------------------------------------------------------------ distractors


def activation_ratio(maps: np.ndarray, gt_masks: np.ndarray, distractor_masks: np.ndarray) -> dict:
    """Mean map activation inside distractor and sounding regions, and their ratio.

    Only samples that contain a distractor take part.
    """
    has = distractor_masks.reshape(len(distractor_masks), -1).any(axis=1)
    if not has.any():
        raise ExperimentError("no sample carries a distractor")
    gt = float(np.mean(region_activation(maps[has], gt_masks[has])))
    dis = float(np.mean(region_activation(maps[has], distractor_masks[has])))
    return {"gt_activation": gt, "distractor_activation": dis,
            "ratio": dis / gt if gt > 0 else float("inf")}


def distractor_test(world: WorldConfig, cfg: TrainConfig, exp: ExperimentConfig,
                    rows: Sequence[str] = ("baseline", "fns", "full")) -> ExperimentReport:
    """Distractor-to-sounding activation ratio for models with and without TNE.

    Training and evaluation use ``world`` with ``distractor_prob`` replaced by
    the experiment's value.
    """
    world = WorldConfig(**{**world.to_dict(), "distractor_prob": exp.distractor_prob})
    ev = eval_set(world, exp.eval_size)
    if not ev.has_distractor.any():
        raise ExperimentError("evaluation set has no distractors")
    _, trained = ablation(world, cfg, exp, rows=rows, keep_params=True)
    table = []
    for (row, s), params in trained.items():
        table.append({"row": row, "seed": s,
                      **activation_ratio(predict_maps(params, ev), ev.gt_masks, ev.distractor_masks)})
    ratios = _mean_by(table, "row", "ratio")
    verdict = {"mean_ratio": ratios}
    if "full" in ratios and "fns" in ratios:
        verdict["pass"] = bool(ratios["full"] < ratios["fns"])
    return ExperimentReport("distractor-test", _base_config(world, cfg, exp), list(exp.seeds), table, verdict)
