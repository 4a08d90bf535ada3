"""Command-line entry point: ``fnac <subcommand> [options]``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Every data product goes to a fresh run directory under ``--out`` (or
``$FNAC_OUT``, default ``runs``) together with ``config.json``, which replays
the run when passed back through ``--config``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .checks import gradient_suite
from .config import SECTIONS, ConfigError, RunConfig, resolve
from .model import ConfigError as ModelConfigError
from .model import load_checkpoint, save_checkpoint
from .synthdata import WorldConfig, eval_set, fn_incidence, sample_batch, write_dataset, write_jsonl
from .trainer import evaluate_params, train, write_log

OUT_ENV = "FNAC_OUT"
log = logging.getLogger("fnac")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(ex._clean(obj), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> str:
    rng = np.random.default_rng([cfg.train.seed, 0x6E4])
    bs = cfg.train.batch_size
    sizes = [bs] * (args.n // bs) + ([args.n % bs] if args.n % bs else [])
    if sizes[-1] == 1:  # batches need two samples; fold the straggler into its neighbour
        sizes.pop()
        sizes[-1] += 1
    samples = []
    for b in sizes:
        samples.extend(sample_batch(cfg.world, b, cfg.train.fn_rate, rng).samples)
    write_dataset(out / "dataset.bin", cfg.world, samples, seed=cfg.train.seed)
    write_jsonl(out / "samples.jsonl", samples)
    return f"wrote {len(samples)} samples"


def cmd_train(cfg: RunConfig, args, out: Path) -> str:
    state, rows = train(cfg.train, cfg.world)
    save_checkpoint(out / "checkpoint.json", state.params, cfg.to_dict(), step=state.step)
    write_log(out / "log.csv", rows)
    metrics = evaluate_params(state.params, eval_set(cfg.world, cfg.experiment.eval_size),
                              cfg.train.loc_threshold)
    _dump(out / "metrics.json", metrics.summary())
    return "ciou {ciou:.4f} auc {auc:.4f} miou {miou:.4f} f {fscore:.4f}".format(**metrics.summary())


def _checkpoint_world(path) -> tuple:
    params, doc = load_checkpoint(path)
    world = WorldConfig(**doc["config"]["world"]) if "world" in doc.get("config", {}) else None
    return params, world


def cmd_eval(cfg: RunConfig, args, out: Path) -> str:
    params, world = _checkpoint_world(args.checkpoint)
    world = world or cfg.world
    metrics = evaluate_params(params, eval_set(world, cfg.experiment.eval_size), cfg.train.loc_threshold)
    _dump(out / "metrics.json", metrics.summary())
    with open(out / "per_sample_iou.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "iou"])
        w.writerows((i, repr(v)) for i, v in enumerate(metrics.per_sample_iou))
    return "ciou {ciou:.4f} auc {auc:.4f} miou {miou:.4f} f {fscore:.4f}".format(**metrics.summary())


def _report(report: ex.ExperimentReport, out: Path) -> str:
    report.write(out)
    return json.dumps(ex._clean(report.verdict), sort_keys=True)


def cmd_pilot(cfg, args, out):
    return _report(ex.pilot_fn_sweep(cfg.world, cfg.train, cfg.experiment), out)


def cmd_ablate(cfg, args, out):
    return _report(ex.ablation(cfg.world, cfg.train, cfg.experiment), out)


def cmd_margin(cfg, args, out):
    return _report(ex.margin_experiment(cfg.world, cfg.train, cfg.experiment), out)


def cmd_batch(cfg, args, out):
    return _report(ex.batch_sweep(cfg.world, cfg.train, cfg.experiment), out)


def cmd_distractor(cfg, args, out):
    return _report(ex.distractor_test(cfg.world, cfg.train, cfg.experiment), out)


def cmd_incidence(cfg: RunConfig, args, out: Path) -> str:
    hist = np.ones(args.classes) if args.histogram is None else np.loadtxt(args.histogram, ndmin=1)
    rng = np.random.default_rng([cfg.train.seed, 0x1C1D])
    analytic, mc = fn_incidence(hist, args.batch, args.trials, rng)
    _dump(out / "incidence.json", {"classes": int(len(hist)), "batch": args.batch, "trials": args.trials,
                                   "analytic": analytic, "monte_carlo": mc})
    text = f"analytic {analytic:.6f}"
    return text + (f" monte_carlo {mc:.6f}" if mc is not None else "")


def cmd_dump_sim(cfg: RunConfig, args, out: Path) -> str:
    params, world = _checkpoint_world(args.checkpoint)
    world = world or cfg.world
    rows, mats = ex.margin_test(world, {"model": params}, cfg.experiment.margin_batch, cfg.train.seed)
    for key, mat in mats.items():
        np.savetxt(out / f"sim_{key}.csv", mat, delimiter=",", fmt="%.17g")
    _dump(out / "margins.json", rows)
    return f"fn {rows[0]['fn_mean']:.4f} tn {rows[0]['tn_mean']:.4f} margin {rows[0]['margin']:.4f}"


def cmd_gradcheck(cfg: RunConfig, args, out: Path) -> str:
    rows = gradient_suite(seed=cfg.train.seed)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows({k: _cell(v) for k, v in r.items()} for r in rows)
    worst = max(r["rel_err"] for r in rows)
    failed = sum(not r["pass"] for r in rows)
    if failed:
        raise GradcheckFailed(f"{failed} of {len(rows)} gradient checks failed (worst {worst:.3g})")
    return f"{len(rows)} gradient checks passed, worst relative error {worst:.3g}"


def _cell(v):
    return repr(v) if isinstance(v, float) else v


class GradcheckFailed(RuntimeError):
    pass


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic dataset"),
    "train": (cmd_train, "train one model and evaluate it"),
    "eval": (cmd_eval, "evaluate a checkpoint on the evaluation set"),
    "pilot-fn-sweep": (cmd_pilot, "baseline CIoU against injected false-negative rate"),
    "ablate": (cmd_ablate, "six-row component ablation"),
    "margin-test": (cmd_margin, "false-negative vs true-negative similarity margins"),
    "batch-sweep": (cmd_batch, "full-minus-baseline CIoU gap per batch size"),
    "distractor-test": (cmd_distractor, "distractor-to-source activation ratios"),
    "fn-incidence": (cmd_incidence, "probability that a batch holds a false negative"),
    "dump-sim-matrix": (cmd_dump_sim, "write audio-visual similarity matrices for a checkpoint"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every loss gradient"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="reseed world, training and experiment seeds")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--threads", type=int, help="worker threads for independent conditions")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fnac", description="Audio-visual contrastive localization lab.",
                     epilog="Any config field can be overridden as --<section>.<field> VALUE "
                            f"with sections {', '.join(SECTIONS)}.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "gen-data":
            p.add_argument("--n", type=int, default=256, help="number of samples")
        if name in ("eval", "dump-sim-matrix"):
            p.add_argument("--checkpoint", required=True)
        if name == "fn-incidence":
            p.add_argument("--classes", type=int, default=309)
            p.add_argument("--batch", type=int, default=128)
            p.add_argument("--trials", type=int, default=0, help="Monte Carlo batches (0 = analytic only)")
            p.add_argument("--histogram", help="text file of per-class counts (overrides --classes)")
    return parser


def split_overrides(rest: list) -> list:
    """Turn ``--section.key value`` / ``--section.key=value`` tokens into pairs."""
    pairs, i = [], 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(rest):
            i += 1
            value = rest[i]
        else:
            raise UsageError(f"option {tok} needs a value")
        pairs.append((key, value))
        i += 1
    return pairs


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        overrides = split_overrides(rest)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        if getattr(args, "n", 2) < 2:
            raise ConfigError("--n must be at least 2")
        if getattr(args, "checkpoint", None) and not Path(args.checkpoint).is_file():
            raise ConfigError(f"checkpoint {args.checkpoint} not found")
        cfg = resolve(args.config, overrides, args.seed, args.threads)
        if args.command == "fn-incidence" and (args.batch < 1 or args.classes < 1 or args.trials < 0):
            raise ConfigError("--classes and --batch must be positive, --trials non-negative")
    except ValueError as exc:
        print(f"fnac: invalid configuration: {exc}", file=sys.stderr)
        return 1

    root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    try:
        out = ex.run_dir(root, args.command, cfg.train.seed)
        (out / "config.json").write_text(cfg.to_json() + "\n")
        summary = COMMANDS[args.command][0](cfg, args, out)
    except (ConfigError, ModelConfigError, ex.ExperimentError) as exc:
        print(f"fnac: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        log.debug("failure", exc_info=True)
        print(f"fnac: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    print(summary)
    print(f"output: {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
