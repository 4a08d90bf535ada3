"""Run one reference experiment and write its report.

    python scripts/run_experiment.py ablate --out runs
    python scripts/run_experiment.py all --out runs --threads 2
"""
import argparse
import json
import time

from fnac import experiments as ex
from fnac import presets


def run(name: str, out: str, threads: int):
    world, cfg, exp = presets.ALL[name]()
    exp = ex.ExperimentConfig(**{**exp.to_dict(), "threads": threads})
    fn = {"pilot-fn-sweep": ex.pilot_fn_sweep, "ablate": ex.ablation, "margin-test": ex.margin_experiment,
          "batch-sweep": ex.batch_sweep, "distractor-test": ex.distractor_test}[name]
    start = time.perf_counter()
    report = fn(world, cfg, exp)
    path = report.write(ex.run_dir(out, name, exp.seeds[0]))
    print(f"{name}: {json.dumps(ex._clean(report.verdict), sort_keys=True)}")
    print(f"  {time.perf_counter() - start:.0f}s -> {path}")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=[*presets.ALL, "all"])
    p.add_argument("--out", default="runs")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    for name in presets.ALL if args.experiment == "all" else [args.experiment]:
        run(name, args.out, args.threads)


if __name__ == "__main__":
    main()
