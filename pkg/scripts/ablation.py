"""Train the three student variants over several seeds from one teacher and
compare their mean return on the mixed-terrain suite at grid noise 0.1.

    python3 scripts/ablation.py --teacher runs/teacher/policy.ckpt --out runs/ablation
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from dppo.config import load
from dppo.trainer import evaluate_checkpoint, train_student

ROOT = Path(__file__).resolve().parents[1]
VARIANTS = ("dppo", "distill", "rl")


def run_ablation(teacher, out, seeds=(1, 2, 3), noise=0.1, configs=ROOT / "configs", log=print):
    out = Path(out)
    suite = load(configs / "eval_mixed.cfg").with_section("eval", noise_levels=(noise,))
    returns = {}
    for seed in seeds:
        for variant in VARIANTS:
            t0 = time.perf_counter()
            run = load(configs / f"student_{variant}.cfg").with_section("stage", seed=seed)
            res = train_student(run, teacher, out / f"{variant}_{seed}")
            rep = evaluate_checkpoint(res.policy_path, suite, out / f"{variant}_{seed}" / "eval")
            returns[(variant, seed)] = float(np.mean([r["mean_return"] for r in rep.rows]))
            log(f"{variant:>8s} seed {seed}: mean return {returns[(variant, seed)]:9.2f} "
                f"({time.perf_counter() - t0:.0f} s)")
    return returns


def ordering_holds(returns, seed):
    d, b, r = (returns[(v, seed)] for v in VARIANTS)
    return d >= b and d >= r and r >= b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--teacher", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", default="1,2,3")
    args = ap.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    returns = run_ablation(args.teacher, args.out, seeds, log=lambda s: print(s, flush=True))
    with open(Path(args.out) / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", *VARIANTS, "ordering"])
        for s in seeds:
            w.writerow([s, *(f"{returns[(v, s)]:.6g}" for v in VARIANTS), int(ordering_holds(returns, s))])
    held = sum(ordering_holds(returns, s) for s in seeds)
    print(f"ordering dppo >= rl >= distill holds in {held}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
