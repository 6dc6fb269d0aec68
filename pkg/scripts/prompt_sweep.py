"""Full-objective accuracy as a function of prompt count and insertion layer.

    python3 scripts/prompt_sweep.py --num-prompts 1 2 4 --layers 1 2 3
"""
import argparse
import itertools
import logging

import numpy as np
import yaml

from _overrides import apply_overrides
from apgcl.experiment import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--out", default="runs/prompt_sweep")
    ap.add_argument("--num-prompts", nargs="+", type=int, default=[1, 2, 4])
    ap.add_argument("--layers", nargs="+", type=int, default=[1, 2, 3])
    ap.add_argument("--seeds", nargs="+", type=int)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    with open(args.config) as fh:
        base = apply_overrides(yaml.safe_load(fh) or {}, args.set)
    rows = []
    for n_p, layer in itertools.product(args.num_prompts, args.layers):
        raw = yaml.safe_load(yaml.safe_dump(base))
        raw.setdefault("train", {})["num_prompts"] = n_p
        raw.setdefault("backbone", {})["prompt_layer"] = layer
        raw["out"] = f"{args.out}/np{n_p}-l{layer}"
        cfg = ExperimentConfig.from_dict(raw)
        accs = [run_experiment(cfg.resolved(seed=s, ablation="full"))["avg_acc"] for s in args.seeds or cfg.seeds]
        rows.append((n_p, layer, float(np.mean(accs)), accs))

    print(f"\n{'N_P':>4}{'layer':>7}{'avg_acc':>10}")
    for n_p, layer, mean, accs in rows:
        print(f"{n_p:>4}{layer:>7}{mean:>10.2f}  {[round(a, 2) for a in accs]}")


if __name__ == "__main__":
    main()
