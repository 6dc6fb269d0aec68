"""Run every loss ablation over the config's seeds and print a mean/std table.

    python3 scripts/ablation_sweep.py --config configs/desk.yaml --out runs/sweep
    python3 scripts/ablation_sweep.py --set train.freeze_mode=non-pretrained --set train.backbone_lr_scale=0.02
"""
import argparse
import logging
from pathlib import Path

import numpy as np
import yaml

from _overrides import apply_overrides
from apgcl.experiment import ABLATIONS, RESULTS_FILE, ExperimentConfig, report, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.yaml")
    ap.add_argument("--out", default="runs/ablation_sweep")
    ap.add_argument("--ablations", nargs="+", default=list(ABLATIONS))
    ap.add_argument("--seeds", nargs="+", type=int)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    with open(args.config) as fh:
        raw = apply_overrides(yaml.safe_load(fh) or {}, args.set)
    raw["out"] = args.out
    cfg = ExperimentConfig.from_dict(raw)
    seeds = args.seeds or cfg.seeds

    table = {}
    for name in args.ablations:
        accs = [run_experiment(cfg.resolved(seed=s, ablation=name))["avg_acc"] for s in seeds]
        table[name] = accs
    report([Path(args.out) / RESULTS_FILE], args.out)

    print(f"\n{'config':<8}{'mean':>8}{'std':>8}  per seed {seeds}")
    for name, accs in table.items():
        print(f"{name:<8}{np.mean(accs):>8.2f}{np.std(accs):>8.2f}  {[round(a, 2) for a in accs]}")


if __name__ == "__main__":
    main()
