"""Command line front-end: ``apgcl {generate-data,run,report,ablate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .data import SyntheticDatasetSpec, generate_synthetic_dataset
from .experiment import ABLATIONS, RESULTS_FILE, ExperimentConfig, report, run_ablation, run_experiment

log = logging.getLogger("apgcl")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "precision", None):
        cfg.precision = int(args.precision)
    if getattr(args, "ablation", None):
        cfg.ablation = args.ablation.lower()
    return cfg


def cmd_generate_data(args) -> int:
    spec = SyntheticDatasetSpec()
    if args.config:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        spec = SyntheticDatasetSpec(**raw.get("synthetic", raw))
    if args.seed is not None:
        spec.seed = args.seed
    out = generate_synthetic_dataset(spec, args.out, overwrite=args.overwrite)
    print(f"wrote {spec.num_classes * spec.train_per_class} train / "
          f"{spec.num_classes * spec.test_per_class} test images to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    for seed in cfg.seeds:
        rec = run_experiment(cfg.resolved(seed=seed) if len(cfg.seeds) > 1 else cfg)
        print(f"{rec['run_id']}: avg_acc={rec['avg_acc']:.2f} forgetting={rec['forgetting']:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    run_ablation(cfg)
    rows = report([Path(cfg.out) / RESULTS_FILE], cfg.out)
    print((Path(cfg.out) / "summary.txt").read_text(), end="")
    return 0 if rows else 1


def cmd_report(args) -> int:
    out = args.out or "."
    report(args.results, out)
    print((Path(out) / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apgcl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic image-folder dataset")
    g.add_argument("--config", help="YAML/JSON with synthetic dataset fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_generate_data)

    for name, func, help_ in (
        ("run", cmd_run, "train and evaluate one configuration"),
        ("ablate", cmd_ablate, f"run every loss ablation ({', '.join(ABLATIONS)})"),
    ):
        r = sub.add_parser(name, help=help_)
        r.add_argument("--config")
        r.add_argument("--seed", type=int)
        r.add_argument("--out")
        r.add_argument("--precision", choices=["32", "64"])
        if name == "run":
            r.add_argument("--ablation", choices=sorted(ABLATIONS), type=str.lower)
        r.set_defaults(func=func)

    rep = sub.add_parser("report", help="summarise results files")
    rep.add_argument("results", nargs="+")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001
        log.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
