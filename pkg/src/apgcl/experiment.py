"""Experiment configs, the loss-ablation table, run orchestration and reporting."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .checkpoint import save_checkpoint
from .data import ImageFolderSource, SyntheticDatasetSpec, generate_synthetic_dataset
from .knowledge_pool import save_pool
from .losses import TERMS
from .numerics import precision
from .protocol import (
    TrainConfig,
    average_accuracy,
    final_task_average,
    forgetting,
    make_splits,
    run_incremental,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RESULTS_FILE = "results.jsonl"

# enabled loss terms per named config
ABLATIONS: dict[str, tuple[str, ...]] = {
    "c-1": ("cls",),
    "c-2": ("cls", "conC"),
    "c-3": ("cls", "conC", "conA"),
    "c-4": ("cls", "conC", "conA", "attn"),
    "c-5": ("cls", "conC", "conA", "tri"),
    "c-6": ("cls", "conC", "attn", "tri"),
    "full": TERMS,
}


def ablation_weights(name: str) -> dict[str, float]:
    key = name.lower()
    if key not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return {t: 1.0 if t in ABLATIONS[key] else 0.0 for t in TERMS}


@dataclass
class ExperimentConfig:
    dataset_path: str = "data/synthetic"
    synthetic: SyntheticDatasetSpec | None = field(default_factory=SyntheticDatasetSpec)
    base: int = 2
    increments: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: str = "full"
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    run_id: str | None = None
    precision: int = 32

    def __post_init__(self):
        ablation_weights(self.ablation)
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        syn = d.pop("synthetic", {})
        bb = d.pop("backbone", {})
        tr = d.pop("train", {})
        return cls(
            synthetic=None if syn is None else SyntheticDatasetSpec(**syn),
            backbone=BackboneConfig(**bb),
            train=TrainConfig(**tr),
            **d,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self, seed: int | None = None, ablation: str | None = None) -> "ExperimentConfig":
        """Copy with one seed and one ablation applied to the training config."""
        cfg = copy.deepcopy(self)
        if seed is not None:
            cfg.seeds = [seed]
        if ablation is not None:
            cfg.ablation = ablation.lower()
        cfg.ablation = cfg.ablation.lower()
        cfg.train.seed = cfg.seeds[0]
        cfg.train.loss_weights = ablation_weights(cfg.ablation)
        if cfg.run_id is None or seed is not None or ablation is not None:
            cfg.run_id = f"{cfg.ablation}-s{cfg.train.seed}"
        return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k not in ("run_id", "out")}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def ensure_dataset(cfg: ExperimentConfig) -> Path:
    root = Path(cfg.dataset_path)
    if not (root / "manifest.json").exists():
        if cfg.synthetic is None:
            raise FileNotFoundError(f"dataset {root} not found and no synthetic spec given")
        generate_synthetic_dataset(cfg.synthetic, root, overwrite=True)
    return root


def append_record(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def run_experiment(cfg: ExperimentConfig, source=None, on_task_end=None) -> dict:
    """Run one seed of one config; append its record to ``<out>/results.jsonl``.

    Writes ``<out>/<run_id>.ckpt`` and ``<out>/<run_id>.pool`` on success. On
    failure a record with ``status: "failed"`` is flushed and the error re-raised.
    """
    cfg = cfg.resolved() if len(cfg.seeds) == 1 else cfg.resolved(seed=cfg.seeds[0])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    record = {
        "schema_version": SCHEMA_VERSION,
        "run_id": cfg.run_id,
        "ablation": cfg.ablation,
        "config_hash": config_hash(snapshot),
        "config": snapshot,
    }
    t0 = time.perf_counter()
    try:
        with precision(cfg.precision):
            if source is None:
                source = ImageFolderSource(ensure_dataset(cfg))
            spec = make_splits(source.num_classes, cfg.base, cfg.increments, cfg.train.seed)
            result = run_incremental(spec, source, cfg.backbone, cfg.train, on_task_end=on_task_end)
            hist = result.history
            record.update(
                status="ok",
                class_order=spec.class_order,
                task_sizes=spec.sizes,
                stage_union_acc=hist.union,
                acc_matrix=hist.acc,
                avg_acc=average_accuracy(hist),
                forgetting=forgetting(hist) if hist.num_stages > 1 else 0.0,
                final_task_avg=final_task_average(hist),
                loss_log=result.steps,
            )
            save_checkpoint(result.learner, out / f"{cfg.run_id}.ckpt")
            save_pool(result.learner.pool, out / f"{cfg.run_id}.pool")
    except Exception as e:
        record.update(status="failed", error=f"{type(e).__name__}: {e}", wall_clock=time.perf_counter() - t0)
        append_record(out / RESULTS_FILE, record)
        raise
    record["wall_clock"] = time.perf_counter() - t0
    append_record(out / RESULTS_FILE, record)
    log.info("%s: avg_acc=%.2f forgetting=%.2f (%.1fs)", cfg.run_id, record["avg_acc"], record["forgetting"], record["wall_clock"])
    return record


def run_ablation(cfg: ExperimentConfig, names=None) -> list[dict]:
    records = []
    source = None
    for name in names or ABLATIONS:
        for seed in cfg.seeds:
            sub = cfg.resolved(seed=seed, ablation=name)
            if source is None:
                with precision(cfg.precision):
                    source = ImageFolderSource(ensure_dataset(sub))
            records.append(run_experiment(sub, source=source))
    return records


# --------------------------------------------------------------------- report

REPORT_COLUMNS = ["run", "avg_acc", "forgetting", "config_hash"]


def read_results(paths) -> list[dict]:
    """Successful records from results files; malformed lines are skipped with a warning."""
    records = []
    for path in paths:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as e:
            log.warning("skipping %s: %s", path, e)
            continue
        for i, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec.get("status") != "ok":
                    continue
                float(rec["avg_acc"]), float(rec["forgetting"]), rec["run_id"], rec["config_hash"]
                rec["stage_union_acc"] = [float(a) for a in rec["stage_union_acc"]]
            except (ValueError, KeyError, TypeError) as e:
                log.warning("skipping malformed record %s:%d (%s)", path, i, e)
                continue
            records.append(rec)
    return records


def report(paths, out_dir) -> list[dict]:
    """Write ``summary.csv``, ``summary.txt`` and ``accuracy_per_stage.png``.

    Rows are sorted by average accuracy, best first. Raises if no usable record.
    """
    records = read_results(paths)
    if not records:
        raise ValueError("no usable results records")
    rows = sorted(
        (
            {"run": r["run_id"], "avg_acc": float(r["avg_acc"]), "forgetting": float(r["forgetting"]), "config_hash": r["config_hash"]}
            for r in records
        ),
        key=lambda r: -r["avg_acc"],
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    width = max(len(r["run"]) for r in rows) + 2
    lines = [f"{'run':<{width}}{'avg_acc':>9}{'forgetting':>12}  config_hash"]
    lines += [f"{r['run']:<{width}}{r['avg_acc']:>9.2f}{r['forgetting']:>12.2f}  {r['config_hash']}" for r in rows]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for r in sorted(records, key=lambda r: -float(r["avg_acc"])):
        accs = r["stage_union_acc"]
        ax.plot(range(1, len(accs) + 1), accs, marker="o", label=r["run_id"])
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy on seen classes (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "accuracy_per_stage.png", dpi=120)
    plt.close(fig)
    return rows
