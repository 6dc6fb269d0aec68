"""Class-incremental training and evaluation loop."""
from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn

from .apg import APG, APGConfig
from .backbone import BackboneConfig, VisionTransformer, insert_prompts
from .knowledge_pool import KnowledgePool, summarize_class
from .losses import (
    TERMS,
    LossBreakdown,
    TripletBatch,
    apg_consistency_loss,
    attention_loss,
    cross_entropy,
    mine_triplets,
    total_loss,
    triplet_loss,
)
from .numerics import ParameterSet


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------- task splits


@dataclass
class TaskSpec:
    num_classes: int
    base: int
    increments: int
    class_order: list[int]
    tasks: list[list[int]]

    def __post_init__(self):
        seen: set[int] = set()
        for t in self.tasks:
            if seen & set(t):
                raise ProtocolError("task class sets must be disjoint")
            seen |= set(t)
        if seen != set(range(self.num_classes)):
            raise ProtocolError("tasks must cover every class exactly once")

    @property
    def sizes(self) -> list[int]:
        return [len(t) for t in self.tasks]

    def seen_classes(self, stage: int) -> list[int]:
        return [c for t in self.tasks[: stage + 1] for c in t]


def make_splits(num_classes: int, base: int, increments: int, seed: int | None = 0) -> TaskSpec:
    """``B{base}-T{increments}``: one base task, then the rest split as evenly as possible.

    Leftover classes go to the earliest incremental tasks. ``seed=None`` keeps
    the natural class order.
    """
    if base < 1 or increments < 1:
        raise ProtocolError("B and T must both be >= 1")
    if base + increments > num_classes:
        raise ProtocolError(
            f"infeasible split B{base}-T{increments} for {num_classes} classes: "
            "every incremental task needs at least one class"
        )
    if seed is None:
        order = list(range(num_classes))
    else:
        order = [int(c) for c in np.random.default_rng(seed).permutation(num_classes)]
    rest = num_classes - base
    q, r = divmod(rest, increments)
    sizes = [base] + [q + (1 if i < r else 0) for i in range(increments)]
    tasks, start = [], 0
    for s in sizes:
        tasks.append(order[start : start + s])
        start += s
    return TaskSpec(num_classes, base, increments, order, tasks)


# ----------------------------------------------------------------- classifier


class ClassifierHead(nn.Module):
    """Fully connected head over the classes seen so far; rows follow ``class_ids``."""

    def __init__(self, dim: int, init_std: float = 0.02):
        super().__init__()
        self.dim = dim
        self.init_std = init_std
        self.weight = nn.Parameter(torch.zeros(0, dim))
        self.bias = nn.Parameter(torch.zeros(0))
        self.class_ids: list[int] = []

    def __len__(self) -> int:
        return len(self.class_ids)

    def extend(self, new_class_ids, seed: int) -> "ClassifierHead":
        new_class_ids = [int(c) for c in new_class_ids]
        if len(set(new_class_ids)) != len(new_class_ids) or set(new_class_ids) & set(self.class_ids):
            raise ProtocolError(f"duplicate class ids when extending classifier: {new_class_ids}")
        gen = torch.Generator().manual_seed(int(seed))
        k = len(new_class_ids)
        w_new = (torch.randn(k, self.dim, generator=gen, dtype=torch.float64) * self.init_std).to(self.weight.dtype)
        self.weight = nn.Parameter(torch.cat([self.weight.detach(), w_new]))
        self.bias = nn.Parameter(torch.cat([self.bias.detach(), torch.zeros(k, dtype=self.bias.dtype)]))
        self.class_ids.extend(new_class_ids)
        return self

    def index_of(self, labels) -> torch.Tensor:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return torch.tensor([lookup[int(y)] for y in torch.as_tensor(labels).reshape(-1).tolist()], dtype=torch.long)
        except KeyError as e:
            raise ProtocolError(f"class {e} is not covered by the classifier") from None

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return feat @ self.weight.T + self.bias

    def get_extra_state(self):
        return {"class_ids": list(self.class_ids)}

    def set_extra_state(self, state):
        self.class_ids = list(state["class_ids"])

    def _load_from_state_dict(self, state_dict, prefix, *args, **kwargs):
        for name in ("weight", "bias"):
            key = prefix + name
            if key in state_dict and state_dict[key].shape != getattr(self, name).shape:
                setattr(self, name, nn.Parameter(torch.zeros_like(state_dict[key])))
        super()._load_from_state_dict(state_dict, prefix, *args, **kwargs)


def extend_classifier(head: ClassifierHead, new_class_ids, seed: int) -> ClassifierHead:
    return head.extend(new_class_ids, seed)


# ---------------------------------------------------------------------- model


@dataclass
class Forward:
    v_l: torch.Tensor
    prompts: torch.Tensor
    scores: torch.Tensor
    feat: torch.Tensor
    logits: torch.Tensor


class APGNet(nn.Module):
    """Backbone with adaptive prompts inserted after ``prompt_layer``, plus classifier."""

    def __init__(self, bcfg: BackboneConfig, num_prompts: int = 1, apg_heads: int = 4, group_size: int = 1):
        super().__init__()
        self.backbone = VisionTransformer(bcfg)
        self.apg = APG(APGConfig(bcfg.embed_dim, apg_heads, num_prompts, group_size))
        self.head = ClassifierHead(bcfg.embed_dim)

    @property
    def layer(self) -> int:
        return self.backbone.cfg.prompt_layer

    def forward(self, images: torch.Tensor) -> Forward:
        seq, v_l = self.backbone.forward_to_layer(images, self.layer)
        prompts, scores = self.apg.generate(v_l)
        feat = self.backbone.forward_from_layer(insert_prompts(seq, prompts), self.layer)
        return Forward(v_l, prompts, scores, feat, self.head(feat))

    def parameter_set(self) -> ParameterSet:
        return ParameterSet.from_module(self)


# ---------------------------------------------------------------- data + config


class TaskData:
    """Images and labels of one split of one task. Only lives for that task."""

    __slots__ = ("images", "labels", "__weakref__")

    def __init__(self, images: torch.Tensor, labels: torch.Tensor):
        if len(images) != len(labels):
            raise ProtocolError("images and labels differ in length")
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)


class DataSource(Protocol):
    def train_split(self, class_ids) -> TaskData: ...

    def test_split(self, class_ids) -> TaskData: ...


FREEZE_MODES = ("non-pretrained", "frozen")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    schedule: str = "cosine"
    margin: float = 0.2
    num_prompts: int = 1
    group_size: int = 1
    apg_heads: int = 4
    seed: int = 0
    freeze_mode: str = "non-pretrained"
    # step-size multiplier for backbone parameters while they are trainable
    backbone_lr_scale: float = 1.0
    diagonal_cov: bool = False
    loss_weights: dict[str, float] = field(default_factory=lambda: {t: 1.0 for t in TERMS})

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")
        unknown = set(self.loss_weights) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        self.loss_weights = {t: float(self.loss_weights.get(t, 1.0)) for t in TERMS}


# ------------------------------------------------------------------- history


@dataclass
class StageHistory:
    """``acc[s][t]``: accuracy (%) on task t's test set after stage s, for t <= s."""

    acc: list[list[float]] = field(default_factory=list)
    union: list[float] = field(default_factory=list)
    num_tasks: int | None = None

    def add_stage(self, per_task: list[float], union: float) -> None:
        if len(per_task) != len(self.acc) + 1:
            raise ProtocolError("stage row must cover exactly the tasks seen so far")
        self.acc.append([float(a) for a in per_task])
        self.union.append(float(union))

    @property
    def num_stages(self) -> int:
        return len(self.acc)

    def complete(self) -> bool:
        if len(self.union) != len(self.acc) or not self.acc:
            return False
        if any(len(row) != s + 1 for s, row in enumerate(self.acc)):
            return False
        return self.num_tasks is None or self.num_stages == self.num_tasks


def average_accuracy(history: StageHistory) -> float:
    """Mean over stages of the accuracy on the union of seen test sets."""
    if not history.complete():
        raise ProtocolError("average_accuracy needs a complete stage history")
    return sum(history.union) / len(history.union)


def final_task_average(history: StageHistory) -> float:
    """Mean of the per-task accuracies after the last stage."""
    if not history.complete():
        raise ProtocolError("final_task_average needs a complete stage history")
    last = history.acc[-1]
    return sum(last) / len(last)


def forgetting(history: StageHistory) -> float:
    """Mean over earlier tasks of (best accuracy ever reached) minus (final accuracy)."""
    if not history.complete():
        raise ProtocolError("forgetting needs a complete stage history")
    n = history.num_stages
    if n < 2:
        raise ProtocolError("forgetting is undefined for a single stage")
    drops = []
    for t in range(n - 1):
        best = max(history.acc[s][t] for s in range(t, n))
        drops.append(best - history.acc[-1][t])
    return sum(drops) / len(drops)


# ------------------------------------------------------------------- learner


@contextlib.contextmanager
def _threads(n: int):
    old = torch.get_num_threads()
    torch.set_num_threads(max(1, n))
    try:
        yield
    finally:
        torch.set_num_threads(old)


def eval_threads() -> int:
    raw = os.environ.get("APGCL_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ProtocolError(f"APGCL_THREADS must be an integer, got {raw!r}") from None


class IncrementalLearner:
    """Model, knowledge pool and bookkeeping carried across tasks.

    Nothing here keeps a reference to training samples; only pool statistics
    survive a task.
    """

    def __init__(self, bcfg: BackboneConfig, cfg: TrainConfig):
        self.bcfg = bcfg
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.net = APGNet(bcfg, cfg.num_prompts, cfg.apg_heads, cfg.group_size)
        self.pool = KnowledgePool(seed=cfg.seed + 1, diagonal=cfg.diagonal_cov)
        self.task = -1
        self.task_classes: list[list[int]] = []
        if cfg.freeze_mode == "frozen":
            self.net.backbone.freeze(True)

    # -- bookkeeping -------------------------------------------------------

    def begin_task(self, class_ids) -> None:
        """Grow the candidate list and the classifier for a new task's classes."""
        class_ids = [int(c) for c in class_ids]
        self.task += 1
        self.task_classes.append(class_ids)
        base = 1000 * (self.cfg.seed + 1) + self.task
        self.net.apg.candidates.extend(class_ids, seed=2 * base)
        self.net.head.extend(class_ids, seed=2 * base + 1)
        if self.cfg.freeze_mode == "non-pretrained":
            self.net.backbone.freeze(self.task > 0)

    @property
    def old_classes(self) -> list[int]:
        return [c for t in self.task_classes[:-1] for c in t]

    def optimizer(self, total_steps: int):
        backbone = [p for p in self.net.backbone.parameters() if p.requires_grad]
        rest = [p for n, p in self.net.named_parameters() if p.requires_grad and not n.startswith("backbone.")]
        params = [{"params": rest}]
        if backbone:
            params.append({"params": backbone, "lr": self.cfg.lr * self.cfg.backbone_lr_scale})
        if self.cfg.optimizer == "adamw":
            opt = torch.optim.AdamW(params, lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)
        else:
            opt = torch.optim.SGD(params, lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)
        if self.cfg.schedule == "cosine":
            sched = torch.optim.lr_scheduler.LambdaLR(
                opt, lambda k: 0.5 * (1 + math.cos(math.pi * min(k, total_steps) / max(total_steps, 1)))
            )
        else:
            sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 1.0)
        return opt, sched

    # -- objective ---------------------------------------------------------

    def step_losses(self, images: torch.Tensor, labels: torch.Tensor, gen: torch.Generator) -> tuple[LossBreakdown, Forward]:
        w = self.cfg.loss_weights
        net = self.net
        out = net(images)
        parts: dict[str, torch.Tensor] = {"cls": cross_entropy(out.logits, net.head.index_of(labels))}
        if w["attn"]:
            parts["attn"] = attention_loss(out.scores, labels, net.apg.candidates)
        if w["tri"]:
            idx = mine_triplets(labels, gen)
            if len(idx):
                p = out.prompts
                batch = TripletBatch(p[idx[:, 0]], p[idx[:, 1]], p[idx[:, 2]])
                parts["tri"] = triplet_loss(batch, self.cfg.margin)
        old = self.old_classes
        if old and (w["conA"] or w["conC"]):
            for c in old:
                if c not in self.pool:
                    raise ProtocolError(f"knowledge pool is missing old class {c}")
            draw = self.pool.rng.integers(len(old), size=len(labels))
            cs = np.asarray(old)[draw]
            dtype = out.feat.dtype
            if w["conA"]:
                v = torch.as_tensor(self.pool.sample_classes(cs, "l"), dtype=dtype)
                target = torch.as_tensor(self.pool.centroids(cs), dtype=dtype)
                parts["conA"] = apg_consistency_loss(net.apg(v), target)
            if w["conC"]:
                v = torch.as_tensor(self.pool.sample_classes(cs, "final"), dtype=dtype)
                parts["conC"] = cross_entropy(net.head(v), net.head.index_of(cs))
        return total_loss(parts, w), out

    def train_task(self, data: TaskData, log: Callable[[dict], None] | None = None) -> list[dict]:
        """Run ``epochs`` passes over ``data`` with the full objective; return the step log."""
        cfg = self.cfg
        n = len(data)
        if n == 0:
            raise ProtocolError("empty training set")
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        opt, sched = self.optimizer(cfg.epochs * steps_per_epoch)
        gen = torch.Generator().manual_seed(10_007 * (cfg.seed + 1) + self.task)
        self.net.train()
        records = []
        for epoch in range(cfg.epochs):
            order = torch.randperm(n, generator=gen)
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                images, labels = data.images[idx], data.labels[idx]
                opt.zero_grad(set_to_none=True)
                breakdown, out = self.step_losses(images, labels, gen)
                breakdown.total.backward()
                opt.step()
                sched.step()
                rec = {"task": self.task, "epoch": epoch, "step": b, **breakdown.as_floats()}
                rec["attn_norm_err"] = float((out.scores.detach().sum(-1) - 1).abs().max())
                records.append(rec)
                if log is not None:
                    log(rec)
        return records

    @torch.no_grad()
    def features(self, images: torch.Tensor, batch_size: int = 256) -> tuple[torch.Tensor, torch.Tensor]:
        self.net.eval()
        vs, fs = [], []
        for i in range(0, len(images), batch_size):
            out = self.net(images[i : i + batch_size])
            vs.append(out.v_l)
            fs.append(out.feat)
        return torch.cat(vs), torch.cat(fs)

    @torch.no_grad()
    def consolidate(self, data: TaskData) -> None:
        """Summarise every class of the current task into the knowledge pool."""
        self.net.eval()
        dtype = torch.get_default_dtype()

        def apg_fn(mu: np.ndarray) -> np.ndarray:
            return self.net.apg(torch.tensor(mu, dtype=dtype)).double().numpy()

        for c in self.task_classes[-1]:
            mask = data.labels == c
            if not bool(mask.any()):
                raise ProtocolError(f"no training samples for class {c}")
            v_l, feat = self.features(data.images[mask])
            stats = summarize_class(v_l.double().numpy(), feat.double().numpy(), apg_fn, self.cfg.diagonal_cov)
            self.pool.add(c, stats)

    @torch.no_grad()
    def predict(self, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        self.net.eval()
        ids = torch.tensor(self.net.head.class_ids)
        preds = []
        for i in range(0, len(images), batch_size):
            preds.append(ids[self.net(images[i : i + batch_size]).logits.argmax(-1)])
        return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)

    def evaluate(self, test_sets: list[TaskData]) -> tuple[list[float], float]:
        with _threads(eval_threads()):
            return evaluate_predictions([(self.predict(d.images), d.labels) for d in test_sets])


def evaluate_predictions(pairs) -> tuple[list[float], float]:
    """Per-task accuracy (%) and accuracy on the union of all given sets."""
    per_task, hit, total = [], 0, 0
    for pred, labels in pairs:
        pred, labels = torch.as_tensor(pred), torch.as_tensor(labels)
        correct = int((pred == labels).sum())
        per_task.append(100.0 * correct / max(len(labels), 1))
        hit += correct
        total += len(labels)
    return per_task, 100.0 * hit / max(total, 1)


@dataclass
class RunOutput:
    spec: TaskSpec
    history: StageHistory
    steps: list[dict]
    learner: IncrementalLearner


def run_incremental(
    spec: TaskSpec,
    source: DataSource,
    bcfg: BackboneConfig,
    cfg: TrainConfig,
    on_task_end: Callable[[int, IncrementalLearner], None] | None = None,
    log: Callable[[dict], None] | None = None,
) -> RunOutput:
    learner = IncrementalLearner(bcfg, cfg)
    history = StageHistory(num_tasks=len(spec.tasks))
    test_sets: list[TaskData] = []
    steps: list[dict] = []
    for t, classes in enumerate(spec.tasks):
        learner.begin_task(classes)
        data = source.train_split(classes)
        steps.extend(learner.train_task(data, log))
        learner.consolidate(data)
        del data
        if on_task_end is not None:
            on_task_end(t, learner)
        test_sets.append(source.test_split(classes))
        per_task, union = learner.evaluate(test_sets)
        history.add_stage(per_task, union)
    return RunOutput(spec, history, steps, learner)
