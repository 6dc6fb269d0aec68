"""Training objectives. Every batched loss is reduced by the arithmetic mean."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .apg import CandidateList

TERMS = ("cls", "attn", "tri", "conA", "conC")


class LossError(ValueError):
    pass


def _nll(probs: torch.Tensor, y, name: str) -> torch.Tensor:
    probs = torch.as_tensor(probs)
    single = probs.dim() == 1
    pb = probs.unsqueeze(0) if single else probs
    yb = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if yb.numel() != pb.shape[0]:
        raise LossError(f"{name}: {yb.numel()} labels for {pb.shape[0]} probability rows")
    if bool((yb < 0).any()) or bool((yb >= pb.shape[-1]).any()):
        raise LossError(f"{name}: label out of range for {pb.shape[-1]} classes")
    picked = pb.gather(-1, yb.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).mean()


def classification_loss(probs: torch.Tensor, y) -> torch.Tensor:
    """Negative log-probability of the true class."""
    return _nll(probs, y, "classification_loss")


def classifier_consistency_loss(probs: torch.Tensor, c) -> torch.Tensor:
    """Negative log-probability of the old class a knowledge vector was sampled from."""
    return _nll(probs, c, "classifier_consistency_loss")


def cross_entropy(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Log-domain equivalent of ``classification_loss(softmax(logits), y)``."""
    if bool((y < 0).any()) or bool((y >= logits.shape[-1]).any()):
        raise LossError(f"label out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, y)


def attention_loss(scores: torch.Tensor, y, candidates: CandidateList) -> torch.Tensor:
    """Summed negative log attention on the label's own candidate group.

    ``scores`` is (n_h, N_P, N) for one sample or (B, n_h, N_P, N).
    The sum over heads, outputs and group rows is not normalised.
    """
    single = scores.dim() == 3
    sb = scores.unsqueeze(0) if single else scores
    yb = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if sb.shape[-1] != len(candidates):
        raise LossError("attention record does not match candidate list length")
    try:
        mask = candidates.group_mask(yb)
    except KeyError as e:
        raise LossError(f"attention_loss: unseen class ({e})") from None
    logs = torch.log(sb)  # (B, n_h, N_P, N)
    per_sample = -(logs * mask[:, None, None, :].to(logs.dtype)).sum(dim=(1, 2, 3))
    return per_sample.mean()


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - cos(a, b)`` over flattened trailing (N_P, d) prompt matrices."""
    a = a.reshape(a.shape[0], -1) if a.dim() > 1 else a.reshape(1, -1)
    b = b.reshape(b.shape[0], -1) if b.dim() > 1 else b.reshape(1, -1)
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise LossError("degenerate prompt: zero-norm vector in cosine distance")
    return 1.0 - (a * b).sum(-1) / (na * nb)


@dataclass
class TripletBatch:
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    labels: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None

    def __post_init__(self):
        if not (self.anchor.shape == self.positive.shape == self.negative.shape):
            raise LossError("triplet members must share a shape")
        if self.labels is not None:
            y1, y2, y3 = (torch.as_tensor(t) for t in self.labels)
            if not bool((y1 == y2).all()) or bool((y1 == y3).any()):
                raise LossError("triplet labels must satisfy y1 == y2 != y3")


def triplet_loss(batch: TripletBatch, margin: float = 0.2) -> torch.Tensor:
    if margin < 0:
        raise LossError("margin must be non-negative")
    single = batch.anchor.dim() == 2
    a, p, n = (t.unsqueeze(0) if single else t for t in (batch.anchor, batch.positive, batch.negative))
    d_p = cosine_distance(a, p)
    d_n = cosine_distance(a, n)
    return torch.clamp(d_p - d_n + margin, min=0).mean()


def mine_triplets(labels: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """One uniformly random (anchor, positive, negative) index triple per valid anchor.

    Returns a (T, 3) long tensor; T is zero when the batch has no valid triplet.
    """
    labels = labels.tolist()
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        by_class.setdefault(y, []).append(i)
    out = []
    n = len(labels)
    for i, y in enumerate(labels):
        pos = [j for j in by_class[y] if j != i]
        if not pos or len(by_class[y]) == n:
            continue
        neg = [j for j in range(n) if labels[j] != y]
        pj = pos[int(torch.randint(len(pos), (1,), generator=generator))]
        nj = neg[int(torch.randint(len(neg), (1,), generator=generator))]
        out.append((i, pj, nj))
    if not out:
        return torch.zeros(0, 3, dtype=torch.long)
    return torch.tensor(out, dtype=torch.long)


def apg_consistency_loss(generated: torch.Tensor, centroid_prompt: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between generated prompts and the stored centroid prompts."""
    if generated.shape != centroid_prompt.shape:
        raise LossError(
            f"shape mismatch: generated {tuple(generated.shape)} vs centroid {tuple(centroid_prompt.shape)}"
        )
    return (generated - centroid_prompt).abs().mean()


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    attn: torch.Tensor
    tri: torch.Tensor
    conA: torch.Tensor
    conC: torch.Tensor
    total: torch.Tensor = field(init=False)
    weights: dict[str, float] | None = None

    def __post_init__(self):
        w = self.weights or {}
        self.total = sum(w.get(t, 1.0) * getattr(self, t) for t in TERMS)

    def as_floats(self) -> dict[str, float]:
        d = {t: float(getattr(self, t).detach()) for t in TERMS}
        d["total"] = float(self.total.detach())
        return d


def total_loss(parts: dict[str, torch.Tensor | float], weights: dict[str, float] | None = None) -> LossBreakdown:
    """Sum of the five terms; absent terms count as zero, weights default to 1."""
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise LossError(f"unknown loss terms {sorted(unknown)}")
    vals = {t: torch.as_tensor(parts.get(t, 0.0), dtype=torch.get_default_dtype()) for t in TERMS}
    return LossBreakdown(**vals, weights=weights)
