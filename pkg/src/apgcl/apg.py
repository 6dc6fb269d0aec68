"""Adaptive prompt generation by cross-attention over an extendable candidate list."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import Linear, NumericsError, softmax


class CandidateList(nn.Module):
    """Prompt candidates, ``group_size`` rows per class, appended task by task."""

    def __init__(self, dim: int, group_size: int = 1, init_std: float = 0.02):
        super().__init__()
        if group_size < 1:
            raise ValueError("group_size must be >= 1")
        self.dim = dim
        self.group_size = group_size
        self.init_std = init_std
        self.candidates = nn.Parameter(torch.zeros(0, dim))
        self.groups: dict[int, tuple[int, int]] = {}
        self.task_sizes: list[int] = []

    def __len__(self) -> int:
        return self.candidates.shape[0]

    @property
    def class_ids(self) -> list[int]:
        return list(self.groups)

    def extend(self, new_class_ids, seed: int) -> "CandidateList":
        new_class_ids = [int(c) for c in new_class_ids]
        if len(set(new_class_ids)) != len(new_class_ids):
            raise ValueError(f"duplicate class ids in {new_class_ids}")
        clash = set(new_class_ids) & set(self.groups)
        if clash:
            raise ValueError(f"classes already have candidates: {sorted(clash)}")
        gen = torch.Generator().manual_seed(int(seed))
        n_new = self.group_size * len(new_class_ids)
        old = self.candidates.detach()
        fresh = torch.randn(n_new, self.dim, generator=gen, dtype=torch.float64) * self.init_std
        data = torch.cat([old, fresh.to(old.dtype)], dim=0)
        start = len(self)
        for c in new_class_ids:
            self.groups[c] = (start, start + self.group_size)
            start += self.group_size
        self.task_sizes.append(n_new)
        requires_grad = self.candidates.requires_grad
        self.candidates = nn.Parameter(data, requires_grad=requires_grad)
        return self

    def group_rows(self, class_id: int) -> range:
        if class_id not in self.groups:
            raise KeyError(f"class {class_id} has no prompt candidates")
        return range(*self.groups[class_id])

    def group_mask(self, labels: torch.Tensor) -> torch.Tensor:
        """Boolean (B, N_total) mask selecting each label's candidate rows."""
        mask = torch.zeros(len(labels), len(self), dtype=torch.bool)
        for i, y in enumerate(labels.tolist()):
            rows = self.group_rows(int(y))
            mask[i, rows.start : rows.stop] = True
        return mask

    def get_extra_state(self):
        return {"groups": dict(self.groups), "task_sizes": list(self.task_sizes)}

    def set_extra_state(self, state):
        self.groups = {int(k): tuple(v) for k, v in state["groups"].items()}
        self.task_sizes = list(state["task_sizes"])

    def _load_from_state_dict(self, state_dict, prefix, *args, **kwargs):
        key = prefix + "candidates"
        if key in state_dict and state_dict[key].shape != self.candidates.shape:
            self.candidates = nn.Parameter(torch.zeros_like(state_dict[key]))
        super()._load_from_state_dict(state_dict, prefix, *args, **kwargs)


def extend_candidates(cands: CandidateList, new_class_ids, seed: int) -> CandidateList:
    return cands.extend(new_class_ids, seed)


def attention_scores(z: torch.Tensor, candidates: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor) -> torch.Tensor:
    """Cross-attention probabilities of query ``z`` over the candidate rows.

    z: (d_c,) or (B, d_c); candidates: (N, d_c); w_q, w_k: (N_P, n_h, d_c, d_k).
    Returns (n_h, N_P, N) or (B, n_h, N_P, N), normalised over the last axis.
    """
    if candidates.shape[0] == 0:
        raise NumericsError("APG undefined before first task: candidate list is empty")
    single = z.dim() == 1
    zb = z.unsqueeze(0) if single else z
    d_k = w_q.shape[-1]
    q = torch.einsum("bc,jhck->bhjk", zb, w_q)
    k = torch.einsum("nc,jhck->hjnk", candidates, w_k)
    logits = torch.einsum("bhjk,hjnk->bhjn", q, k) / math.sqrt(d_k)
    a = softmax(logits, dim=-1)
    return a[0] if single else a


def mmha(
    z: torch.Tensor,
    candidates: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    return_scores: bool = False,
):
    """Multi-output multi-head attention: one query, ``N_P`` output tokens.

    Head ``h`` of output ``j`` attends with its own projections; heads are
    concatenated per output and the stacked outputs pass through ``w_o``.
    """
    a = attention_scores(z, candidates, w_q, w_k)
    single = a.dim() == 3
    ab = a.unsqueeze(0) if single else a
    v = torch.einsum("nc,jhck->hjnk", candidates, w_v)
    r = torch.einsum("bhjn,hjnk->bjhk", ab, v)
    r = r.reshape(r.shape[0], r.shape[1], -1)
    out = r @ w_o
    out = out[0] if single else out
    return (out, a) if return_scores else out


@dataclass
class APGConfig:
    dim: int = 64
    num_heads: int = 4
    num_prompts: int = 1
    group_size: int = 1
    # hidden width of the in/out projection MLPs; None -> 2 * dim
    proj_hidden: int | None = None
    init_std: float = 0.02


class ProjectionMLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.fc1 = Linear(d_in, hidden)
        self.fc2 = Linear(hidden, d_out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class APG(nn.Module):
    """Maps an intermediate class feature ``v_l`` to ``N_P`` prompts."""

    def __init__(self, cfg: APGConfig):
        super().__init__()
        if cfg.dim % cfg.num_heads:
            raise ValueError(f"dim {cfg.dim} not divisible by num_heads {cfg.num_heads}")
        self.cfg = cfg
        d, n_h, n_p = cfg.dim, cfg.num_heads, cfg.num_prompts
        d_k = d // n_h
        hidden = cfg.proj_hidden or 2 * d
        self.m_in = ProjectionMLP(d, hidden, d)
        self.m_out = ProjectionMLP(d, hidden, d)
        self.candidates = CandidateList(d, cfg.group_size, cfg.init_std)
        std = 1.0 / math.sqrt(d)
        self.w_q = nn.Parameter(torch.randn(n_p, n_h, d, d_k) * std)
        self.w_k = nn.Parameter(torch.randn(n_p, n_h, d, d_k) * std)
        self.w_v = nn.Parameter(torch.randn(n_p, n_h, d, d_k) * std)
        self.w_o = nn.Parameter(torch.randn(d, d) * std)

    @property
    def num_prompts(self) -> int:
        return self.cfg.num_prompts

    def project(self, v_l: torch.Tensor) -> torch.Tensor:
        return self.m_in(v_l)

    def attention_scores(self, z: torch.Tensor) -> torch.Tensor:
        return attention_scores(z, self.candidates.candidates, self.w_q, self.w_k)

    def mmha(self, z: torch.Tensor, return_scores: bool = False):
        return mmha(z, self.candidates.candidates, self.w_q, self.w_k, self.w_v, self.w_o, return_scores)

    def generate(self, v_l: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return prompts (…, N_P, d) and the attention record (…, n_h, N_P, N)."""
        if v_l.shape[-1] != self.cfg.dim:
            raise NumericsError(f"v_l width {v_l.shape[-1]} != APG dim {self.cfg.dim}")
        z = self.project(v_l)
        p_tilde, scores = self.mmha(z, return_scores=True)
        return self.m_out(p_tilde), scores

    def forward(self, v_l: torch.Tensor) -> torch.Tensor:
        return self.generate(v_l)[0]
