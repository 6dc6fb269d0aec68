"""A small vision transformer that can take prompts in the middle of the stack."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import LayerNorm, Linear, NumericsError, linear, softmax


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    mlp_ratio: float = 2.0
    # None -> round(0.75 * num_layers)
    prompt_layer: int | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 2:
            raise ValueError("need at least two transformer layers")
        if self.prompt_layer is None:
            self.prompt_layer = min(max(round(0.75 * self.num_layers), 1), self.num_layers - 1)
        if not 1 <= self.prompt_layer < self.num_layers:
            raise ValueError(
                f"prompt_layer must lie in [1, {self.num_layers - 1}], got {self.prompt_layer}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TokenSequence:
    """Tokens laid out as ``[cls | prompts | patches]``.

    ``tokens`` is (len, d) or batched (B, len, d).
    """

    tokens: torch.Tensor
    num_prompts: int = 0

    def __post_init__(self):
        if self.tokens.shape[-2] < 1 + self.num_prompts:
            raise ValueError("token sequence shorter than its layout")

    def __len__(self) -> int:
        return self.tokens.shape[-2]

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[..., 0, :]

    @property
    def prompts(self) -> torch.Tensor:
        return self.tokens[..., 1 : 1 + self.num_prompts, :]

    @property
    def patches(self) -> torch.Tensor:
        return self.tokens[..., 1 + self.num_prompts :, :]


def insert_prompts(seq: TokenSequence, prompts: torch.Tensor) -> TokenSequence:
    """Place ``prompts`` (N_P, d) or (B, N_P, d) right after the class token."""
    x = seq.tokens
    if prompts.shape[-1] != x.shape[-1]:
        raise NumericsError(
            f"prompt width {prompts.shape[-1]} does not match token width {x.shape[-1]}"
        )
    if prompts.shape[-2] == 0:
        return seq
    if x.dim() == 3 and prompts.dim() == 2:
        prompts = prompts.unsqueeze(0).expand(x.shape[0], -1, -1)
    head = x[..., : 1 + seq.num_prompts, :]
    tail = x[..., 1 + seq.num_prompts :, :]
    tokens = torch.cat([head, prompts, tail], dim=-2)
    return TokenSequence(tokens, seq.num_prompts + prompts.shape[-2])


def remove_prompts(seq: TokenSequence) -> TokenSequence:
    return TokenSequence(torch.cat([seq.tokens[..., :1, :], seq.patches], dim=-2), 0)


class Block(nn.Module):
    """Pre-norm transformer layer: multi-head self-attention then MLP, both residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, std=0.02)
        self.proj = Linear(dim, dim, std=0.02)
        self.norm2 = LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, std=0.02)
        self.fc2 = Linear(hidden, dim, std=0.02)
        self.last_attn: torch.Tensor | None = None
        self.record_attn = False

    def attention(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        *lead, n, d = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=-3)
        # (..., heads, n, head_dim)
        q, k, v = (t.transpose(-3, -2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        attn = softmax(scores, dim=-1)
        out = (attn @ v).transpose(-3, -2).reshape(*lead, n, d)
        return self.proj(out), attn

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, attn = self.attention(self.norm1(x))
        if self.record_attn:
            self.last_attn = attn.detach()
        x = x + a
        h = self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x + h


def self_attention_layer(seq: TokenSequence, block: Block) -> TokenSequence:
    if seq.tokens.shape[-1] != block.norm1.weight.shape[0]:
        raise NumericsError("token width does not match layer width")
    return TokenSequence(block(seq.tokens), seq.num_prompts)


class VisionTransformer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        patch_dim = cfg.channels * cfg.patch_size**2
        self.patch_proj = Linear(patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(1 + cfg.num_patches, d))
        nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_layers)
        )
        # applied to the class token at readout only
        self.norm = LayerNorm(d)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def freeze(self, flag: bool = True) -> None:
        for p in self.parameters():
            p.requires_grad_(not flag)

    def patch_embed(self, images: torch.Tensor) -> TokenSequence:
        """(B, C, H, W) or (C, H, W) images -> ``[cls; patches]`` with positions added."""
        cfg = self.cfg
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        if images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise NumericsError(
                f"expected images of shape (C={cfg.channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(images.shape[1:])}"
            )
        b, p = images.shape[0], cfg.patch_size
        g = cfg.image_size // p
        patches = (
            images.reshape(b, cfg.channels, g, p, g, p)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(b, g * g, cfg.channels * p * p)
        )
        e = self.patch_proj(patches)
        cls = self.cls_token.expand(b, 1, -1)
        x = torch.cat([cls, e], dim=1) + self.pos_embed
        return TokenSequence(x[0] if single else x, 0)

    def forward_to_layer(self, images: torch.Tensor, layer: int | None = None) -> tuple[TokenSequence, torch.Tensor]:
        """Prompt-free pass through layers 1..layer; returns the sequence and its class row."""
        layer = self.cfg.prompt_layer if layer is None else layer
        seq = self.patch_embed(images)
        for block in self.blocks[:layer]:
            seq = self_attention_layer(seq, block)
        return seq, seq.cls

    def forward_from_layer(self, seq: TokenSequence, layer: int | None = None) -> torch.Tensor:
        """Run layers layer+1..N_L (prompts take part in attention) and read the
        normalised class token."""
        layer = self.cfg.prompt_layer if layer is None else layer
        for block in self.blocks[layer:]:
            seq = self_attention_layer(seq, block)
        return self.norm(seq.cls)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        seq = self.patch_embed(images)
        for block in self.blocks:
            seq = self_attention_layer(seq, block)
        return self.norm(seq.cls)
