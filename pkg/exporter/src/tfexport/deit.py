"""Reference DeiT implementation in PyTorch.

State-dict keys follow the mainstream checkpoint layout
(``patch_embed.proj.weight``, ``blocks.{i}.norm1.weight``,
``blocks.{i}.attn.qkv.weight``, ``ls1.gamma``, ...), so checkpoints saved
from this module exercise the same NameMap paths as published ones, and its
forward provides the source-framework logits the engine is verified against.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .wire import ModelConfig


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float = 1.0):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), init))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gamma


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()  # exact erf form
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int, layerscale: bool,
                 eps: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = Attention(dim, heads)
        self.ls1 = LayerScale(dim) if layerscale else nn.Identity()
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.mlp = Mlp(dim, hidden)
        self.ls2 = LayerScale(dim) if layerscale else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.ls1(self.attn(self.norm1(x)))
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x


class DeiT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.patch_embed = nn.Module()
        self.patch_embed.proj = nn.Conv2d(config.in_channels, d,
                                          kernel_size=config.patch,
                                          stride=config.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.tokens, d))
        self.blocks = nn.ModuleList([
            Block(d, config.heads, config.hidden_dim, config.use_layerscale,
                  config.eps_ln)
            for _ in range(config.depth)
        ])
        self.norm = nn.LayerNorm(d, eps=config.eps_ln)
        self.head = nn.Linear(d, config.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        x = self.patch_embed.proj(x)                      # [B, D, g, g]
        x = x.flatten(2).transpose(1, 2)                  # [B, g*g, D]
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return self.head(x[:, 0])


def random_deit(config: ModelConfig, seed: int) -> DeiT:
    """Randomly initialized model, reproducible from the seed."""
    torch.manual_seed(seed)
    model = DeiT(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim >= 2:
                fan_in = math.prod(p.shape[1:])
                p.normal_(0.0, 1.0 / math.sqrt(fan_in))
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            elif name in ("cls_token", "pos_embed"):
                p.normal_(0.0, 0.02)
            elif "gamma" in name:
                p.fill_(1.0)
            else:
                p.zero_()
        model.cls_token.normal_(0.0, 0.02)
        model.pos_embed.normal_(0.0, 0.02)
    return model.eval()


def preprocess(chw01: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Normalize [C, H, W] data in [0, 1] exactly like the engine does."""
    mean = torch.tensor(config.norm_mean).view(-1, 1, 1)
    std = torch.tensor(config.norm_std).view(-1, 1, 1)
    return (chw01 - mean) / std
