"""Small torch building blocks shared by the transformer and the denoiser."""

from __future__ import annotations

import math
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal(x: torch.Tensor, n_freqs: int, include_input: bool = True) -> torch.Tensor:
    """Fixed Fourier features ``[x, sin(2^k pi x), cos(2^k pi x)]`` over the last axis."""
    freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype, device=x.device)) * math.pi
    xf = x[..., None] * freqs
    parts = [torch.sin(xf).flatten(-2), torch.cos(xf).flatten(-2)]
    if include_input:
        parts.insert(0, x)
    return torch.cat(parts, dim=-1)


def sinusoidal_dim(in_dim: int, n_freqs: int, include_input: bool = True) -> int:
    return in_dim * (2 * n_freqs + int(include_input))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    """Multi-head attention with separate query and key/value inputs."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, q_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(q_dim or dim, dim)
        self.k = nn.Linear(kv_dim or dim, dim)
        self.v = nn.Linear(kv_dim or dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        B, Nq, _ = x.shape
        Nk = context.shape[1]
        h = self.heads
        q = self.q(x).view(B, Nq, h, -1).transpose(1, 2)
        k = self.k(context).view(B, Nk, h, -1).transpose(1, 2)
        v = self.v(context).view(B, Nk, h, -1).transpose(1, 2)
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax((q @ k.transpose(-1, -2)) * scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, -1)
        return self.out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))

    def zero_residual_(self):
        for lin in (self.attn.out, self.mlp.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


class CrossAttentionBlock(nn.Module):
    """Queries attend to a context set; no interaction between queries."""

    def __init__(self, dim, heads, mlp_ratio=4, kv_dim=None):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim or dim)
        self.attn = Attention(dim, heads, kv_dim=kv_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x, context):
        x = x + self.attn(self.norm_q(x), self.norm_kv(context))
        return x + self.mlp(self.norm2(x))


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def resolve_device(device: str = "auto") -> torch.device:
    if device == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(device)


def deterministic_mode() -> bool:
    return os.environ.get("NVS_DETERMINISTIC", "0") == "1"


def configure_determinism(seed: int | None = None) -> None:
    """Honour ``NVS_DETERMINISTIC=1`` and seed the global generators."""
    if deterministic_mode():
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    if seed is not None:
        torch.manual_seed(seed)
        np.random.seed(seed % 2**32)


def count_parameters(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())
