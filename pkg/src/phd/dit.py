"""Transformer backbone for the point-cloud flow prior.

A stack of adaLN-Zero blocks over body point tokens plus 2D keypoint
condition tokens. The time embedding and the shape embedding modulate every
block; gates and the output projection start at zero, so an untrained
network predicts exactly zero flow and the Euler sampler is the identity.
Keypoint tokens ride along through attention and are dropped at the output.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_embedding(s: torch.Tensor, dim: int, max_period: float = 128.0) -> torch.Tensor:
    """Sinusoidal features of the noise level s in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=s.dtype, device=s.device) / half
    )
    args = s[:, None] * freqs[None] * max_period
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale[:, None]) + shift[:, None]


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("width must be divisible by the head count")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), sh1, sc1))
        x = x + g2[:, None] * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class PointDiT(nn.Module):
    """Flow network over body points conditioned on keypoints and shape.

    Token layout: num_points body tokens followed by num_cond keypoint
    tokens. Condition dropout is expressed through the keep masks; a zeroed
    keypoint block or beta reproduces the unconditional branch exactly.
    """

    def __init__(
        self,
        num_points: int,
        point_dim: int,
        num_cond: int,
        cond_dim: int,
        beta_dim: int,
        width: int,
        depth: int,
        heads: int,
        mlp_ratio: float = 2.0,
        cond_rows: list[int] | None = None,
    ):
        super().__init__()
        self.num_points = num_points
        self.point_dim = point_dim
        self.num_cond = num_cond

        self.point_in = nn.Linear(point_dim, width)
        self.point_pos = nn.Parameter(torch.zeros(num_points, width))
        self.cond_in = nn.Linear(cond_dim, width)
        self.cond_pos = nn.Parameter(torch.zeros(num_cond, width))
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.beta_mlp = nn.Sequential(nn.Linear(beta_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.blocks = nn.ModuleList([DiTBlock(width, heads, mlp_ratio) for _ in range(depth)])
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.head = nn.Linear(width, point_dim)
        self.width = width

        nn.init.normal_(self.point_pos, std=0.02)
        nn.init.normal_(self.cond_pos, std=0.02)
        if cond_rows is not None:
            # start each condition token on the positional code of the point
            # it describes, so attention begins with the correspondence solved
            if len(cond_rows) != num_cond:
                raise ValueError("cond_rows must give one point row per condition token")
            with torch.no_grad():
                self.cond_pos.copy_(self.point_pos[list(cond_rows)])
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self,
        x_s: torch.Tensor,          # (B, num_points, point_dim)
        s: torch.Tensor,            # (B,)
        kp_feats: torch.Tensor,     # (B, num_cond, cond_dim)
        beta: torch.Tensor,         # (B, beta_dim)
        kp_keep: torch.Tensor | None = None,   # (B,) 0/1
        beta_keep: torch.Tensor | None = None,  # (B,) 0/1
    ) -> torch.Tensor:
        B = x_s.shape[0]
        if x_s.shape[1:] != (self.num_points, self.point_dim):
            raise ValueError(f"expected points of shape (B, {self.num_points}, {self.point_dim})")
        ones = torch.ones(B, dtype=x_s.dtype, device=x_s.device)
        kp_keep = ones if kp_keep is None else kp_keep.to(x_s.dtype)
        beta_keep = ones if beta_keep is None else beta_keep.to(x_s.dtype)

        tokens = self.point_in(x_s) + self.point_pos[None]
        cond_tok = (self.cond_in(kp_feats) + self.cond_pos[None]) * kp_keep[:, None, None]
        x = torch.cat([tokens, cond_tok], dim=1)

        c = self.time_mlp(timestep_embedding(s, self.width))
        c = c + self.beta_mlp(beta * beta_keep[:, None])
        for blk in self.blocks:
            x = blk(x, c)
        sh, sc = self.final_ada(c).chunk(2, dim=-1)
        x = self.head(modulate(self.final_norm(x), sh, sc))
        return x[:, : self.num_points]
