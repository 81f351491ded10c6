"""Connector and diffusion-transformer depth generator.

The connector is a two-layer MLP projecting backbone visual states into the
conditioning space. The generator is a small DiT over depth patches: the
timestep enters through sinusoidal embeddings that modulate per-block
LayerNorm scale/shift, the condition enters through cross-attention in
every block. The final projection is zero-initialized so an untrained head
is the zero velocity field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import init_module_parameters
from .flow import denormalize_from_unit, euler_integrate, normalize_to_unit
from .params import ParamGroup
from .rng import RngStream


@dataclass(frozen=True)
class DepthHeadConfig:
    size: int = 32          # generated map is size x size
    patch: int = 4
    dim: int = 128
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    cond_dim: int = 128
    channels: int = 1       # 3 for the RGB-regeneration ablation

    @property
    def n_tokens(self) -> int:
        return (self.size // self.patch) ** 2


@dataclass
class DepthTarget:
    depth_norm: torch.Tensor  # (..., H, W) in [-1, 1]
    d_min: float
    d_max: float

    def metric(self) -> torch.Tensor:
        return denormalize_from_unit(self.depth_norm, self.d_min, self.d_max)


def normalize_depth(depth: torch.Tensor) -> DepthTarget:
    """Per-sample min-max normalization of a metric depth map to [-1, 1]."""
    d_min = float(depth.min())
    d_max = float(depth.max())
    if not d_min < d_max:
        raise ValueError(f"degenerate depth map: min {d_min} == max {d_max}")
    return DepthTarget(depth_norm=normalize_to_unit(depth, d_min, d_max), d_min=d_min, d_max=d_max)


class Connector(nn.Module):
    """Two affine layers with one nonlinearity between."""

    def __init__(self, in_dim: int, cond_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or cond_dim * 4
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, cond_dim)

    def forward(self, h_o: torch.Tensor, identity_nonlinearity: bool = False) -> torch.Tensor:
        x = self.fc1(h_o)
        if not identity_nonlinearity:
            x = F.gelu(x)
        return self.fc2(x)

    def init_parameters(self, stream: RngStream) -> None:
        init_module_parameters(self, stream)

    def param_group(self) -> ParamGroup:
        g = ParamGroup("connector")
        for name, p in self.named_parameters():
            g.add(name, p)
        return g


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of t in [0,1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * 1000.0 * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, cond_dim: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.attn_out = nn.Linear(dim, dim)
        self.ln_x = nn.LayerNorm(dim, elementwise_affine=False)
        self.q_cross = nn.Linear(dim, dim)
        self.kv_cross = nn.Linear(cond_dim, dim * 2)
        self.cross_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)
        self.ada = nn.Linear(dim, dim * 4)  # shift1, scale1, shift2, scale2
        self.cond_add = nn.Linear(cond_dim, dim)  # aligned per-token injection

    def _attend(self, q, k, v):
        B, Tq, D = q.shape
        hd = D // self.heads
        q = q.view(B, Tq, self.heads, hd).transpose(1, 2)
        k = k.view(B, -1, self.heads, hd).transpose(1, 2)
        v = v.view(B, -1, self.heads, hd).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return out.transpose(1, 2).reshape(B, Tq, D)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor, cond: torch.Tensor,
                aligned: bool = False) -> torch.Tensor:
        if aligned:
            x = x + self.cond_add(cond)
        shift1, scale1, shift2, scale2 = self.ada(F.silu(t_emb)).chunk(4, dim=-1)
        h = modulate(self.ln1(x), shift1, scale1)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        x = x + self.attn_out(self._attend(q, k, v))
        kc, vc = self.kv_cross(cond).chunk(2, dim=-1)
        x = x + self.cross_out(self._attend(self.q_cross(self.ln_x(x)), kc, vc))
        h = modulate(self.ln2(x), shift2, scale2)
        x = x + self.fc2(F.gelu(self.fc1(h)))
        return x


class DepthDiT(nn.Module):
    def __init__(self, cfg: DepthHeadConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = cfg.patch * cfg.patch * cfg.channels
        self.patch_in = nn.Linear(in_dim, cfg.dim)
        self.pos = nn.Parameter(torch.zeros(cfg.n_tokens, cfg.dim))
        self.t_mlp = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.SiLU(), nn.Linear(cfg.dim, cfg.dim))
        self.cond_pool = nn.Linear(cfg.cond_dim, cfg.dim)  # pooled condition joins the modulation signal
        self.cond_in = nn.Linear(cfg.cond_dim, cfg.dim)    # per-token additive path when grids align
        self.blocks = nn.ModuleList(
            DiTBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.cond_dim) for _ in range(cfg.blocks))
        self.ln_f = nn.LayerNorm(cfg.dim, elementwise_affine=False)
        self.ada_f = nn.Linear(cfg.dim, cfg.dim * 2)
        self.patch_out = nn.Linear(cfg.dim, in_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_in.weight.dtype

    def init_parameters(self, stream: RngStream, zero_out: bool = False) -> None:
        """zero_out makes the head the exact zero velocity field (oracle tests);
        the training default keeps a small live output layer so gradients reach
        the connector while the generator is frozen (stage 1)."""
        init_module_parameters(self, stream)
        with torch.no_grad():
            if zero_out:
                self.patch_out.weight.zero_()
                self.patch_out.bias.zero_()
            else:
                self.patch_out.weight.mul_(0.1)
                self.patch_out.bias.zero_()

    def forward(self, x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        """Predict the velocity field.

        x_t: (B, S, S) or (B, S, S, C); t: scalar or (B,); cond: (B, N, cond_dim).
        Output has the shape of x_t.
        """
        cfg = self.cfg
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t = x_t.unsqueeze(-1)
        B = x_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((B,), float(t), dtype=self.dtype)
        t = t.to(self.dtype)
        if t.ndim == 0:
            t = t.expand(B)
        x = x_t.to(self.dtype).reshape(B, cfg.size // cfg.patch, cfg.patch, cfg.size // cfg.patch,
                                       cfg.patch, cfg.channels)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, cfg.n_tokens, -1)
        x = self.patch_in(x) + self.pos
        cond = cond.to(self.dtype)
        if cond.shape[1] == cfg.n_tokens:
            x = x + self.cond_in(cond)
        t_emb = self.t_mlp(timestep_embedding(t, cfg.dim)) + self.cond_pool(cond.mean(dim=1))
        aligned = cond.shape[1] == cfg.n_tokens
        for block in self.blocks:
            x = block(x, t_emb, cond, aligned=aligned)
        shift, scale = self.ada_f(F.silu(t_emb)).chunk(2, dim=-1)
        x = self.patch_out(modulate(self.ln_f(x), shift, scale))
        g = cfg.size // cfg.patch
        x = x.reshape(B, g, g, cfg.patch, cfg.patch, cfg.channels)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, cfg.size, cfg.size, cfg.channels)
        return x.squeeze(-1) if squeeze else x

    def param_group(self) -> ParamGroup:
        g = ParamGroup("depth_head")
        for name, p in self.named_parameters():
            g.add(name, p)
        return g


def sample_depth(dit: DepthDiT, cond: torch.Tensor, steps: int, rng: RngStream,
                 velocity_fn=None) -> torch.Tensor:
    """Euler-integrate from noise at t=0 to a generated map at t=1, clamped.

    `velocity_fn(x, t)` overrides the network (used by the straight-path
    oracle tests). Returns (B, S, S[, C]) in [-1, 1].
    """
    cfg = dit.cfg
    B = cond.shape[0]
    shape = (B, cfg.size, cfg.size) if cfg.channels == 1 else (B, cfg.size, cfg.size, cfg.channels)
    x0 = rng.torch_normal(shape, dtype=dit.dtype)
    if velocity_fn is None:
        def velocity_fn(x, t):
            with torch.no_grad():
                return dit.forward(x, t, cond)
    x1 = euler_integrate(velocity_fn, x0, steps)
    return x1.clamp(-1.0, 1.0)
