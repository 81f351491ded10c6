"""Flow-matching action expert conditioned on backbone key/value tokens.

Each expert block self-attends over the action-chunk tokens and
cross-attends with its own queries against the matching backbone layer's
K/V (layerwise conditioning; a config flag falls back to attending the
final-layer hidden states instead). Timesteps modulate the block norms the
same way as in the depth generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import HiddenStates, init_module_parameters
from .depth_head import modulate, timestep_embedding
from .flow import euler_integrate, flow_mse
from .params import ParamGroup
from .rng import RngStream

ACTION_DIM = 3  # dx, dy, gripper
ENV_STEP_SCALE = 0.1  # env clamp bound used to normalize dx, dy to [-1, 1]


@dataclass(frozen=True)
class ActionExpertConfig:
    horizon: int = 8
    act_dim: int = ACTION_DIM
    dim: int = 128
    heads: int = 4
    layers: int = 4          # must equal backbone depth for layerwise conditioning
    mlp_ratio: int = 4
    layerwise: bool = True


@dataclass
class ActionCondition:
    kv: list[tuple[torch.Tensor, torch.Tensor]]  # per layer (B, heads, T, head_dim)
    attend_mask: torch.Tensor                    # (B, T) bool, False at PAD
    h_final: torch.Tensor                        # (B, T, D) final-layer states


def extract_kv(hidden: HiddenStates) -> ActionCondition:
    """Conditioning view over a backbone forward; do not mutate the source."""
    return ActionCondition(kv=hidden.kv_cache, attend_mask=hidden.attend_mask,
                           h_final=torch.cat([hidden.h_o, hidden.h_l], dim=1))


def normalize_actions(actions: torch.Tensor) -> torch.Tensor:
    """(H, 3) env actions -> [-1,1] chunk: dx,dy scaled by the step bound."""
    out = actions.clone()
    out[..., 0] = out[..., 0] / ENV_STEP_SCALE
    out[..., 1] = out[..., 1] / ENV_STEP_SCALE
    return out.clamp(-1.0, 1.0)


def denormalize_actions(chunk: torch.Tensor) -> torch.Tensor:
    out = chunk.clone()
    out[..., 0] = out[..., 0] * ENV_STEP_SCALE
    out[..., 1] = out[..., 1] * ENV_STEP_SCALE
    return out


class ExpertBlock(nn.Module):
    def __init__(self, cfg: ActionExpertConfig):
        super().__init__()
        self.heads = cfg.heads
        d = cfg.dim
        self.ln1 = nn.LayerNorm(d, elementwise_affine=False)
        self.qkv = nn.Linear(d, d * 3)
        self.attn_out = nn.Linear(d, d)
        self.ln_x = nn.LayerNorm(d, elementwise_affine=False)
        self.q_cross = nn.Linear(d, d)
        self.cross_out = nn.Linear(d, d)
        self.kv_final = nn.Linear(d, d * 2)  # only used in final-layer fallback mode
        self.ln2 = nn.LayerNorm(d, elementwise_affine=False)
        self.fc1 = nn.Linear(d, d * cfg.mlp_ratio)
        self.fc2 = nn.Linear(d * cfg.mlp_ratio, d)
        self.ada = nn.Linear(d, d * 4)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        return x.view(B, T, self.heads, D // self.heads).transpose(1, 2)

    def forward(self, x, t_emb, k_cond, v_cond, attend_mask):
        shift1, scale1, shift2, scale2 = self.ada(F.silu(t_emb)).chunk(4, dim=-1)
        h = modulate(self.ln1(x), shift1, scale1)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        out = F.scaled_dot_product_attention(self._heads(q), self._heads(k), self._heads(v))
        x = x + self.attn_out(out.transpose(1, 2).reshape(x.shape))
        qc = self._heads(self.q_cross(self.ln_x(x)))
        bias = torch.zeros(attend_mask.shape, dtype=x.dtype)
        bias.masked_fill_(~attend_mask, float("-inf"))
        out = F.scaled_dot_product_attention(qc, k_cond, v_cond, attn_mask=bias[:, None, None, :])
        x = x + self.cross_out(out.transpose(1, 2).reshape(x.shape))
        h = modulate(self.ln2(x), shift2, scale2)
        return x + self.fc2(F.gelu(self.fc1(h)))


class ActionExpert(nn.Module):
    def __init__(self, cfg: ActionExpertConfig):
        super().__init__()
        self.cfg = cfg
        self.act_in = nn.Linear(cfg.act_dim, cfg.dim)
        self.pos = nn.Parameter(torch.zeros(cfg.horizon, cfg.dim))
        self.t_mlp = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.SiLU(), nn.Linear(cfg.dim, cfg.dim))
        self.blocks = nn.ModuleList(ExpertBlock(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.dim, elementwise_affine=False)
        self.ada_f = nn.Linear(cfg.dim, cfg.dim * 2)
        self.act_out = nn.Linear(cfg.dim, cfg.act_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.act_in.weight.dtype

    def init_parameters(self, stream: RngStream, zero_out: bool = False) -> None:
        init_module_parameters(self, stream)
        with torch.no_grad():
            if zero_out:
                self.act_out.weight.zero_()
                self.act_out.bias.zero_()
            else:
                self.act_out.weight.mul_(0.1)
                self.act_out.bias.zero_()

    def forward(self, a_t: torch.Tensor, t, cond: ActionCondition) -> torch.Tensor:
        """Velocity over a noisy chunk. a_t: (B, H, 3); t scalar or (B,)."""
        cfg = self.cfg
        if a_t.ndim == 2:
            a_t = a_t.unsqueeze(0)
        B = a_t.shape[0]
        if a_t.shape[1] != cfg.horizon:
            raise ValueError(f"chunk horizon {a_t.shape[1]} != {cfg.horizon}")
        if not torch.is_tensor(t):
            t = torch.full((B,), float(t), dtype=self.dtype)
        t = t.to(self.dtype)
        if t.ndim == 0:
            t = t.expand(B)
        x = self.act_in(a_t.to(self.dtype)) + self.pos
        t_emb = self.t_mlp(timestep_embedding(t, cfg.dim))
        for i, block in enumerate(self.blocks):
            if cfg.layerwise:
                layer = min(i, len(cond.kv) - 1)
                k_cond, v_cond = cond.kv[layer]
            else:
                k, v = block.kv_final(cond.h_final.to(self.dtype)).chunk(2, dim=-1)
                k_cond, v_cond = block._heads(k), block._heads(v)
            x = block(x, t_emb, k_cond.to(self.dtype), v_cond.to(self.dtype), cond.attend_mask)
        shift, scale = self.ada_f(F.silu(t_emb)).chunk(2, dim=-1)
        return self.act_out(modulate(self.ln_f(x), shift, scale))

    def param_group(self) -> ParamGroup:
        g = ParamGroup("action_expert")
        for name, p in self.named_parameters():
            g.add(name, p)
        return g


def action_flow_loss(predicted_velocity: torch.Tensor, chunk: torch.Tensor,
                     noise: torch.Tensor, t) -> torch.Tensor:
    """MSE against the straight-path velocity chunk - noise evaluated at a_t."""
    t_val = torch.as_tensor(t)
    if torch.any(t_val < 0) or torch.any(t_val > 1):
        raise ValueError(f"t must lie in [0,1], got {t}")
    if noise.shape != chunk.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != chunk shape {tuple(chunk.shape)}")
    return flow_mse(predicted_velocity, chunk - noise)


def predict_chunk(expert: ActionExpert, cond: ActionCondition, steps: int,
                  rng: RngStream, velocity_fn=None) -> torch.Tensor:
    """Euler-integrate a normalized action chunk from noise; clipped to [-1,1]."""
    B = cond.attend_mask.shape[0]
    x0 = rng.torch_normal((B, expert.cfg.horizon, expert.cfg.act_dim), dtype=expert.dtype)
    if velocity_fn is None:
        def velocity_fn(x, t):
            with torch.no_grad():
                return expert.forward(x, t, cond)
    x1 = euler_integrate(velocity_fn, x0, steps)
    return x1.clamp(-1.0, 1.0)
