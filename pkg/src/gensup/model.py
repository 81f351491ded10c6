"""The assembled model: backbone + connector + depth generator (+ expert)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .action_expert import ActionCondition, ActionExpert, ActionExpertConfig, action_flow_loss
from .backbone import Backbone, BackboneConfig, ce_loss
from .depth_head import Connector, DepthDiT, DepthHeadConfig
from .flow import flow_interpolate, flow_mse
from .params import ModelState
from .rng import RngStream

PAD_ID = 0  # Vocabulary pins <pad> to line 0


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    depth: DepthHeadConfig
    expert: ActionExpertConfig | None = None


def desk_model_config(vocab_size: int, channels: int = 1, with_expert: bool = False,
                      dim: int = 128, layers: int = 4, heads: int = 4,
                      horizon: int = 8, layerwise: bool = True) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(image_size=64, patch=8, dim=dim, layers=layers,
                                heads=heads, vocab_size=vocab_size),
        depth=DepthHeadConfig(size=32, patch=4, dim=dim, blocks=layers + 2, heads=heads * 2,
                              cond_dim=dim, channels=channels, mlp_ratio=6),
        expert=ActionExpertConfig(horizon=horizon, dim=dim, heads=heads, layers=layers,
                                  layerwise=layerwise) if with_expert else None,
    )


def toy_model_config(vocab_size: int, with_expert: bool = True) -> ModelConfig:
    """2-layer configuration small enough for exhaustive finite differences."""
    return ModelConfig(
        backbone=BackboneConfig(image_size=16, patch=8, dim=16, layers=2, heads=2,
                                max_text=24, vocab_size=vocab_size),
        depth=DepthHeadConfig(size=8, patch=4, dim=16, blocks=2, heads=2, cond_dim=16),
        expert=ActionExpertConfig(horizon=4, dim=16, heads=2, layers=2) if with_expert else None,
    )


def config_to_meta(cfg: ModelConfig) -> dict[str, str]:
    b, d = cfg.backbone, cfg.depth
    meta = {
        "model.image_size": b.image_size, "model.patch": b.patch, "model.dim": b.dim,
        "model.layers": b.layers, "model.heads": b.heads, "model.mlp_ratio": b.mlp_ratio,
        "model.max_text": b.max_text, "model.vocab_size": b.vocab_size,
        "model.depth_size": d.size, "model.depth_patch": d.patch, "model.depth_blocks": d.blocks,
        "model.depth_heads": d.heads, "model.depth_mlp_ratio": d.mlp_ratio,
        "model.channels": d.channels,
        "model.with_expert": int(cfg.expert is not None),
    }
    if cfg.expert:
        meta["model.horizon"] = cfg.expert.horizon
        meta["model.layerwise"] = int(cfg.expert.layerwise)
    return {k: str(v) for k, v in meta.items()}


def config_from_meta(meta: dict[str, str]) -> ModelConfig:
    g = lambda k: int(meta[f"model.{k}"])
    backbone = BackboneConfig(image_size=g("image_size"), patch=g("patch"), dim=g("dim"),
                              layers=g("layers"), heads=g("heads"), mlp_ratio=g("mlp_ratio"),
                              max_text=g("max_text"), vocab_size=g("vocab_size"))
    depth = DepthHeadConfig(size=g("depth_size"), patch=g("depth_patch"), dim=g("dim"),
                            blocks=g("depth_blocks"),
                            heads=int(meta.get("model.depth_heads", meta["model.heads"])),
                            cond_dim=g("dim"), channels=g("channels"),
                            mlp_ratio=int(meta.get("model.depth_mlp_ratio", "4")))
    expert = None
    if g("with_expert"):
        expert = ActionExpertConfig(horizon=g("horizon"), dim=g("dim"), heads=g("heads"),
                                    layers=g("layers"), layerwise=bool(g("layerwise")))
    return ModelConfig(backbone=backbone, depth=depth, expert=expert)


class JointModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.connector = Connector(cfg.backbone.dim, cfg.depth.cond_dim)
        self.depth_head = DepthDiT(cfg.depth)
        self.action_expert = ActionExpert(cfg.expert) if cfg.expert else None

    def init_parameters(self, seed: int, zero_generators: bool = False) -> None:
        base = RngStream(seed, "init")
        self.backbone.init_parameters(base.child("backbone"), zero_head=True)
        self.connector.init_parameters(base.child("connector"))
        self.depth_head.init_parameters(base.child("depth_head"), zero_out=zero_generators)
        if self.action_expert is not None:
            self.action_expert.init_parameters(base.child("action_expert"), zero_out=zero_generators)

    def build_state(self) -> ModelState:
        state = ModelState()
        state.add_group(self.backbone.param_group())
        state.add_group(self.connector.param_group())
        state.add_group(self.depth_head.param_group())
        if self.action_expert is not None:
            state.add_group(self.action_expert.param_group())
        return state

    # loss components ------------------------------------------------------

    def ce_and_hidden(self, images, tokens, targets, target_mask):
        hidden, logits = self.backbone.forward(images, tokens, PAD_ID)
        return ce_loss(logits, targets, target_mask), hidden

    def depth_flow_loss(self, targets, t, noise, h_o=None, images=None,
                        weights=None) -> torch.Tensor:
        """Flow-matching loss of the depth generator conditioned on h_o."""
        if h_o is None:
            if images is None:
                raise ValueError("provide h_o or images")
            h_o = self.backbone.forward_visual(images)
        cond = self.connector(h_o)
        fs = flow_interpolate(targets.to(self.depth_head.dtype), t, noise.to(self.depth_head.dtype))
        pred = self.depth_head.forward(fs.x_t, t, cond)
        return flow_mse(pred, fs.target_velocity, weights)

    def action_loss(self, cond: ActionCondition, chunks, t, noise) -> torch.Tensor:
        if self.action_expert is None:
            raise RuntimeError("model built without an action expert")
        chunks = chunks.to(self.action_expert.dtype)
        noise = noise.to(self.action_expert.dtype)
        fs = flow_interpolate(chunks, t, noise)
        pred = self.action_expert.forward(fs.x_t, t, cond)
        return action_flow_loss(pred, chunks, noise, t)
