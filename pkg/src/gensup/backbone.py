"""Tiny autoregressive multimodal transformer.

The sequence is [visual patches | prompt | <sep> | answer | <eos> | pads]
under a single causal mask; logits at text positions predict the next
token. The final-layer states at the visual positions (post final norm)
are the conditioning features consumed by the depth generator, and the
per-layer key/value tensors condition the action expert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .params import ParamGroup
from .rng import RngStream


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    max_text: int = 96
    vocab_size: int = 128

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B,H,W,3) -> (B, N, patch*patch*3), row-major patches, channel-last."""
    if images.ndim == 3:
        images = images.unsqueeze(0)
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image size {H}x{W} not divisible by patch {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch * C)


def unpatchify(patches: torch.Tensor, patch: int, height: int, width: int, channels: int = 3) -> torch.Tensor:
    B, N, _ = patches.shape
    gh, gw = height // patch, width // patch
    if N != gh * gw:
        raise ValueError(f"got {N} patches, expected {gh * gw}")
    x = patches.reshape(B, gh, gw, patch, patch, channels)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, height, width, channels)


@dataclass
class HiddenStates:
    h_o: torch.Tensor                    # (B, N_patches, D) final-layer visual states
    h_l: torch.Tensor                    # (B, T_text, D)
    kv_cache: list[tuple[torch.Tensor, torch.Tensor]]  # per layer: K,V (B, heads, T_all, head_dim)
    attend_mask: torch.Tensor            # (B, T_all) bool, False at PAD positions


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor):
        B, T, D = x.shape
        hd = D // self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(B, T, self.heads, hd).transpose(1, 2)
        k = k.view(B, T, self.heads, hd).transpose(1, 2)
        v = v.view(B, T, self.heads, hd).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.transpose(1, 2).reshape(B, T, D)
        x = x + self.proj(out)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, (k, v)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * 3, cfg.dim)
        self.vis_pos = nn.Parameter(torch.zeros(cfg.n_patches, cfg.dim))
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.text_pos = nn.Parameter(torch.zeros(cfg.max_text, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.vocab_size)

    def init_parameters(self, stream: RngStream, zero_head: bool = True) -> None:
        init_module_parameters(self, stream)
        if zero_head:
            with torch.no_grad():
                self.lm_head.weight.zero_()
                self.lm_head.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def _mask(self, pad: torch.Tensor) -> torch.Tensor:
        """Causal + key-padding additive mask, (B,1,T,T)."""
        B, T = pad.shape
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        allowed = causal.unsqueeze(0) & ~pad.unsqueeze(1)     # (B, T, T): query x key
        eye = torch.eye(T, dtype=torch.bool).unsqueeze(0)
        allowed = allowed | eye                               # pads may attend themselves
        bias = torch.zeros(B, T, T, dtype=self.dtype)
        bias.masked_fill_(~allowed, float("-inf"))
        return bias.unsqueeze(1)

    def forward(self, images: torch.Tensor, tokens: torch.Tensor, pad_id: int):
        """Full multimodal pass.

        images: (B, H, W, 3) in [0,1]; tokens: (B, T_text) long.
        Returns (HiddenStates, logits (B, T_text, V)): logits[i] predicts tokens[i+1].
        """
        cfg = self.cfg
        vis = self.patch_embed(patchify(images.to(self.dtype), cfg.patch)) + self.vis_pos
        B, T_text = tokens.shape
        if T_text > cfg.max_text:
            raise ValueError(f"text length {T_text} exceeds maximum {cfg.max_text}")
        txt = self.tok_emb(tokens) + self.text_pos[:T_text]
        x = torch.cat([vis, txt], dim=1)
        pad = torch.cat([torch.zeros(B, cfg.n_patches, dtype=torch.bool), tokens == pad_id], dim=1)
        mask = self._mask(pad)
        kv = []
        for block in self.blocks:
            x, layer_kv = block(x, mask)
            kv.append(layer_kv)
        x = self.ln_f(x)
        h_o, h_l = x[:, :cfg.n_patches], x[:, cfg.n_patches:]
        logits = self.lm_head(h_l)
        hidden = HiddenStates(h_o=h_o, h_l=h_l, kv_cache=kv, attend_mask=~pad)
        return hidden, logits

    def forward_visual(self, images: torch.Tensor) -> torch.Tensor:
        """Visual-only pass: h_o without any text (same math, cheaper).

        Under the causal mask, visual positions never attend to text, so
        the visual slice of the full forward computes exactly this.
        """
        cfg = self.cfg
        x = self.patch_embed(patchify(images.to(self.dtype), cfg.patch)) + self.vis_pos
        B, T, _ = x.shape
        bias = torch.zeros(T, T, dtype=self.dtype)
        bias.masked_fill_(~torch.ones(T, T, dtype=torch.bool).tril(), float("-inf"))
        mask = bias.expand(B, 1, T, T)
        for block in self.blocks:
            x, _ = block(x, mask)
        return self.ln_f(x)

    def param_group(self) -> ParamGroup:
        g = ParamGroup("backbone")
        for name, p in self.named_parameters():
            g.add(name, p)
        return g


def ce_loss(logits: torch.Tensor, targets: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over supervised (non-PAD) positions."""
    if target_mask.sum() == 0:
        raise ValueError("ce_loss: no supervised positions (all PAD)")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * target_mask).sum() / target_mask.sum()


@torch.no_grad()
def greedy_decode(
    backbone: Backbone,
    images: torch.Tensor,
    prompts: list[list[int]],
    vocab,
    max_answer: int = 56,
) -> list[list[int]]:
    """Batched greedy decoding after <sep>; stops each row at <eos>."""
    B = len(prompts)
    rows = [list(p) + [vocab.sep_id] for p in prompts]
    done = [False] * B
    answers: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_answer):
        T = max(len(r) for r in rows)
        tokens = torch.full((B, T), vocab.pad_id, dtype=torch.long)
        for i, r in enumerate(rows):
            tokens[i, :len(r)] = torch.tensor(r, dtype=torch.long)
        _, logits = backbone.forward(images, tokens, vocab.pad_id)
        for i, r in enumerate(rows):
            if done[i]:
                continue
            nxt = int(logits[i, len(r) - 1].argmax())
            if nxt == vocab.eos_id:
                done[i] = True
            else:
                answers[i].append(nxt)
                rows[i].append(nxt)
        if all(done):
            break
    return answers


def init_module_parameters(module: nn.Module, stream: RngStream) -> None:
    """Deterministic init from a named stream (platform-stable).

    Linear weights: normal scaled by 1/sqrt(fan_in); embeddings: normal * 0.02;
    LayerNorm: weight 1, bias 0; loose Parameters (position tables): 0.02.
    """
    with torch.no_grad():
        done: set[int] = set()
        for mname, m in module.named_modules():
            if isinstance(m, nn.LayerNorm):
                if m.weight is None:
                    continue
                m.weight.fill_(1.0)
                m.bias.zero_()
                done.update((id(m.weight), id(m.bias)))
            elif isinstance(m, nn.Linear):
                fan_in = m.weight.shape[1]
                m.weight.copy_(stream.child(f"{mname}.weight").torch_normal(tuple(m.weight.shape)) / math.sqrt(fan_in))
                done.add(id(m.weight))
                if m.bias is not None:
                    m.bias.zero_()
                    done.add(id(m.bias))
            elif isinstance(m, nn.Embedding):
                m.weight.copy_(stream.child(f"{mname}.weight").torch_normal(tuple(m.weight.shape)) * 0.02)
                done.add(id(m.weight))
        for name, p in module.named_parameters():
            if id(p) not in done:
                p.copy_(stream.child(name).torch_normal(tuple(p.shape)) * 0.02)
