"""Spatial-temporal transformer encoder and decoder.

Each block attends over the ``h*w`` tokens of a frame, then over the ``f``
positions of each spatial location with a causal mask, then applies an MLP.
Because patch embedding and spatial attention are per frame, encoder output
frame ``t`` depends on input frames ``0..t`` only.
"""

from __future__ import annotations

import torch
import torch.nn as nn
from einops import rearrange

from .config import BackboneConfig
from .errors import NumericError, ShapeError
from .layers import Attention, Mlp


class SpaceTimeBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, causal: bool = True):
        super().__init__()
        self.causal = causal
        self.norm_s = nn.LayerNorm(dim)
        self.attn_s = Attention(dim, heads)
        self.norm_t = nn.LayerNorm(dim)
        self.attn_t = Attention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        # x: (B, f, n, c)
        b, f, n, c = x.shape
        s = x.reshape(b * f, n, c)
        s = s + self.attn_s(self.norm_s(s))
        t = s.view(b, f, n, c).transpose(1, 2).reshape(b * n, f, c)
        t = t + self.attn_t(self.norm_t(t), causal=self.causal)
        x = t.view(b, n, f, c).transpose(1, 2)
        return x + self.mlp(self.norm_mlp(x))


class _SpaceTimeStack(nn.Module):
    def __init__(self, cfg: BackboneConfig, causal: bool):
        super().__init__()
        f, h, w = cfg.grid
        self.pos_spatial = nn.Parameter(torch.randn(1, 1, h * w, cfg.hidden_c) * 0.02)
        self.pos_temporal = nn.Parameter(torch.randn(1, f, 1, cfg.hidden_c) * 0.02)
        self.blocks = nn.ModuleList(
            SpaceTimeBlock(cfg.hidden_c, cfg.heads, cfg.mlp_ratio, causal) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden_c)

    def run(self, tokens):
        x = tokens + self.pos_spatial + self.pos_temporal
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Encoder(_SpaceTimeStack):
    """(B, C, F, H, W) clip -> (B, c, f, h, w) core latent."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg, causal=True)
        self.cfg = cfg
        p = cfg.spatial_patch
        self.patch_embed = nn.Linear(cfg.channels * p * p, cfg.hidden_c)

    def forward(self, x):
        cfg = self.cfg
        expected = (cfg.channels, cfg.frames, cfg.height, cfg.width)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"encoder expects (B, *{expected}), got {tuple(x.shape)}")
        if x.device.type != "meta" and not torch.isfinite(x).all():
            raise NumericError("encoder input contains non-finite values")
        p = cfg.spatial_patch
        tokens = rearrange(x, "b c f (h p1) (w p2) -> b f (h w) (p1 p2 c)", p1=p, p2=p)
        out = self.run(self.patch_embed(tokens))
        _, h, w = cfg.grid
        return rearrange(out, "b f (h w) c -> b c f h w", h=h, w=w)


class Decoder(_SpaceTimeStack):
    """(B, c, f, h, w) aligned latent -> (B, C, F, H, W) clip in [-1, 1]."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg, causal=cfg.causal_decoder)
        self.cfg = cfg
        p = cfg.spatial_patch
        self.unpatch = nn.Linear(cfg.hidden_c, cfg.channels * p * p)

    def forward(self, u):
        cfg = self.cfg
        f, h, w = cfg.grid
        if u.dim() != 5 or tuple(u.shape[1:]) != (cfg.hidden_c, f, h, w):
            raise ShapeError(f"decoder expects (B, {cfg.hidden_c}, {f}, {h}, {w}), got {tuple(u.shape)}")
        tokens = rearrange(u, "b c f h w -> b f (h w) c")
        out = self.unpatch(self.run(tokens))
        p = cfg.spatial_patch
        x = rearrange(out, "b f (h w) (p1 p2 c) -> b c f (h p1) (w p2)", h=h, w=w, p1=p, p2=p)
        return torch.tanh(x)


def fuse(u_s, u_dh, u_dw):
    """Element-wise sum of the three branch outputs."""
    if not (u_s.shape == u_dh.shape == u_dw.shape):
        raise ShapeError(
            f"fusion parts differ in shape: {tuple(u_s.shape)}, {tuple(u_dh.shape)}, {tuple(u_dw.shape)}"
        )
    return u_s + u_dh + u_dw


def fuse_and_decode(decoder: Decoder, u_s, u_dh, u_dw):
    return decoder(fuse(u_s, u_dh, u_dw))
