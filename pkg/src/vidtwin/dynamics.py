"""Dynamics branch: per-frame spatial downsampling, axis averaging and the decoding head.

The latent stores ``[avg over height ; avg over width]`` along its last axis,
so the first ``w_D`` entries are the height-averaged part and the remaining
``h_D`` entries the width-averaged part.
"""

from __future__ import annotations

import torch
import torch.nn as nn
from einops import rearrange

from .config import BackboneConfig, DynamicsConfig
from .errors import ConfigError, ShapeError
from .layers import QFormer


def avg_h(x):
    """(N, C, H, W) -> (N, C, W)."""
    return x.mean(dim=-2)


def avg_w(x):
    """(N, C, H, W) -> (N, C, H)."""
    return x.mean(dim=-1)


def rep_h(y, h: int):
    """Broadcast (B, c, f, w) along a new height axis -> (B, c, f, h, w)."""
    return y.unsqueeze(-2).expand(*y.shape[:-1], h, y.shape[-1])


def rep_w(y, w: int):
    """Broadcast (B, c, f, h) along a new width axis -> (B, c, f, h, w)."""
    return y.unsqueeze(-1).expand(*y.shape, w)


class DynamicsBranch(nn.Module):
    def __init__(self, cfg: DynamicsConfig, bb: BackboneConfig):
        super().__init__()
        problems = cfg.problems(bb)
        if problems:
            raise ConfigError("; ".join(problems))
        self.cfg, self.bb = cfg, bb
        c = bb.hidden_c
        f, h, w = bb.grid
        s = 2**cfg.n_down
        self.h_D, self.w_D = h // s, w // s

        down = []
        for i in range(cfg.n_down):
            down += [nn.Conv2d(c if i == 0 else cfg.c_mid, cfg.c_mid, 3, stride=2, padding=1), nn.GELU()]
        self.down = nn.Sequential(*down)

        if cfg.mode == "sqf_ablation":
            self.spatial_pos = nn.Parameter(torch.randn(1, self.h_D * self.w_D, cfg.c_mid) * 0.02)
            self.sqf = QFormer(cfg.c_mid, self.h_D + self.w_D, cfg.sqf_layers, cfg.sqf_heads)

        # head G: per-position MLP on the concatenated profile, then mean/logvar heads
        self.g_hidden = nn.Sequential(nn.Conv1d(cfg.c_mid, cfg.c_mid, 1), nn.GELU())
        self.mu_head = nn.Conv1d(cfg.c_mid, cfg.d_D, 1)
        self.logvar_head = nn.Conv1d(cfg.c_mid, cfg.d_D, 1)

        # decoding maps, bias-free like the structure head
        self.t_h_channel = nn.Linear(cfg.d_D, c, bias=False)
        self.t_h_length = nn.Linear(self.w_D, w, bias=False)
        self.t_w_channel = nn.Linear(cfg.d_D, c, bias=False)
        self.t_w_length = nn.Linear(self.h_D, h, bias=False)

    @property
    def split(self) -> int:
        return self.w_D

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        f = self.bb.grid[0]
        return (f, self.cfg.d_D, self.w_D + self.h_D)

    def stage1(self, z):
        """Core latent (B, c, f, h, w) -> z'_D of shape (B*f, c_mid, h_D, w_D)."""
        exp = (self.bb.hidden_c, *self.bb.grid)
        if z.dim() != 5 or tuple(z.shape[1:]) != exp:
            raise ShapeError(f"dynamics branch expects core latent (B, *{exp}), got {tuple(z.shape)}")
        return self.down(rearrange(z, "b c f h w -> (b f) c h w"))

    def reduce(self, zd):
        """(B*f, c_mid, h_D, w_D) -> (B*f, c_mid, w_D + h_D)."""
        if self.cfg.mode == "sqf_ablation":
            tokens = rearrange(zd, "n c h w -> n (h w) c") + self.spatial_pos
            return self.sqf(tokens).transpose(1, 2)
        return torch.cat([avg_h(zd), avg_w(zd)], dim=-1)

    def posterior_params(self, z):
        b = z.shape[0]
        g = self.g_hidden(self.reduce(self.stage1(z)))
        mu = rearrange(self.mu_head(g), "(b f) d l -> b f d l", b=b)
        logvar = rearrange(self.logvar_head(g), "(b f) d l -> b f d l", b=b)
        return mu, logvar

    def extract(self, z):
        """Posterior mean z_D of shape (B, f, d_D, w_D + h_D)."""
        return self.posterior_params(z)[0]

    def decode(self, z_d):
        """z_D (B, f, d_D, w_D + h_D) -> (u_Dh, u_Dw), each (B, c, f, h, w)."""
        if z_d.dim() != 4 or tuple(z_d.shape[1:]) != self.latent_shape:
            raise ShapeError(f"dynamics decode expects (B, *{self.latent_shape}), got {tuple(z_d.shape)}")
        _, h, w = self.bb.grid
        zh, zw = z_d[..., : self.w_D], z_d[..., self.w_D :]
        th = self.t_h_length(rearrange(self.t_h_channel(zh.transpose(-1, -2)), "b f l c -> b c f l"))
        tw = self.t_w_length(rearrange(self.t_w_channel(zw.transpose(-1, -2)), "b f l c -> b c f l"))
        return rep_h(th, h), rep_w(tw, w)
