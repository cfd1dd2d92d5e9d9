"""Structure branch: temporal Q-Former extraction and its decoding head.

Spatial cells are folded into the batch axis in row-major order (row ``i*w + j``
holds cell ``(i, j)``), so the Q-Former reads each location's temporal sequence
independently. Two ablation modes replace the Q-Former stage.
"""

from __future__ import annotations

import torch
import torch.nn as nn
from einops import rearrange

from .config import BackboneConfig, StructureConfig
from .errors import ConfigError, ShapeError
from .layers import Mlp, QFormer


class StructureBranch(nn.Module):
    def __init__(self, cfg: StructureConfig, bb: BackboneConfig):
        super().__init__()
        problems = cfg.problems(bb)
        if problems:
            raise ConfigError("; ".join(problems))
        self.cfg, self.bb = cfg, bb
        c = bb.hidden_c
        f, h, w = bb.grid
        d_q = cfg.d_q

        self.in_mlp = Mlp(c, d_q, d_q)
        if cfg.mode == "qformer":
            self.temporal_pos = nn.Parameter(torch.randn(1, f, d_q) * 0.02)
            self.qformer = QFormer(d_q, cfg.n_q, cfg.qformer_layers, cfg.qformer_heads)
        elif cfg.mode == "conv_ablation":
            k = f // cfg.n_q
            self.temporal_conv = nn.Conv1d(d_q, d_q, kernel_size=k, stride=k)
            self.out_mlp = Mlp(d_q, d_q)
        else:  # hidden_ablation
            d_fold = 4 * d_q
            self.fold_in = nn.Linear(h * w * d_q, d_fold)
            self.temporal_pos = nn.Parameter(torch.randn(1, f, d_fold) * 0.02)
            self.qformer = QFormer(d_fold, cfg.n_q, cfg.qformer_layers, cfg.qformer_heads)
            self.fold_out = nn.Linear(d_fold, h * w * d_q)

        down = []
        for _ in range(cfg.n_down):
            down += [nn.Conv2d(d_q, d_q, 3, stride=2, padding=1), nn.GELU()]
        self.down = nn.Sequential(*down)
        self.mu_head = nn.Conv2d(d_q, cfg.d_S, 1)
        self.logvar_head = nn.Conv2d(d_q, cfg.d_S, 1)

        # decoding head; bias-free so a zero latent decodes to a zero contribution
        up = [nn.Conv2d(cfg.d_S, d_q, 1, bias=False)]
        for _ in range(cfg.n_down):
            up += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(d_q, d_q, 3, padding=1, bias=False), nn.GELU()]
        up.append(nn.Conv2d(d_q, c, 1, bias=False))
        self.up = nn.Sequential(*up)
        self.token_map = nn.Linear(cfg.n_q, f, bias=False)

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        _, h, w = self.bb.grid
        s = 2**self.cfg.n_down
        return (self.cfg.n_q, self.cfg.d_S, h // s, w // s)

    def _check_core(self, z):
        exp = (self.bb.hidden_c, *self.bb.grid)
        if z.dim() != 5 or tuple(z.shape[1:]) != exp:
            raise ShapeError(f"structure branch expects core latent (B, *{exp}), got {tuple(z.shape)}")

    def queries(self):
        return self.qformer.queries

    def stage1(self, z):
        """Core latent (B, c, f, h, w) -> z'_S of shape (B*h*w, n_q, d_q)."""
        self._check_core(z)
        b, c, f, h, w = z.shape
        mode = self.cfg.mode
        if mode == "hidden_ablation":
            seq = self.in_mlp(rearrange(z, "b c f h w -> b f h w c"))
            seq = self.fold_in(rearrange(seq, "b f h w d -> b f (h w d)")) + self.temporal_pos
            out = self.fold_out(self.qformer(seq))
            return rearrange(out, "b n (h w d) -> (b h w) n d", h=h, w=w)
        seq = self.in_mlp(rearrange(z, "b c f h w -> (b h w) f c"))
        if mode == "qformer":
            return self.qformer(seq + self.temporal_pos)
        reduced = self.temporal_conv(seq.transpose(1, 2)).transpose(1, 2)
        return self.out_mlp(nn.functional.gelu(reduced))

    def stage2(self, zq, batch: int):
        """(B*h*w, n_q, d_q) -> pre-head feature map (B*n_q, d_q, h_S, w_S)."""
        _, h, w = self.bb.grid
        x = rearrange(zq, "(b h w) n d -> (b n) d h w", b=batch, h=h, w=w)
        return self.down(x)

    def posterior_params(self, z):
        b = z.shape[0]
        feats = self.stage2(self.stage1(z), b)
        mu = rearrange(self.mu_head(feats), "(b n) d h w -> b n d h w", b=b)
        logvar = rearrange(self.logvar_head(feats), "(b n) d h w -> b n d h w", b=b)
        return mu, logvar

    def extract(self, z):
        """Posterior mean z_S of shape (B, n_q, d_S, h_S, w_S)."""
        return self.posterior_params(z)[0]

    def decode(self, z_s):
        """z_S (B, n_q, d_S, h_S, w_S) -> u_S (B, c, f, h, w)."""
        if z_s.dim() != 5 or tuple(z_s.shape[1:]) != self.latent_shape:
            raise ShapeError(f"structure decode expects (B, *{self.latent_shape}), got {tuple(z_s.shape)}")
        b = z_s.shape[0]
        x = self.up(rearrange(z_s, "b n d h w -> (b n) d h w"))
        x = rearrange(x, "(b n) c h w -> b c h w n", b=b)
        return rearrange(self.token_map(x), "b c h w f -> b c f h w")
