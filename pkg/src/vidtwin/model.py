"""The decoupled autoencoder: backbone, both branches, posterior sampling and checkpoints.

Checkpoint format (``torch.save`` of a dict, version 1)::

    format      "vidtwin-checkpoint"
    version     1
    config      ModelConfig as a plain dict
    manifest    {parameter name: shape list}
    state_dict  tensors keyed by parameter name
    extra       free-form metadata (e.g. training step)
"""

from __future__ import annotations

import itertools
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import Decoder, Encoder, fuse
from .config import BackboneConfig, ModelConfig, _build
from .dynamics import DynamicsBranch
from .errors import ConfigError, FormatError, IngestionError
from .objective import GaussianPosterior, reparameterize
from .structure import StructureBranch

CHECKPOINT_FORMAT = "vidtwin-checkpoint"
CHECKPOINT_VERSION = 1


def decoupled_latent_size(cfg: ModelConfig) -> int:
    bb, s, d = cfg.backbone, cfg.structure, cfg.dynamics
    f, h, w = bb.grid
    hs, ws = h // 2**s.n_down, w // 2**s.n_down
    hd, wd = h // 2**d.n_down, w // 2**d.n_down
    return s.n_q * s.d_S * hs * ws + f * d.d_D * (hd + wd)


def single_latent_layout(bb: BackboneConfig, budget: int) -> tuple[int, int, int]:
    """Pick ``(channels, temporal_stride, spatial_stride)`` whose element count is closest to ``budget``."""
    f, h, w = bb.grid
    best = None
    for ts in (d for d in range(1, f + 1) if f % d == 0):
        for k in (2**i for i in range(0, 8)):
            if h % k or w % k:
                continue
            cells = (f // ts) * (h // k) * (w // k)
            ch = max(1, round(budget / cells))
            err = abs(ch * cells - budget) / budget
            key = (err, -cells)
            if best is None or key < best[0]:
                best = (key, (ch, ts, k))
    return best[1]


class SingleLatentBranch(nn.Module):
    """One strided conv bottleneck over the core latent, sized to the decoupled budget."""

    def __init__(self, bb: BackboneConfig, budget: int):
        super().__init__()
        self.bb = bb
        ch, ts, k = single_latent_layout(bb, budget)
        self.layout = (ch, ts, k)
        c = bb.hidden_c
        self.down = nn.Sequential(nn.Conv3d(c, c, (ts, k, k), stride=(ts, k, k)), nn.GELU())
        self.mu_head = nn.Conv3d(c, ch, 1)
        self.logvar_head = nn.Conv3d(c, ch, 1)
        self.up = nn.ConvTranspose3d(ch, c, (ts, k, k), stride=(ts, k, k), bias=False)

    @property
    def latent_shape(self):
        ch, ts, k = self.layout
        f, h, w = self.bb.grid
        return (ch, f // ts, h // k, w // k)

    def posterior_params(self, z):
        feats = self.down(z)
        return self.mu_head(feats), self.logvar_head(feats)

    def decode(self, latent):
        return self.up(latent)


class VidTwin(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.backbone)
        self.decoder = Decoder(cfg.backbone)
        if cfg.single_latent:
            self.single = SingleLatentBranch(cfg.backbone, decoupled_latent_size(cfg))
        else:
            self.structure = StructureBranch(cfg.structure, cfg.backbone)
            self.dynamics = DynamicsBranch(cfg.dynamics, cfg.backbone)

    # -- encoding ---------------------------------------------------------------------

    def encode(self, x):
        """Clip batch (B, C, F, H, W) -> core latent (B, c, f, h, w)."""
        return self.encoder(x)

    def posteriors(self, x) -> list[GaussianPosterior]:
        z = self.encode(x)
        if self.cfg.single_latent:
            return [GaussianPosterior(*self.single.posterior_params(z))]
        return [
            GaussianPosterior(*self.structure.posterior_params(z)),
            GaussianPosterior(*self.dynamics.posterior_params(z)),
        ]

    def encode_latents(self, x):
        """Posterior means ``(z_S, z_D)``, the latents used at inference."""
        post_s, post_d = self.posteriors(x)
        return post_s.mu, post_d.mu

    # -- decoding ---------------------------------------------------------------------

    def branch_outputs(self, z_s, z_d):
        u_s = self.structure.decode(z_s)
        u_dh, u_dw = self.dynamics.decode(z_d)
        return u_s, u_dh, u_dw

    def decode_latents(self, z_s, z_d, use_structure: bool = True, use_dynamics: bool = True):
        u_s, u_dh, u_dw = self.branch_outputs(z_s, z_d)
        if not use_structure:
            u_s = torch.zeros_like(u_s)
        if not use_dynamics:
            u_dh, u_dw = torch.zeros_like(u_dh), torch.zeros_like(u_dw)
        return self.decoder(fuse(u_s, u_dh, u_dw))

    def reconstruct(self, x):
        if self.cfg.single_latent:
            (post,) = self.posteriors(x)
            return self.decoder(self.single.decode(post.mu))
        return self.decode_latents(*self.encode_latents(x))

    def forward(self, x, noise: list | None = None, sample: bool = True, generator=None):
        """Full pass. Returns ``x_hat`` and the posteriors.

        ``noise`` gives one standard-normal tensor per posterior; otherwise it is
        drawn from ``generator``. With ``sample=False`` the means are decoded.
        """
        posts = self.posteriors(x)
        if noise is None and sample:
            noise = [
                torch.randn(p.mu.shape, generator=generator, dtype=p.mu.dtype, device=p.mu.device)
                for p in posts
            ]
        latents = [
            reparameterize(p, None if noise is None else n, train_mode=sample)
            for p, n in zip(posts, noise or itertools.repeat(None))
        ]
        if self.cfg.single_latent:
            x_hat = self.decoder(self.single.decode(latents[0]))
        else:
            x_hat = self.decode_latents(*latents)
        return {"x_hat": x_hat, "posteriors": posts, "latents": latents}

    def autoencoder_parameters(self):
        return self.parameters()


def to_batch(clip_data) -> torch.Tensor:
    arr = np.asarray(clip_data, dtype=np.float32)
    t = torch.from_numpy(arr)
    return t.unsqueeze(0) if t.dim() == 4 else t


def save_checkpoint(model: VidTwin, path: str | Path, extra: dict | None = None) -> None:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "manifest": {k: list(v.shape) for k, v in state.items()},
            "state_dict": state,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[VidTwin, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise IngestionError(str(exc)) from exc
    except Exception as exc:  # torch raises several types for corrupt pickles
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a vidtwin checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = _build(ModelConfig, blob["config"])
    state = blob["state_dict"]
    bad = [k for k, shape in blob["manifest"].items() if k not in state or list(state[k].shape) != shape]
    if bad:
        raise FormatError(f"{path}: manifest mismatch for {bad[:5]}")
    model = VidTwin(cfg)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"{path}: checkpoint does not match its config ({exc})") from exc
    model.eval()
    return model, blob.get("extra", {})
