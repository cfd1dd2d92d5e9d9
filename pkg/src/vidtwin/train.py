"""Joint autoencoder training on the synthetic moving-shapes corpus."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .model import VidTwin
from .objective import (
    PatchDiscriminator,
    PerceptualNet,
    gan_losses,
    kl_loss,
    perceptual_loss,
    rec_loss,
    total_loss,
)
from .video_io import synth_dataset

log = logging.getLogger(__name__)


def synthetic_corpus(cfg: RunConfig, n: int | None = None, seed: int | None = None) -> torch.Tensor:
    """(N, C, F, H, W) tensor of synthetic clips matching the backbone input size."""
    bb = cfg.model.backbone
    n = cfg.train.dataset_size if n is None else n
    seed = cfg.train.seed if seed is None else seed
    clips = synth_dataset(n, seed=seed, F=bb.frames, H=bb.height, W=bb.width)
    return torch.from_numpy(np.stack([c.data for c in clips]))


@dataclass
class TrainResult:
    model: VidTwin
    discriminator: PatchDiscriminator | None
    history: list[dict] = field(default_factory=list)
    eval_l1: list[tuple[int, float]] = field(default_factory=list)

    @property
    def initial_eval_l1(self) -> float:
        return self.eval_l1[0][1]

    @property
    def final_eval_l1(self) -> float:
        return self.eval_l1[-1][1]


@torch.no_grad()
def eval_l1(model: VidTwin, data: torch.Tensor, batch: int = 16) -> float:
    """Mean-latent reconstruction L1 over ``data``."""
    was_training = model.training
    model.eval()
    total = 0.0
    for i in range(0, len(data), batch):
        x = data[i : i + batch]
        total += float((model.reconstruct(x) - x).abs().sum())
    model.train(was_training)
    return total / data.numel()


def train_autoencoder(
    cfg: RunConfig,
    data: torch.Tensor | None = None,
    eval_data: torch.Tensor | None = None,
    eval_every: int = 0,
    model: VidTwin | None = None,
) -> TrainResult:
    """Train all modules jointly; deterministic for a fixed ``cfg.train.seed``."""
    cfg.validate()
    tc = cfg.train
    torch.manual_seed(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    if data is None:
        data = synthetic_corpus(cfg)
    if eval_data is None:
        eval_data = data[: min(len(data), 16)]
    model = VidTwin(cfg.model) if model is None else model
    percept = PerceptualNet(in_ch=cfg.model.backbone.channels)
    disc = PatchDiscriminator(cfg.model.backbone.channels) if tc.use_gan else None
    opt_g = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tuple(tc.betas))
    opt_d = torch.optim.Adam(disc.parameters(), lr=tc.lr, betas=tuple(tc.betas)) if disc else None

    result = TrainResult(model, disc)
    result.eval_l1.append((0, eval_l1(model, eval_data)))
    model.train()
    w = tc.weights
    for step in range(tc.steps):
        idx = torch.randint(0, len(data), (tc.batch,), generator=gen)
        x = data[idx]
        out = model(x, generator=gen)
        x_hat = out["x_hat"]
        parts = {
            "rec": rec_loss(x_hat, x),
            "perceptual": perceptual_loss(x_hat, x, percept) if w.lambda_p else torch.zeros(()),
            "kl": sum(kl_loss(p) for p in out["posteriors"]),
        }
        gan_on = disc is not None and step >= w.gan_start_step
        if gan_on:
            parts["gan_g"], parts["gan_d"] = gan_losses(x_hat, x, disc)
        bundle = total_loss(parts, w, step)
        opt_g.zero_grad(set_to_none=True)
        bundle.total.backward()
        opt_g.step()
        if gan_on:
            opt_d.zero_grad(set_to_none=True)
            bundle.gan_d.backward()
            opt_d.step()
        result.history.append(bundle.as_floats())
        if tc.log_every and step % tc.log_every == 0:
            log.info("step %d %s", step, {k: round(v, 5) for k, v in result.history[-1].items()})
        if eval_every and (step + 1) % eval_every == 0:
            result.eval_l1.append((step + 1, eval_l1(model, eval_data)))
    if not result.eval_l1 or result.eval_l1[-1][0] != tc.steps:
        result.eval_l1.append((tc.steps, eval_l1(model, eval_data)))
    model.eval()
    return result
