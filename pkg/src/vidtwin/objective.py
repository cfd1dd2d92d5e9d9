"""Gaussian posteriors, reparameterized sampling and the autoencoder training loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from torch.func import functional_call

from .config import LossWeights
from .errors import ContractError, NumericError, ShapeError

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass
class GaussianPosterior:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ")
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    @property
    def sigma(self):
        return torch.exp(0.5 * self.logvar)


def reparameterize(post: GaussianPosterior, noise: torch.Tensor | None, train_mode: bool = True):
    """``mu + sigma * noise`` in training, ``mu`` exactly otherwise."""
    if not train_mode:
        return post.mu
    if noise is None:
        noise = torch.randn_like(post.mu)
    if noise.shape != post.mu.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match mu {tuple(post.mu.shape)}")
    return post.mu + post.sigma * noise


def kl_loss(post: GaussianPosterior):
    """Mean over elements of KL(N(mu, sigma^2) || N(0, 1))."""
    if not (torch.isfinite(post.mu).all() and torch.isfinite(post.logvar).all()):
        raise NumericError("posterior has non-finite parameters")
    # expm1 keeps exp(lv) - 1 - lv accurate near 0; the clamp removes rounding below 0
    per_elem = 0.5 * (post.mu.pow(2) + torch.expm1(post.logvar) - post.logvar)
    return per_elem.clamp_min(0.0).mean()


def rec_loss(x_hat, x):
    """Mean absolute error."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction {tuple(x_hat.shape)} vs target {tuple(x.shape)}")
    return (x_hat - x).abs().mean()


class PerceptualNet(nn.Module):
    """Frozen random conv pyramid applied per frame.

    Returns the pre-activation output of each of its four stages. The first
    stage is a stride-1 conv with more output than input channels, so its
    features separate distinct inputs.
    """

    def __init__(self, in_ch: int = 3, widths=(16, 32, 64, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, prev = [], in_ch
        for i, width in enumerate(widths):
            conv = nn.Conv2d(prev, width, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / fan_in**0.5)
                conv.bias.zero_()
            convs.append(conv)
            prev = width
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def forward(self, clip):
        x = rearrange(clip, "b c f h w -> (b f) c h w")
        feats = []
        for i, conv in enumerate(self.convs):
            x = conv(x if i == 0 else F.leaky_relu(x, 0.2))
            feats.append(x)
        return feats


def perceptual_loss(x_hat, x, feature_net: nn.Module):
    """Mean over stages of the mean squared feature distance."""
    if any(p.requires_grad for p in feature_net.parameters()):
        raise ContractError("perceptual feature network must be frozen")
    if x_hat.shape != x.shape:
        raise ShapeError(f"perceptual loss inputs differ: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    fa, fb = feature_net(x_hat), feature_net(x)
    return sum((a - b).pow(2).mean() for a, b in zip(fa, fb)) / len(fa)


class PatchDiscriminator(nn.Module):
    """Per-frame patch discriminator over RGB plus the frame-to-frame difference.

    Input (B, C, F, H, W); output patch logits (B*F, 1, H/16, W/16) for
    H, W >= 16.
    """

    def __init__(self, in_ch: int = 3, width: int = 32):
        super().__init__()
        chans = [2 * in_ch, width, 2 * width, 4 * width, 4 * width]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(chans[-1], 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, clip):
        diff = torch.cat([torch.zeros_like(clip[:, :, :1]), clip[:, :, 1:] - clip[:, :, :-1]], dim=2)
        x = rearrange(torch.cat([clip, diff], dim=1), "b c f h w -> (b f) c h w")
        return self.net(x)


def _frozen_call(disc, x):
    if isinstance(disc, nn.Module):
        params = {k: v.detach() for k, v in disc.named_parameters()}
        buffers = dict(disc.named_buffers())
        return functional_call(disc, {**params, **buffers}, (x,))
    return disc(x)


def gan_losses(x_hat, x, discriminator):
    """Hinge losses ``(gan_g, gan_d)``.

    ``gan_g`` back-propagates into ``x_hat`` only; ``gan_d`` into the
    discriminator only.
    """
    gan_d = F.relu(1.0 - discriminator(x)).mean() + F.relu(1.0 + discriminator(x_hat.detach())).mean()
    gan_g = -_frozen_call(discriminator, x_hat).mean()
    return gan_g, gan_d


@dataclass
class LossBundle:
    rec: torch.Tensor
    perceptual: torch.Tensor
    gan_g: torch.Tensor
    gan_d: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(v).detach()) for k, v in self.__dict__.items()}


def total_loss(parts: dict, w: LossWeights, step: int) -> LossBundle:
    """Weighted generator loss; the GAN term is off before ``w.gan_start_step``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    zero = torch.zeros(())
    rec = torch.as_tensor(parts["rec"])
    perceptual = torch.as_tensor(parts.get("perceptual", zero))
    gan_g = torch.as_tensor(parts.get("gan_g", zero))
    gan_d = torch.as_tensor(parts.get("gan_d", zero))
    kl = torch.as_tensor(parts.get("kl", zero))
    total = rec + w.lambda_p * perceptual + w.lambda_kl * kl
    if step >= w.gan_start_step and w.lambda_gan:
        total = total + w.lambda_gan * gan_g
    out = LossBundle(rec, perceptual, gan_g, gan_d, kl, total)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss: {out.as_floats()}")
    return out
