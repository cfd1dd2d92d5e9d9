"""Latent diffusion over packed (z_S, z_D) token sequences.

Packing normalizes each branch per channel, views z_S as a
``(d_S, n_q, h_S, w_S)`` volume and z_D as a single-frame ``(d_D, 1, f, w_D + h_D)``
volume, cuts both into cubic patches (zero-padding odd axes), flattens each
patch and zero-pads it to a common width. The structure tokens come first.
The model predicts ``y0`` directly; sampling uses deterministic DDIM with
classifier-free guidance.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import DiffusionConfig
from .errors import ScheduleError, ShapeError, StatsError
from .layers import Attention, Mlp

# --- schedule --------------------------------------------------------------------


@dataclass
class DiffusionSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ScheduleError(f"invalid schedule T={self.T}, betas=({self.beta_start}, {self.beta_end})")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t) -> torch.Tensor:
        return torch.as_tensor(self.alpha_bars, dtype=torch.float64)[torch.as_tensor(t)]


def forward_diffuse(y0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Closed-form ``sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps``; ``t`` is an int or a (B,) tensor."""
    t = torch.as_tensor(t)
    if (t < 0).any() or (t >= sched.T).any():
        raise ScheduleError(f"timestep outside [0, {sched.T})")
    ab = sched.alpha_bar(t).to(y0.dtype)
    ab = ab.view(*ab.shape, *([1] * (y0.dim() - ab.dim())))
    return ab.sqrt() * y0 + (1 - ab).sqrt() * eps


# --- normalization statistics ----------------------------------------------------


@dataclass
class NormStats:
    s_mean: list[float]
    s_std: list[float]
    d_mean: list[float]
    d_std: list[float]

    def __post_init__(self):
        if min(self.s_std + self.d_std) <= 0:
            raise StatsError("normalization std must be positive")

    @property
    def id(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"id": self.id, **asdict(self)}, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        data = json.loads(Path(path).read_text())
        stored = data.pop("id", None)
        stats = cls(**data)
        if stored is not None and stored != stats.id:
            raise StatsError(f"{path}: stats id {stored} does not match contents")
        return stats

    def tensors(self, branch: str, dtype=torch.float32):
        mean, std = (self.s_mean, self.s_std) if branch == "S" else (self.d_mean, self.d_std)
        return torch.tensor(mean, dtype=dtype), torch.tensor(std, dtype=dtype)


def compute_norm_stats(z_s: torch.Tensor, z_d: torch.Tensor) -> NormStats:
    """Per-channel stats of z_S (N, n_q, d_S, h, w) and z_D (N, f, d_D, L) over a corpus."""
    s = z_s.transpose(0, 2).reshape(z_s.shape[2], -1).double()
    d = z_d.transpose(0, 2).reshape(z_d.shape[2], -1).double()
    s_std, d_std = s.std(dim=1, unbiased=False), d.std(dim=1, unbiased=False)
    if (s_std <= 0).any() or (d_std <= 0).any():
        raise StatsError("a latent channel is constant over the corpus; cannot standardize")
    return NormStats(s.mean(1).tolist(), s_std.tolist(), d.mean(1).tolist(), d_std.tolist())


def identity_stats(d_S: int, d_D: int) -> NormStats:
    return NormStats([0.0] * d_S, [1.0] * d_S, [0.0] * d_D, [1.0] * d_D)


# --- packing ---------------------------------------------------------------------


def _padded_grid(dims, p):
    return tuple(math.ceil(v / p) for v in dims)


def token_counts(zs_shape, zd_shape, patch: int) -> tuple[int, int]:
    """(L_S, L_D) for z_S (n_q, d_S, h_S, w_S) and z_D (f, d_D, w_D + h_D)."""
    n_q, _, h_s, w_s = zs_shape
    f, _, length = zd_shape
    return math.prod(_padded_grid((n_q, h_s, w_s), patch)), math.prod(_padded_grid((1, f, length), patch))


@dataclass
class Layout:
    zs_shape: tuple[int, int, int, int]
    zd_shape: tuple[int, int, int]
    split: int
    patch: int
    n_structure: int
    n_dynamics: int
    s_pad: tuple[int, int, int]
    d_pad: tuple[int, int, int]
    token_dim: int
    projection: str
    stats_id: str

    @property
    def length(self) -> int:
        return self.n_structure + self.n_dynamics

    def segment_ids(self) -> torch.Tensor:
        return torch.cat([torch.zeros(self.n_structure, dtype=torch.long), torch.ones(self.n_dynamics, dtype=torch.long)])


def make_layout(zs_shape, zd_shape, split: int, patch: int, stats_id: str = "", projection: str = "identity") -> Layout:
    n_q, d_s, h_s, w_s = zs_shape
    f, d_d, length = zd_shape
    s_vol, d_vol = (n_q, h_s, w_s), (1, f, length)
    s_grid, d_grid = _padded_grid(s_vol, patch), _padded_grid(d_vol, patch)
    s_pad = tuple(g * patch - v for g, v in zip(s_grid, s_vol))
    d_pad = tuple(g * patch - v for g, v in zip(d_grid, d_vol))
    token_dim = max(d_s, d_d) * patch**3
    return Layout(tuple(zs_shape), tuple(zd_shape), split, patch, math.prod(s_grid), math.prod(d_grid),
                  s_pad, d_pad, token_dim, projection, stats_id)


def projection_matrix(dim: int, mode: str, dtype=torch.float32) -> torch.Tensor | None:
    """Fixed token projection: ``None`` for identity, else a seeded orthogonal matrix."""
    if mode == "identity":
        return None
    gen = torch.Generator().manual_seed(0)
    q, r = torch.linalg.qr(torch.randn(dim, dim, generator=gen, dtype=torch.float64))
    q = q * torch.sign(torch.diagonal(r))
    return q.to(dtype)


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, L, token_dim)
    layout: Layout


def _patchify(vol, pad, p):
    # vol: (B, C, T, H, W)
    vol = F.pad(vol, (0, pad[2], 0, pad[1], 0, pad[0]))
    return rearrange(vol, "b c (t p1) (h p2) (w p3) -> b (t h w) (p1 p2 p3 c)", p1=p, p2=p, p3=p)


def _unpatchify(tokens, grid_dims, pad, channels, p):
    t, h, w = (v + q for v, q in zip(grid_dims, pad))
    vol = rearrange(tokens[..., : channels * p**3], "b (t h w) (p1 p2 p3 c) -> b c (t p1) (h p2) (w p3)",
                    t=t // p, h=h // p, w=w // p, p1=p, p2=p, p3=p, c=channels)
    return vol[:, :, : grid_dims[0], : grid_dims[1], : grid_dims[2]]


def pack_latents(z_s: torch.Tensor, z_d: torch.Tensor, stats: NormStats, patch: int = 2,
                 split: int | None = None, projection: str = "identity") -> TokenSequence:
    """Batched z_S (B, n_q, d_S, h_S, w_S) and z_D (B, f, d_D, L) -> tokens (B, L_S + L_D, token_dim)."""
    if z_s.dim() != 5 or z_d.dim() != 4 or z_s.shape[0] != z_d.shape[0]:
        raise ShapeError(f"pack expects batched z_S (5-D) and z_D (4-D), got {tuple(z_s.shape)}, {tuple(z_d.shape)}")
    d_s, d_d = z_s.shape[2], z_d.shape[2]
    if len(stats.s_mean) != d_s or len(stats.d_mean) != d_d:
        raise StatsError("stats channel counts do not match the latents")
    split = z_d.shape[-1] // 2 if split is None else split
    layout = make_layout(tuple(z_s.shape[1:]), tuple(z_d.shape[1:]), split, patch, stats.id, projection)

    m, s = stats.tensors("S", z_s.dtype)
    zs = (z_s - m.view(1, 1, -1, 1, 1)) / s.view(1, 1, -1, 1, 1)
    m, s = stats.tensors("D", z_d.dtype)
    zd = (z_d - m.view(1, 1, -1, 1)) / s.view(1, 1, -1, 1)

    tok_s = _patchify(rearrange(zs, "b n d h w -> b d n h w"), layout.s_pad, patch)
    tok_d = _patchify(rearrange(zd, "b f d l -> b d 1 f l"), layout.d_pad, patch)
    tok_s = F.pad(tok_s, (0, layout.token_dim - tok_s.shape[-1]))
    tok_d = F.pad(tok_d, (0, layout.token_dim - tok_d.shape[-1]))
    tokens = torch.cat([tok_s, tok_d], dim=1)
    proj = projection_matrix(layout.token_dim, projection, tokens.dtype)
    if proj is not None:
        tokens = tokens @ proj
    return TokenSequence(tokens, layout)


def unpack_tokens(seq: TokenSequence, stats: NormStats):
    """Inverse of :func:`pack_latents`; padding cells are discarded."""
    lay = seq.layout
    if stats.id != lay.stats_id:
        raise StatsError(f"tokens were packed with stats {lay.stats_id}, got {stats.id}")
    tokens = seq.tokens
    if tokens.dim() != 3 or tokens.shape[1] != lay.length or tokens.shape[2] != lay.token_dim:
        raise ShapeError(f"tokens {tuple(tokens.shape)} do not match layout ({lay.length}, {lay.token_dim})")
    proj = projection_matrix(lay.token_dim, lay.projection, tokens.dtype)
    if proj is not None:
        tokens = tokens @ proj.T
    n_q, d_s, h_s, w_s = lay.zs_shape
    f, d_d, length = lay.zd_shape
    p = lay.patch
    vol_s = _unpatchify(tokens[:, : lay.n_structure], (n_q, h_s, w_s), lay.s_pad, d_s, p)
    vol_d = _unpatchify(tokens[:, lay.n_structure:], (1, f, length), lay.d_pad, d_d, p)
    zs = rearrange(vol_s, "b d n h w -> b n d h w")
    zd = rearrange(vol_d, "b d 1 f l -> b f d l")
    m, s = stats.tensors("S", zs.dtype)
    zs = zs * s.view(1, 1, -1, 1, 1) + m.view(1, 1, -1, 1, 1)
    m, s = stats.tensors("D", zd.dtype)
    zd = zd * s.view(1, 1, -1, 1) + m.view(1, 1, -1, 1)
    return zs, zd


# --- model -----------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    """Transformer block with adaLN-Zero conditioning."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(hidden, int(hidden * mlp_ratio))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.norm1(x), sh1, sc1))
        return x + g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), sh2, sc2))


class DiT(nn.Module):
    """x0-predicting transformer over packed latent tokens.

    Class index ``num_classes`` is the learned unconditional (null) embedding.
    """

    def __init__(self, layout: Layout, cfg: DiffusionConfig):
        super().__init__()
        self.layout, self.cfg = layout, cfg
        hid = cfg.hidden
        self.null_class = cfg.num_classes
        self.x_embed = nn.Linear(layout.token_dim, hid)
        self.pos = nn.Parameter(torch.randn(1, layout.length, hid) * 0.02)
        self.segment = nn.Embedding(2, hid)
        self.register_buffer("segment_ids", layout.segment_ids(), persistent=False)
        self.t_mlp = nn.Sequential(nn.Linear(256, hid), nn.SiLU(), nn.Linear(hid, hid))
        self.class_table = nn.Embedding(cfg.num_classes + 1, cfg.class_dim)
        nn.init.normal_(self.class_table.weight, std=0.02)
        self.class_proj = nn.Linear(cfg.class_dim, hid)
        self.blocks = nn.ModuleList(DiTBlock(hid, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.final_norm = nn.LayerNorm(hid, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(hid, 2 * hid))
        self.out = nn.Linear(hid, layout.token_dim)
        for m in (self.final_ada[1], self.out):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def class_ids(self, labels, batch: int) -> torch.Tensor:
        """Map ints / None / tensors (negative = unconditional) to table indices."""
        if labels is None:
            return torch.full((batch,), self.null_class, dtype=torch.long)
        if isinstance(labels, int):
            labels = [labels] * batch
        if not torch.is_tensor(labels):
            labels = torch.tensor([self.null_class if v is None else v for v in labels], dtype=torch.long)
        labels = labels.long()
        return torch.where(labels < 0, torch.full_like(labels, self.null_class), labels)

    def forward(self, y_t, t, labels=None):
        b = y_t.shape[0]
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(b)
        ids = self.class_ids(labels, b).to(y_t.device)
        cond = self.t_mlp(timestep_embedding(t, 256).to(y_t.dtype)) + self.class_proj(self.class_table(ids))
        x = self.x_embed(y_t) + self.pos + self.segment(self.segment_ids)
        for blk in self.blocks:
            x = blk(x, cond)
        shift, scale = self.final_ada(cond).chunk(2, dim=-1)
        return self.out(modulate(self.final_norm(x), shift, scale))


# --- training and sampling -------------------------------------------------------


@dataclass
class DiffusionCondition:
    class_id: int | None = None


def train_step(model, y0: torch.Tensor, labels, sched: DiffusionSchedule, drop_prob: float,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Noise ``y0`` at uniform random timesteps and return the x0-prediction MSE."""
    if not 0 <= drop_prob <= 1:
        raise ValueError(f"drop_prob must lie in [0, 1], got {drop_prob}")
    b = y0.shape[0]
    t = torch.randint(0, sched.T, (b,), generator=generator)
    eps = torch.randn(y0.shape, generator=generator, dtype=y0.dtype)
    y_t = forward_diffuse(y0, t, eps, sched)
    ids = model.class_ids(labels, b) if hasattr(model, "class_ids") else labels
    if drop_prob > 0 and hasattr(model, "null_class"):
        drop = torch.rand(b, generator=generator) < drop_prob
        ids = torch.where(drop, torch.full_like(ids, model.null_class), ids)
    pred = model(y_t, t, ids)
    return (pred - y0).pow(2).mean()


def cfg_predict(model, y_t, t, labels, w: float):
    """Classifier-free guided x0 prediction ``uncond + w * (cond - uncond)``."""
    cond = model(y_t, t, labels)
    uncond = model(y_t, t, None)
    return uncond + w * (cond - uncond)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps={steps} must lie in [1, T={T}]")
    return np.round(np.linspace(0, T - 1, steps)).astype(np.int64)


def ddim_step(y_t, x0_hat, t: int, t_prev: int | None, sched: DiffusionSchedule):
    """One eta=0 transition from ``t`` to ``t_prev`` (``None`` means the clean end point)."""
    if t_prev is None:
        return x0_hat
    ab_t = float(sched.alpha_bars[t])
    ab_prev = float(sched.alpha_bars[t_prev])
    eps_hat = (y_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1 - ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1 - ab_prev) * eps_hat


@torch.no_grad()
def ddim_sample(model, labels, w: float, steps: int, sched: DiffusionSchedule, seed: int,
                shape: tuple[int, ...], timesteps=None, dtype=torch.float32) -> torch.Tensor:
    """Deterministic DDIM from seeded Gaussian noise of ``shape`` (B, L, D)."""
    ts = ddim_timesteps(sched.T, steps) if timesteps is None else np.asarray(timesteps, dtype=np.int64)
    if len(ts) > sched.T or len(ts) == 0 or np.any(np.diff(ts) <= 0) or ts[0] < 0 or ts[-1] >= sched.T:
        raise ScheduleError(f"timestep subset must be strictly increasing inside [0, {sched.T})")
    gen = torch.Generator().manual_seed(seed)
    y = torch.randn(shape, generator=gen, dtype=dtype)
    order = ts[::-1]
    for k, t in enumerate(order):
        t_prev = int(order[k + 1]) if k + 1 < len(order) else None
        tt = torch.full((shape[0],), int(t), dtype=torch.long)
        x0 = cfg_predict(model, y, tt, labels, w)
        y = ddim_step(y, x0, int(t), t_prev, sched)
    return y


def fixed_eval_loss(model, y0, labels, sched: DiffusionSchedule, n_draws: int = 8, seed: int = 12345) -> float:
    """Unguided x0 MSE over a fixed set of (t, eps) draws; comparable across training."""
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_draws):
            t = torch.randint(0, sched.T, (y0.shape[0],), generator=gen)
            eps = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
            pred = model(forward_diffuse(y0, t, eps, sched), t, labels)
            total += float((pred - y0).pow(2).mean())
    return total / n_draws


def fit_dit(model: DiT, y0: torch.Tensor, labels, sched: DiffusionSchedule, steps: int, batch: int,
            lr: float, drop_prob: float, seed: int = 0, log_every: int = 0, log=None) -> list[float]:
    """Adam training loop; returns per-step losses."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))
    labels = model.class_ids(labels, y0.shape[0])
    history = []
    model.train()
    for step in range(steps):
        idx = torch.randperm(y0.shape[0], generator=gen)[:batch]
        loss = train_step(model, y0[idx], labels[idx], sched, drop_prob, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log and log_every and step % log_every == 0:
            log(f"diff step {step}: loss {history[-1]:.5f}")
    model.eval()
    return history


# --- persistence -----------------------------------------------------------------

DIT_FORMAT = "vidtwin-dit"


def save_dit(model: DiT, stats: NormStats, path) -> None:
    torch.save({
        "format": DIT_FORMAT,
        "version": 1,
        "diffusion": asdict(model.cfg),
        "layout": asdict(model.layout),
        "stats": asdict(stats),
        "state_dict": model.state_dict(),
    }, path)


def load_dit(path) -> tuple[DiT, NormStats]:
    from .config import _build
    from .errors import FormatError

    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != DIT_FORMAT or blob.get("version") != 1:
        raise FormatError(f"{path}: not a version-1 DiT checkpoint")
    lay = blob["layout"]
    for k in ("zs_shape", "zd_shape", "s_pad", "d_pad"):
        lay[k] = tuple(lay[k])
    model = DiT(Layout(**lay), _build(DiffusionConfig, blob["diffusion"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, NormStats(**blob["stats"])
