"""Pipelines around a trained model: bundles, cross-reenactment, branch decoding,
ablation runs and analytic resource accounting for a downstream DiT."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .codec import LatentBundle, compression_rate, metrics, reference_rates
from .config import DiffusionConfig, RunConfig
from .diffusion import DiT, make_layout, token_counts
from .errors import ConfigError
from .layers import count_parameters
from .model import VidTwin, to_batch
from .train import synthetic_corpus, train_autoencoder
from .video_io import VideoClip, dot_centroids, synth_moving_shapes

# --- bundle pipelines ------------------------------------------------------------


@torch.no_grad()
def encode_clip(model: VidTwin, clip: VideoClip) -> LatentBundle:
    model.eval()
    z_s, z_d = model.encode_latents(to_batch(clip.data))
    return LatentBundle(z_s[0].numpy(), z_d[0].numpy(), model.dynamics.split,
                        model.cfg.fingerprint(), clip.shape)


def _check_bundle(model: VidTwin, *bundles: LatentBundle) -> None:
    fp = model.cfg.fingerprint()
    for b in bundles:
        if b.config_fingerprint != fp:
            raise ConfigError("bundle fingerprint does not match the checkpoint's configuration")


@torch.no_grad()
def decode_bundle_clip(model: VidTwin, bundle: LatentBundle, use_structure=True, use_dynamics=True) -> VideoClip:
    _check_bundle(model, bundle)
    model.eval()
    x = model.decode_latents(torch.from_numpy(bundle.z_S)[None], torch.from_numpy(bundle.z_D)[None],
                             use_structure, use_dynamics)
    return VideoClip(x[0].numpy())


@torch.no_grad()
def reconstruct_clip(model: VidTwin, clip: VideoClip) -> VideoClip:
    model.eval()
    return VideoClip(model.reconstruct(to_batch(clip.data))[0].numpy(), fps=clip.fps, id=clip.id)


@torch.no_grad()
def cross_reenact(model: VidTwin, bundle_a: LatentBundle, bundle_b: LatentBundle) -> VideoClip:
    """Decode the structure latent of A fused with the dynamics latent of B."""
    _check_bundle(model, bundle_a, bundle_b)
    if bundle_a.config_fingerprint != bundle_b.config_fingerprint:
        raise ConfigError("bundles come from different configurations")
    model.eval()
    x = model.decode_latents(torch.from_numpy(bundle_a.z_S)[None], torch.from_numpy(bundle_b.z_D)[None])
    return VideoClip(x[0].numpy())


def decode_branch(model: VidTwin, bundle: LatentBundle, which: str) -> VideoClip:
    """Decode one branch alone; the other branch's fused contribution is zeroed."""
    if which not in ("structure", "dynamics"):
        raise ConfigError(f"which must be 'structure' or 'dynamics', got {which!r}")
    return decode_bundle_clip(model, bundle, use_structure=which == "structure", use_dynamics=which == "dynamics")


def _trajectory_corr(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over the row and column axes of the Pearson correlation of two (F, 2) tracks."""
    out = []
    for k in range(2):
        x, y = a[:, k] - a[:, k].mean(), b[:, k] - b[:, k].mean()
        den = math.sqrt(float((x * x).sum() * (y * y).sum()))
        out.append(float((x * y).sum()) / den if den > 0 else 0.0)
    return float(np.mean(out))


def reenactment_trial(model: VidTwin, seed_a: int, seed_b: int) -> dict:
    """Cross-reenact two synthetic clips and compare the output's dot track to both donors."""
    bb = model.cfg.backbone
    clip_a = synth_moving_shapes(seed_a, bb.frames, bb.height, bb.width)
    clip_b = synth_moving_shapes(seed_b, bb.frames, bb.height, bb.width)
    out = cross_reenact(model, encode_clip(model, clip_a), encode_clip(model, clip_b))
    track = dot_centroids(out)
    corr_b = _trajectory_corr(track, dot_centroids(clip_b))
    corr_a = _trajectory_corr(track, dot_centroids(clip_a))
    return {"seed_a": seed_a, "seed_b": seed_b, "corr_dynamics_donor": corr_b,
            "corr_structure_donor": corr_a, "dynamics_wins": corr_b > corr_a}


# --- ablations -------------------------------------------------------------------

ABLATIONS = ("single_latent", "sqf_dynamics", "conv_structure", "hidden_structure")


def ablation_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in ABLATIONS + ("full",):
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")
    out = copy.deepcopy(cfg)
    if variant == "single_latent":
        out.model.single_latent = True
    elif variant == "sqf_dynamics":
        out.model.dynamics.mode = "sqf_ablation"
    elif variant == "conv_structure":
        out.model.structure.mode = "conv_ablation"
    elif variant == "hidden_structure":
        out.model.structure.mode = "hidden_ablation"
    return out.validate()


def latent_size(model: VidTwin) -> int:
    if model.cfg.single_latent:
        return math.prod(model.single.latent_shape)
    return math.prod(model.structure.latent_shape) + math.prod(model.dynamics.latent_shape)


@torch.no_grad()
def evaluate(model: VidTwin, data: torch.Tensor, **extra) -> dict:
    model.eval()
    x_hat = torch.cat([model.reconstruct(data[i : i + 8]) for i in range(0, len(data), 8)])
    per_clip = latent_size(model)
    rec = metrics(x_hat.numpy(), data.numpy(), latent_dims=per_clip * len(data), **extra)
    return {"psnr_db": rec.psnr_db, "ssim": rec.ssim, "compression_rate_pct": rec.compression_rate_pct, **rec.extra}


def run_ablation(cfg: RunConfig, variant: str, n_eval: int = 8) -> dict:
    """Train the variant on the synthetic corpus and report the shared metrics schema."""
    vcfg = ablation_config(cfg, variant)
    result = train_autoencoder(vcfg)
    eval_data = synthetic_corpus(vcfg, n=n_eval, seed=vcfg.train.seed + 10_000)
    return evaluate(result.model, eval_data, variant=variant, steps=vcfg.train.steps,
                    latent_elements=latent_size(result.model),
                    param_count=count_parameters(result.model))


# --- resource accounting ---------------------------------------------------------


@dataclass
class ResourceReport:
    token_count: int
    flops_per_forward: int
    param_count: int
    est_train_mem_bytes: int
    structure_tokens: int = 0
    dynamics_tokens: int = 0
    token_dim: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def pseudo_dit_config(**overrides) -> DiffusionConfig:
    """The uniform DiT used for resource comparison: 6 layers, 8 heads, hidden 512, FFN 2048."""
    base = dict(layers=6, heads=8, hidden=512, mlp_ratio=4.0)
    base.update(overrides)
    return DiffusionConfig(**base)


def dit_flops(tokens: int, token_dim: int, dit: DiffusionConfig) -> int:
    """Forward FLOPs (2 per multiply-add) for one sample.

    Per layer: QKV and output projections ``8 L d^2``, scores and weighted
    sum ``4 L^2 d``, MLP ``4 L d ffn``, adaLN modulation ``12 d^2``. Plus the
    token embedding/unembedding and the conditioning MLPs.
    """
    L, d = tokens, dit.hidden
    ffn = int(d * dit.mlp_ratio)
    per_layer = 8 * L * d * d + 4 * L * L * d + 4 * L * d * ffn + 12 * d * d
    io = 2 * L * token_dim * d * 2 + 4 * d * d
    cond = 2 * (256 * d + d * d) + 2 * dit.class_dim * d
    return dit.layers * per_layer + io + cond


def dit_train_memory(params: int, tokens: int, dit: DiffusionConfig) -> int:
    """Bytes for fp32 weights, grads and two Adam moments plus stored activations."""
    L, d = tokens, dit.hidden
    ffn = int(d * dit.mlp_ratio)
    activations = dit.layers * (L * (10 * d + 2 * ffn) + 2 * dit.heads * L * L)
    return 4 * (4 * params + activations)


def resource_report(zs_shape, zd_shape, dit: DiffusionConfig | None = None, patch: int = 2,
                    d_diff: int | None = None) -> ResourceReport:
    """Analytic cost of a DiT over the packed latent layout."""
    dit = dit or pseudo_dit_config()
    layout = make_layout(zs_shape, zd_shape, zd_shape[-1] // 2, patch)
    if d_diff is not None:
        layout.token_dim = d_diff
    with torch.device("meta"):
        params = count_parameters(DiT(layout, dit))
    n_s, n_d = layout.n_structure, layout.n_dynamics
    L = n_s + n_d
    return ResourceReport(L, dit_flops(L, layout.token_dim, dit), params,
                          dit_train_memory(params, L, dit), n_s, n_d, layout.token_dim)


def uniform_latent_report(latent_shape, dit: DiffusionConfig | None = None, patch: int = 2,
                          tokens: int | None = None) -> ResourceReport:
    """Same accounting for a uniform (C, T, H, W) latent; ``tokens`` overrides the patch count."""
    dit = dit or pseudo_dit_config()
    c, t, h, w = latent_shape
    L = tokens if tokens is not None else math.prod(math.ceil(v / patch) for v in (t, h, w))
    token_dim = c * patch**3
    layout = make_layout((1, 1, 1, 1), (1, 1, 2), 1, 1)
    layout.n_structure, layout.n_dynamics, layout.token_dim = L, 0, token_dim
    with torch.device("meta"):
        params = count_parameters(DiT(layout, dit))
    return ResourceReport(L, dit_flops(L, token_dim, dit), params, dit_train_memory(params, L, dit), L, 0, token_dim)


def baseline_comparison(zs_shape, zd_shape, video_dims: int, baseline_rate_pct: float,
                        baseline_latent_shape=None, patch: int = 2, dit: DiffusionConfig | None = None) -> dict:
    """Compare our packed layout to a uniform latent at ``baseline_rate_pct``.

    The baseline's tokens carry the same number of latent elements per token
    as ours, so the token ratio equals the latent-size ratio. When the
    baseline's literal latent shape is given, its plain cubic-patch token
    count is reported too.
    """
    ours = resource_report(zs_shape, zd_shape, dit, patch)
    ours_elems = math.prod(zs_shape) + math.prod(zd_shape)
    load = ours_elems / ours.token_count
    base_elems = baseline_rate_pct / 100.0 * video_dims
    base_tokens = math.ceil(base_elems / load)
    base = uniform_latent_report((max(1, round(load / patch**3)), 1, 1, 1), dit, patch, tokens=base_tokens)
    out = {
        "ours": ours.to_dict(),
        "baseline": base.to_dict(),
        "ours_rate_pct": compression_rate(ours_elems, video_dims),
        "baseline_rate_pct": baseline_rate_pct,
        "elements_per_token": load,
        "token_ratio": base_tokens / ours.token_count,
        "flops_ratio": base.flops_per_forward / ours.flops_per_forward,
        "memory_ratio": base.est_train_mem_bytes / ours.est_train_mem_bytes,
    }
    if baseline_latent_shape is not None:
        c, t, h, w = baseline_latent_shape
        out["baseline_cubic_patch_tokens"] = math.prod(math.ceil(v / patch) for v in (t, h, w))
    return out


def compress_report() -> list[dict]:
    return [{"name": r.name, "latent_dims": r.latent_dims, "video_dims": r.video_dims,
             "compression_rate_pct": r.rate_pct} for r in reference_rates()]


def paper_layout() -> tuple[tuple[int, ...], tuple[int, ...]]:
    return (16, 4, 7, 7), (16, 8, 14)


def layout_for(model_cfg) -> tuple[tuple[int, ...], tuple[int, ...]]:
    bb, s, d = model_cfg.backbone, model_cfg.structure, model_cfg.dynamics
    f, h, w = bb.grid
    zs = (s.n_q, s.d_S, h // 2**s.n_down, w // 2**s.n_down)
    zd = (f, d.d_D, h // 2**d.n_down + w // 2**d.n_down)
    return zs, zd


def check_token_consistency(model_cfg, patch: int) -> bool:
    zs, zd = layout_for(model_cfg)
    return sum(token_counts(zs, zd, patch)) == resource_report(zs, zd, patch=patch).token_count
