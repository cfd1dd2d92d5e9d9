"""Command-line interface.

Exit codes: 0 ok, 2 config error, 3 I/O or format error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import analysis, codec, diffusion
from .config import RunConfig, apply_overrides
from .errors import ConfigError, VidTwinError
from .model import load_checkpoint, save_checkpoint
from .train import synthetic_corpus, train_autoencoder
from .video_io import VideoClip, load_image_sequence, read_raw, synth_dataset, write_raw

log = logging.getLogger("vidtwin")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    return cfg.validate()


def _load_clip(path: str, frames: int | None = None) -> VideoClip:
    p = Path(path)
    if p.is_dir():
        if frames is None:
            raise ConfigError("--frames is required when reading an image directory")
        return load_image_sequence(p, frames)
    return read_raw(p)


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = synth_dataset(args.n, seed=args.seed, F=args.frames, H=args.height, W=args.width)
    for i, clip in enumerate(clips):
        write_raw(clip, out / f"clip_{i:04d}.vraw")
    _emit({"written": len(clips), "dir": str(out)})
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train_autoencoder(cfg, eval_every=args.eval_every)
    save_checkpoint(result.model, args.out, extra={"steps": cfg.train.steps, "config": cfg.to_dict()})
    summary = {"checkpoint": args.out, "eval_l1": result.eval_l1,
               "final_losses": result.history[-1] if result.history else {}}
    if args.history:
        Path(args.history).write_text(json.dumps(result.history))
    _emit(summary)
    return 0


def cmd_encode(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    clip = _load_clip(args.input, args.frames)
    bundle = analysis.encode_clip(model, clip)
    codec.write_bundle(bundle, args.out)
    _emit({"bundle": args.out, "bytes": codec.bundle_file_size(bundle),
           "z_S": list(bundle.z_S.shape), "z_D": list(bundle.z_D.shape)})
    return 0


def _read_bundle(model, path):
    return codec.read_bundle(path, expected_fingerprint=model.cfg.fingerprint())


def cmd_decode(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    clip = analysis.decode_bundle_clip(model, _read_bundle(model, args.bundle))
    write_raw(clip, args.out)
    _emit({"clip": args.out, "shape": list(clip.shape)})
    return 0


def cmd_reconstruct(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    clip = analysis.reconstruct_clip(model, _load_clip(args.input, args.frames))
    write_raw(clip, args.out)
    _emit({"clip": args.out, "shape": list(clip.shape)})
    return 0


def cmd_metrics(args) -> int:
    a, b = _load_clip(args.a, args.frames), _load_clip(args.b, args.frames)
    rec = codec.metrics(a.data, b.data, latent_dims=args.latent_dims)
    print(rec.to_json())
    return 0


def cmd_cross_reenact(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    # fingerprints are compared by cross_reenact, which reports a mismatch as a config error
    clip = analysis.cross_reenact(model, codec.read_bundle(args.bundle_a), codec.read_bundle(args.bundle_b))
    write_raw(clip, args.out)
    _emit({"clip": args.out, "shape": list(clip.shape)})
    return 0


def cmd_decode_branch(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    clip = analysis.decode_branch(model, _read_bundle(model, args.bundle), args.which)
    write_raw(clip, args.out)
    _emit({"clip": args.out, "which": args.which, "shape": list(clip.shape)})
    return 0


def cmd_compress_report(args) -> int:
    _emit(analysis.compress_report())
    return 0


def cmd_resource_report(args) -> int:
    if args.paper:
        zs, zd = analysis.paper_layout()
        video_dims = 3 * 16 * 224 * 224
    else:
        cfg = _load_config(args)
        zs, zd = analysis.layout_for(cfg.model)
        bb = cfg.model.backbone
        video_dims = bb.channels * bb.frames * bb.height * bb.width
    report = analysis.resource_report(zs, zd, patch=args.patch)
    magvit = next(r for r in codec.reference_rates() if r.name == "magvit-v2")
    _emit({
        "layout": {"z_S": list(zs), "z_D": list(zd)},
        "report": report.to_dict(),
        "vs_magvit_v2": analysis.baseline_comparison(zs, zd, video_dims, magvit.rate_pct, patch=args.patch),
        "flops_formula": analysis.dit_flops.__doc__.strip(),
    })
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _emit(analysis.run_ablation(cfg, args.variant))
    return 0


def cmd_diff_train(args) -> int:
    cfg = _load_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    data = synthetic_corpus(cfg, n=args.n, seed=args.data_seed)
    with torch.no_grad():
        z_s, z_d = model.encode_latents(data)
    stats = diffusion.compute_norm_stats(z_s, z_d)
    dc = cfg.diffusion
    seq = diffusion.pack_latents(z_s, z_d, stats, dc.patch, split=model.dynamics.split, projection=dc.projection)
    labels = torch.arange(args.n) % dc.num_classes
    torch.manual_seed(dc.seed)
    dit = diffusion.DiT(seq.layout, dc)
    sched = diffusion.DiffusionSchedule(dc.T, dc.beta_start, dc.beta_end)
    history = diffusion.fit_dit(dit, seq.tokens, labels, sched, args.steps, args.batch, dc.lr, dc.drop_prob, dc.seed)
    diffusion.save_dit(dit, stats, args.out)
    if args.stats:
        stats.save(args.stats)
    _emit({"dit": args.out, "stats_id": stats.id, "tokens": seq.layout.length,
           "initial_loss": history[0] if history else None, "final_loss": history[-1] if history else None})
    return 0


def cmd_diff_sample(args) -> int:
    cfg = _load_config(args)
    dc = cfg.diffusion
    model, _ = load_checkpoint(args.checkpoint)
    dit, stats = diffusion.load_dit(args.dit)
    sched = diffusion.DiffusionSchedule(dc.T, dc.beta_start, dc.beta_end)
    shape = (args.n, dit.layout.length, dit.layout.token_dim)
    labels = None if args.class_id is None else [args.class_id] * args.n
    tokens = diffusion.ddim_sample(dit, labels, args.guidance, args.steps, sched, args.seed, shape)
    z_s, z_d = diffusion.unpack_tokens(diffusion.TokenSequence(tokens, dit.layout), stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bb = model.cfg.backbone
    written = []
    with torch.no_grad():
        clips = model.decode_latents(z_s, z_d)
    for i in range(args.n):
        bundle = codec.LatentBundle(z_s[i].numpy(), z_d[i].numpy(), model.dynamics.split,
                                    model.cfg.fingerprint(), (bb.channels, bb.frames, bb.height, bb.width))
        codec.write_bundle(bundle, out / f"sample_{i:03d}.vtwn")
        write_raw(VideoClip(clips[i].numpy()), out / f"sample_{i:03d}.vraw")
        written.append(str(out / f"sample_{i:03d}.vraw"))
    _emit({"samples": written, "steps": args.steps, "guidance": args.guidance})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidtwin", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.steps=100")
        return p

    p = sub.add_parser("synth-data", help="write synthetic moving-shapes clips as VRAW files")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(func=cmd_synth_data)

    p = with_config(sub.add_parser("train", help="train the autoencoder on synthetic data"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="write per-step losses as JSON")
    p.add_argument("--eval-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("encode", cmd_encode, "clip -> VTWN bundle"),
                                 ("reconstruct", cmd_reconstruct, "clip -> reconstructed clip")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--input", required=True, help="VRAW file or image directory")
        p.add_argument("--frames", type=int)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("decode", help="VTWN bundle -> clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("metrics", help="PSNR / SSIM / compression rate as JSON")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--frames", type=int)
    p.add_argument("--latent-dims", type=int)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("cross-reenact", help="structure of A with dynamics of B")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle-a", required=True)
    p.add_argument("--bundle-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cross_reenact)

    p = sub.add_parser("decode-branch", help="decode one latent branch alone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--which", choices=("structure", "dynamics"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode_branch)

    p = sub.add_parser("compress-report", help="compression rates of our layout and the baselines")
    p.set_defaults(func=cmd_compress_report)

    p = with_config(sub.add_parser("resource-report", help="analytic DiT token/FLOPs/memory accounting"))
    p.add_argument("--paper", action="store_true", help="use the 224x224x16 paper layout")
    p.add_argument("--patch", type=int, default=2)
    p.set_defaults(func=cmd_resource_report)

    p = with_config(sub.add_parser("ablate", help="train an ablation variant and report metrics"))
    p.add_argument("--variant", choices=analysis.ABLATIONS, required=True)
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("diff-train", help="fit a DiT on packed latents of synthetic clips"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", help="also write the normalization stats JSON here")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=16)
    p.set_defaults(func=cmd_diff_train)

    p = with_config(sub.add_parser("diff-sample", help="DDIM-sample latents and decode them"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dit", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--class-id", type=int)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--guidance", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diff_sample)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VidTwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, EOFError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except (FloatingPointError, OverflowError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
