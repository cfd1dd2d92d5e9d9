"""Clip ingestion, normalization, raw clip files and the synthetic moving-shapes fixture."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import IngestionError, RangeError, ShapeError

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")
RAW_MAGIC = b"VRAW"
_RAW_HEADER = struct.Struct("<4s4I")


@dataclass
class VideoClip:
    """A (C, F, H, W) float32 clip with values in [-1, 1]."""

    data: np.ndarray
    fps: float = 8.0
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"clip must have shape (3, F, H, W), got {self.data.shape}")
        if self.fps <= 0:
            raise ShapeError(f"fps must be positive, got {self.fps}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def validate_range(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise RangeError(f"clip {self.id!r} has non-finite values")
        if self.data.min() < -1.0 or self.data.max() > 1.0:
            raise RangeError(
                f"clip {self.id!r} leaves [-1, 1]: min={self.data.min()}, max={self.data.max()}"
            )


@dataclass
class ClipBatch:
    clips: list[VideoClip]
    seed: int = 0

    def __post_init__(self):
        if not self.clips:
            raise ShapeError("a batch needs at least one clip")
        shapes = {c.shape for c in self.clips}
        if len(shapes) != 1:
            raise ShapeError(f"batch clips have mixed shapes: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self) -> Iterator[VideoClip]:
        return iter(self.clips)

    def stack(self) -> np.ndarray:
        """Return a (B, C, F, H, W) array."""
        return np.stack([c.data for c in self.clips])


def normalize(frames: np.ndarray) -> np.ndarray:
    """Map 8-bit values [0, 255] onto [-1, 1]."""
    return np.asarray(frames, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def denormalize(clip: VideoClip | np.ndarray) -> np.ndarray:
    """Convert a clip to uint8 frames of shape (F, H, W, C).

    Uses round-half-up: ``floor((v + 1) * 127.5 + 0.5)``, so 0.0 maps to 128.
    """
    data = clip.data if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float32)
    if not np.all(np.isfinite(data)) or data.min() < -1.0 or data.max() > 1.0:
        raise RangeError("denormalize expects finite values inside [-1, 1]")
    scaled = np.floor((data.astype(np.float64) + 1.0) * 127.5 + 0.5)
    out = np.clip(scaled, 0, 255).astype(np.uint8)
    return np.ascontiguousarray(out.transpose(1, 2, 3, 0))


def load_image_sequence(dir_path: str | Path, frames: int, fps: float = 8.0) -> VideoClip:
    """Read the first ``frames`` images (lexicographic order) of a directory as a clip."""
    from PIL import Image

    path = Path(dir_path)
    if not path.is_dir():
        raise IngestionError(f"{path} is not a directory")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) < frames:
        raise IngestionError(f"{path} holds {len(files)} images, {frames} requested")
    arrays = []
    for f in files[:frames]:
        with Image.open(f) as im:
            arrays.append(np.asarray(im.convert("RGB")))
    sizes = {a.shape for a in arrays}
    if len(sizes) != 1:
        raise ShapeError(f"mixed frame resolutions in {path}: {sorted(sizes)}")
    stacked = np.stack(arrays)  # F, H, W, C
    return VideoClip(normalize(stacked.transpose(3, 0, 1, 2)), fps=fps, id=path.name)


def save_image_sequence(clip: VideoClip, dir_path: str | Path, prefix: str = "frame") -> list[Path]:
    from PIL import Image

    out_dir = Path(dir_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(denormalize(clip)):
        p = out_dir / f"{prefix}_{i:04d}.png"
        Image.fromarray(frame).save(p)
        paths.append(p)
    return paths


def write_raw(clip: VideoClip, path: str | Path) -> None:
    """Write the VRAW format: magic, u32 C,F,H,W (little-endian), float32 LE payload."""
    c, f, h, w = clip.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, c, f, h, w))
        fh.write(clip.data.astype("<f4").tobytes(order="C"))


def read_raw(path: str | Path, fps: float = 8.0) -> VideoClip:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(str(exc)) from exc
    if len(blob) < _RAW_HEADER.size:
        raise IngestionError(f"{path}: truncated VRAW header")
    magic, c, f, h, w = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise IngestionError(f"{path}: bad magic {magic!r}")
    n = c * f * h * w
    payload = blob[_RAW_HEADER.size:]
    if len(payload) != 4 * n:
        raise IngestionError(f"{path}: payload holds {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, f, h, w).astype(np.float32)
    return VideoClip(data, fps=fps, id=Path(path).stem)


# --- synthetic fixture -----------------------------------------------------------

SHAPE_CHANNEL = 2  # large slow square lives in blue
DOT_CHANNEL = 0  # small fast dot lives in red
BACKGROUND_CHANNEL = 1  # static gradient lives in green
EMPTY_LEVEL = -0.6


def _bounce(start: float, velocity: float, lo: float, hi: float, steps: int) -> np.ndarray:
    """Positions of a point moving at constant speed, reflecting off [lo, hi]."""
    span = hi - lo
    if span <= 0:
        return np.full(steps, lo)
    raw = start - lo + velocity * np.arange(steps)
    folded = np.mod(raw, 2 * span)
    return lo + np.where(folded > span, 2 * span - folded, folded)


def synth_trajectories(
    seed: int, F: int, H: int, W: int, slow_speed: float, fast_speed: float
) -> dict[str, np.ndarray]:
    """Ground-truth (F, 2) row/col centres of the slow shape and the fast dot."""
    rng = np.random.default_rng(seed)
    shape_half = max(1.0, min(H, W) / 5)
    dot_r = max(1.0, min(H, W) / 6)
    traj = {}
    for name, half, speed in (("shape", shape_half, slow_speed), ("dot", dot_r, fast_speed)):
        angle = rng.uniform(0, 2 * math.pi)
        r0 = rng.uniform(half, H - 1 - half)
        c0 = rng.uniform(half, W - 1 - half)
        rows = _bounce(r0, speed * math.sin(angle), half, H - 1 - half, F)
        cols = _bounce(c0, speed * math.cos(angle), half, W - 1 - half, F)
        traj[name] = np.stack([rows, cols], axis=1)
    traj["gradient_phase"] = np.array([rng.uniform(0, 2 * math.pi)])
    traj["shape_half"] = np.array([shape_half])
    traj["dot_radius"] = np.array([dot_r])
    return traj


def synth_moving_shapes(
    seed: int,
    F: int = 8,
    H: int = 32,
    W: int = 32,
    slow_speed: float = 0.5,
    fast_speed: float = 3.0,
) -> VideoClip:
    """Render a large slowly drifting square and a small fast-bouncing dot.

    The three RGB channels are disjoint layers: red carries only the dot, green a
    static background gradient and blue only the square, so each signal can be
    tracked independently in a reconstruction.
    """
    if min(F, H, W) < 1:
        raise ShapeError(f"dimensions must be positive, got F={F}, H={H}, W={W}")
    static = slow_speed == 0 and fast_speed == 0
    if not (fast_speed > slow_speed >= 0 or static):
        raise ShapeError(f"need fast_speed > slow_speed >= 0, got {fast_speed}, {slow_speed}")
    traj = synth_trajectories(seed, F, H, W, slow_speed, fast_speed)
    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    # empty layers sit at EMPTY_LEVEL rather than -1 so a tanh decoder is not saturated there
    data = np.full((3, F, H, W), EMPTY_LEVEL, dtype=np.float64)

    phase = traj["gradient_phase"][0]
    data[BACKGROUND_CHANNEL] = -0.3 + 0.3 * np.sin(2 * math.pi * cols / W + phase) * np.cos(
        math.pi * rows / H
    )

    half = traj["shape_half"][0]
    dot_r = traj["dot_radius"][0]
    for t in range(F):
        sr, sc = traj["shape"][t]
        inside = (np.abs(rows - sr) <= half) & (np.abs(cols - sc) <= half)
        data[SHAPE_CHANNEL, t][inside] = 0.6
        dr, dc = traj["dot"][t]
        dot = (rows - dr) ** 2 + (cols - dc) ** 2 <= dot_r**2
        data[DOT_CHANNEL, t][dot] = 0.9
    return VideoClip(data.astype(np.float32), fps=8.0, id=f"synth-{seed}")


def synth_dataset(
    n: int, seed: int = 0, F: int = 8, H: int = 32, W: int = 32, **speeds
) -> list[VideoClip]:
    """``n`` synthetic clips with seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [synth_moving_shapes(int(s), F, H, W, **speeds) for s in seeds]


def dot_centroids(clip: VideoClip | np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Per-frame (row, col) centroid of the red dot layer, weighted by red intensity above ``threshold``.

    Frames with no mass above the threshold fall back to the frame's argmax.
    """
    data = clip.data if isinstance(clip, VideoClip) else np.asarray(clip)
    red = data[DOT_CHANNEL].astype(np.float64)
    _, H, W = red.shape
    rows, cols = np.mgrid[0:H, 0:W]
    out = np.empty((red.shape[0], 2))
    for t, frame in enumerate(red):
        weight = np.clip(frame - threshold, 0, None)
        total = weight.sum()
        if total <= 0:
            r, c = np.unravel_index(np.argmax(frame), frame.shape)
            out[t] = (r, c)
        else:
            out[t] = ((weight * rows).sum() / total, (weight * cols).sum() / total)
    return out


def batch_from_clips(clips: Sequence[VideoClip], seed: int = 0) -> ClipBatch:
    return ClipBatch(list(clips), seed=seed)
