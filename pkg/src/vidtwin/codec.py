"""Latent bundle serialization, compression-rate accounting and reconstruction metrics.

VTWN layout (all little-endian)::

    offset  size  field
    0       4     magic b"VTWN"
    4       2     version (u16, currently 1)
    6       2     reserved (u16, zero)
    8       32    config fingerprint (SHA-256)
    40      16    source shape C, F, H, W (u32 each)
    56      16    z_S shape n_q, d_S, h_S, w_S (u32 each)
    72      12    z_D shape f, d_D, w_D + h_D (u32 each)
    84      4     split point w_D (u32)
    88      4     CRC-32 of bytes [0, 88) and the payload
    92      ...   float32 payload: z_S then z_D, C order
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, IngestionError, ShapeError

MAGIC = b"VTWN"
VERSION = 1
_HEAD = struct.Struct("<4sHH32s4I4I3II")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEAD.size + _CRC.size


@dataclass
class LatentBundle:
    z_S: np.ndarray
    z_D: np.ndarray
    split: int
    config_fingerprint: bytes
    source_shape: tuple[int, int, int, int]

    def __post_init__(self):
        self.z_S = np.ascontiguousarray(self.z_S, dtype=np.float32)
        self.z_D = np.ascontiguousarray(self.z_D, dtype=np.float32)
        self.source_shape = tuple(int(v) for v in self.source_shape)
        if self.z_S.ndim != 4 or self.z_D.ndim != 3 or len(self.source_shape) != 4:
            raise ShapeError(f"bad bundle ranks: z_S {self.z_S.shape}, z_D {self.z_D.shape}")
        if not 0 < self.split < self.z_D.shape[-1]:
            raise ShapeError(f"split {self.split} outside z_D length {self.z_D.shape[-1]}")
        if len(self.config_fingerprint) != 32:
            raise ShapeError("fingerprint must be 32 bytes")

    @property
    def latent_size(self) -> int:
        return self.z_S.size + self.z_D.size


def _header(b: LatentBundle) -> bytes:
    return _HEAD.pack(
        MAGIC, VERSION, 0, b.config_fingerprint, *b.source_shape, *b.z_S.shape, *b.z_D.shape, b.split
    )


def encode_bundle(b: LatentBundle) -> bytes:
    head = _header(b)
    payload = b.z_S.astype("<f4").tobytes() + b.z_D.astype("<f4").tobytes()
    crc = zlib.crc32(payload, zlib.crc32(head))
    return head + _CRC.pack(crc) + payload


def decode_bundle(blob: bytes, expected_fingerprint: bytes | None = None) -> LatentBundle:
    if len(blob) < HEADER_SIZE:
        raise IngestionError(f"truncated bundle: {len(blob)} bytes < header {HEADER_SIZE}")
    fields = _HEAD.unpack_from(blob)
    magic, version, _, fp = fields[:4]
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    source, zs_shape, zd_shape, split = fields[4:8], fields[8:12], fields[12:15], fields[15]
    n_s, n_d = math.prod(zs_shape), math.prod(zd_shape)
    payload = blob[HEADER_SIZE:]
    if len(payload) != 4 * (n_s + n_d):
        raise IngestionError(f"bundle payload holds {len(payload)} bytes, expected {4 * (n_s + n_d)}")
    (crc,) = _CRC.unpack_from(blob, _HEAD.size)
    if zlib.crc32(payload, zlib.crc32(blob[: _HEAD.size])) != crc:
        raise FormatError("bundle checksum mismatch (corrupt header or payload)")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FormatError("bundle was produced by a different model configuration")
    z_s = np.frombuffer(payload, dtype="<f4", count=n_s).reshape(zs_shape)
    z_d = np.frombuffer(payload, dtype="<f4", offset=4 * n_s).reshape(zd_shape)
    return LatentBundle(z_s.astype(np.float32), z_d.astype(np.float32), split, fp, source)


def write_bundle(b: LatentBundle, path: str | Path) -> None:
    Path(path).write_bytes(encode_bundle(b))


def read_bundle(path: str | Path, expected_fingerprint: bytes | None = None) -> LatentBundle:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(str(exc)) from exc
    return decode_bundle(blob, expected_fingerprint)


def bundle_file_size(b: LatentBundle) -> int:
    return HEADER_SIZE + 4 * b.latent_size


# --- compression rate ------------------------------------------------------------


def compression_rate(latent_dims: int, video_dims: int) -> float:
    """Latent element count over video element count, in percent."""
    if video_dims <= 0:
        raise DomainError(f"video_dims must be positive, got {video_dims}")
    if latent_dims <= 0:
        raise DomainError(f"latent_dims must be positive, got {latent_dims}")
    return 100.0 * latent_dims / video_dims


@dataclass(frozen=True)
class RateEntry:
    name: str
    latent_dims: int
    video_dims: int

    @property
    def rate_pct(self) -> float:
        return compression_rate(self.latent_dims, self.video_dims)


def reference_rates() -> list[RateEntry]:
    """Our paper-config layout and the published baselines, as element counts."""
    video_224 = 3 * 16 * 224 * 224
    return [
        RateEntry("vidtwin", 7 * 7 * 16 * 4 + 16 * 14 * 8, video_224),
        # uniform 4x8x8 downsampling with 5 latent channels, per latent cell
        RateEntry("magvit-v2", 5, 3 * 4 * 8 * 8),
        # 2 context frames of 16x16 tokens + 14 frames of 4x4 tokens, 64-dim each
        RateEntry("ivideogpt", 2 * 16**2 * 64 + 14 * 4**2 * 64, 3 * 16 * 256**2),
        # one content frame plus a (2, h + w, f) motion latent
        RateEntry("cmd", 3 * 224 * 224 + 2 * 448 * 16, video_224),
    ]


# --- metrics ---------------------------------------------------------------------

PEAK = 2.0  # data range of [-1, 1] clips
SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03


def psnr(x_hat: np.ndarray, x: np.ndarray, peak: float = PEAK) -> float:
    """PSNR in dB; ``inf`` when the inputs are identical."""
    a, b = np.asarray(x_hat, np.float64), np.asarray(x, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def _box_mean(img: np.ndarray, k: int) -> np.ndarray:
    """Mean over every valid k x k window of the last two axes."""
    s = np.cumsum(np.cumsum(img, axis=-2), axis=-1)
    s = np.pad(s, [(0, 0)] * (img.ndim - 2) + [(1, 0), (1, 0)])
    out = s[..., k:, k:] - s[..., :-k, k:] - s[..., k:, :-k] + s[..., :-k, :-k]
    return out / (k * k)


def ssim(x_hat: np.ndarray, x: np.ndarray, window: int = SSIM_WINDOW, data_range: float = PEAK) -> float:
    """Mean SSIM over frames, channels and valid uniform windows.

    Clips are (C, F, H, W) or batched (B, C, F, H, W). Window statistics use
    population (1/N) variances.
    """
    a, b = np.asarray(x_hat, np.float64), np.asarray(x, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < window:
        raise ShapeError(f"frames smaller than the {window}x{window} window")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _box_mean(a, window), _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a**2
    var_b = _box_mean(b * b, window) - mu_b**2
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsRecord:
    psnr_db: float
    ssim: float
    compression_rate_pct: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"psnr_db": self.psnr_db, "ssim": self.ssim,
                           "compression_rate_pct": self.compression_rate_pct, **self.extra})


def metrics(x_hat: np.ndarray, x: np.ndarray, latent_dims: int | None = None, **extra) -> MetricsRecord:
    video_dims = int(np.asarray(x).size)
    rate = compression_rate(latent_dims, video_dims) if latent_dims else 100.0
    return MetricsRecord(psnr(x_hat, x), ssim(x_hat, x), rate, dict(extra))
