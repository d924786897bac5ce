"""Synthetic multi-center segmentation data.

Each center renders blurred ellipsoid "organs" with its own acquisition
profile (gain, offset, noise, blur, organ size and an optional smooth
multiplicative bias field). The default scenario has four training centers,
one of them artifact-heavy, and two test-only centers.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, StructuralError
from .numcore import Rng

log = logging.getLogger(__name__)

MAGIC = b"CLBENCH1"
DEFAULT_SHAPE = (1, 32, 32)
MAX_FILL = 0.5  # largest organ area (or volume) as a fraction of the grid


@dataclass(frozen=True)
class CenterProfile:
    center_id: str
    n_samples: int
    gain: float = 1.0
    offset: float = 0.5
    noise: float = 0.1
    bias: float = 0.0
    radius_mean: float = 8.0
    radius_std: float = 1.5
    blur: float = 1.0
    test_only: bool = False
    bias_correct: bool = False

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ConfigError(f"{self.center_id}: sample count must be positive")
        if self.noise < 0 or self.bias < 0 or self.blur < 0:
            raise ConfigError(f"{self.center_id}: noise, bias and blur must be >= 0")
        if self.bias >= 1.0:
            raise ConfigError(f"{self.center_id}: bias-field strength must be < 1")
        if self.radius_mean <= 0 or self.radius_std < 0:
            raise ConfigError(f"{self.center_id}: invalid organ size distribution")


DEFAULT_PROFILES = (
    CenterProfile("N01", 16, gain=1.0, offset=0.5, noise=0.10, radius_mean=8.0, radius_std=1.5, blur=1.0),
    CenterProfile("N02", 12, gain=0.8, offset=0.3, noise=0.25, radius_mean=6.0, radius_std=1.5, blur=1.5),
    CenterProfile("N03", 14, gain=1.0, offset=0.5, noise=0.15, bias=0.7, radius_mean=7.0,
                  radius_std=1.5, blur=1.0, bias_correct=True),
    CenterProfile("N04", 48, gain=1.2, offset=0.4, noise=0.15, radius_mean=11.0, radius_std=2.0, blur=0.8),
    CenterProfile("N05", 4, gain=1.0, offset=0.6, noise=0.20, radius_mean=9.0, radius_std=2.0,
                  blur=1.2, test_only=True),
    CenterProfile("N06", 18, gain=0.9, offset=0.5, noise=0.12, bias=0.2, radius_mean=8.0,
                  radius_std=2.0, blur=1.0, test_only=True),
)


@dataclass
class ClientDataset:
    center_id: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0

    @property
    def test_only(self) -> bool:
        return not self.train

    def samples(self) -> list:
        return list(self.train) + list(self.test)


def _spatial_axes(shape) -> tuple:
    return (1, 2) if shape[0] == 1 else (0, 1, 2)


def _ellipsoid(shape, g: np.random.Generator, profile: CenterProfile) -> np.ndarray:
    axes = _spatial_axes(shape)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    lo = 2.0
    radii = []
    base = max(lo, g.normal(profile.radius_mean, profile.radius_std))
    for ax in axes:
        r = base * g.uniform(0.75, 1.25)
        radii.append(float(np.clip(r, lo, shape[ax] / 2 - 1)))
    # keep the organ from swallowing the field of view
    extent = [shape[ax] for ax in axes]
    fill = (np.pi if len(axes) == 2 else 4.0 * np.pi / 3.0) * np.prod(radii) / np.prod(extent)
    if fill > MAX_FILL:
        radii = [r * (MAX_FILL / fill) ** (1.0 / len(axes)) for r in radii]
    centers = [shape[ax] / 2 - 0.5 + g.normal(0.0, shape[ax] / 16) for ax in axes]
    coords = [grids[ax] - c for ax, c in zip(axes, centers)]
    if len(axes) >= 2:
        # rotate in the in-plane (height, width) axes
        theta = g.uniform(0.0, np.pi)
        u, v = coords[-2], coords[-1]
        coords[-2] = np.cos(theta) * u - np.sin(theta) * v
        coords[-1] = np.sin(theta) * u + np.cos(theta) * v
    dist = sum((c / r) ** 2 for c, r in zip(coords, radii))
    return (dist <= 1.0).astype(np.uint8)


def _bias_field(shape, g: np.random.Generator, strength: float) -> np.ndarray:
    axes = _spatial_axes(shape)
    raw = g.normal(size=shape)
    sigma = [0.0] * 3
    for ax in axes:
        sigma[ax] = shape[ax] / 4
    smooth = ndimage.gaussian_filter(raw, sigma, mode="wrap")
    smooth = smooth - smooth.mean()
    peak = np.abs(smooth).max()
    if peak > 0:
        smooth = smooth / peak
    return 1.0 + strength * smooth


def render_sample(profile: CenterProfile, rng: Rng, shape=DEFAULT_SHAPE):
    g = rng.generator()
    mask = _ellipsoid(shape, g, profile)
    sigma = [0.0] * 3
    for ax in _spatial_axes(shape):
        sigma[ax] = profile.blur
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma) if profile.blur > 0 else mask.astype(np.float64)
    image = profile.offset + profile.gain * soft
    if profile.bias > 0:
        image = image * _bias_field(shape, g, profile.bias)
    if profile.noise > 0:
        image = image + profile.noise * g.normal(size=shape)
    return image, mask


def generate_center(profile: CenterProfile, rng: Rng, shape=DEFAULT_SHAPE) -> ClientDataset:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or shape[0] < 1:
        raise ConfigError(f"volume shape must be (depth, height, width), got {shape}")
    if any(shape[ax] < 8 for ax in _spatial_axes(shape)):
        raise ConfigError(f"volume shape {shape} is too small (minimum 8 per spatial dimension)")
    center_rng = rng.child("center", profile.center_id)
    samples = [render_sample(profile, center_rng.child(k), shape) for k in range(profile.n_samples)]
    if profile.test_only:
        return ClientDataset(profile.center_id, [], samples, center_rng.stream)
    return ClientDataset(profile.center_id, samples, [], center_rng.stream)


def generate_scenario(profiles: Sequence[CenterProfile] = DEFAULT_PROFILES, seed: int = 0,
                      shape=DEFAULT_SHAPE) -> list[ClientDataset]:
    rng = Rng(seed)
    return [generate_center(p, rng, shape) for p in profiles]


@dataclass(frozen=True)
class PreprocessSpec:
    target_shape: tuple = DEFAULT_SHAPE
    normalize: bool = True
    bias_correct: bool = False
    bias_kernel: int = 15


def _crop_or_pad(arr: np.ndarray, target) -> tuple[np.ndarray, np.ndarray]:
    """Center crop/zero-pad to ``target``; also returns the mask of original voxels."""
    out = np.zeros(target, dtype=arr.dtype)
    valid = np.zeros(target, dtype=bool)
    src, dst = [], []
    for n, t in zip(arr.shape, target):
        if n >= t:
            start = (n - t) // 2
            src.append(slice(start, start + t))
            dst.append(slice(0, t))
        else:
            start = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(start, start + n))
    out[tuple(dst)] = arr[tuple(src)]
    valid[tuple(dst)] = True
    return out, valid


def correct_bias(image: np.ndarray, kernel: int = 15) -> np.ndarray:
    """Divide out low-frequency intensity drift estimated by a large box filter."""
    size = [1 if image.shape[0] == 1 and ax == 0 else kernel for ax in range(3)]
    smooth = ndimage.uniform_filter(image, size=size, mode="reflect")
    floor = max(1e-6 * float(np.abs(smooth).max()), 1e-12)
    return image / np.maximum(smooth, floor)


def flip(volume: np.ndarray, axis: int = 2) -> np.ndarray:
    return np.flip(volume, axis=axis).copy()


def preprocess(sample, spec: PreprocessSpec = PreprocessSpec(), rng: Rng | None = None):
    """Bias correction, crop/pad, z-score and an optional random flip (pass ``rng`` for training)."""
    image, mask = sample
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.uint8)
    if image.shape != mask.shape:
        raise StructuralError(f"image {image.shape} and mask {mask.shape} differ in shape")
    if spec.bias_correct:
        image = correct_bias(image, spec.bias_kernel)
    image, valid = _crop_or_pad(image, tuple(spec.target_shape))
    mask, _ = _crop_or_pad(mask, tuple(spec.target_shape))
    if spec.normalize:
        vals = image[valid]
        mean, std = float(vals.mean()), float(vals.std())
        if std == 0.0:
            log.warning("flat image during normalization; using std=1")
            std = 1.0
        image = np.where(valid, (image - mean) / std, 0.0)
    if rng is not None and rng.generator().random() < 0.5:
        image, mask = flip(image), flip(mask)
    return image, mask


# --- persistence -----------------------------------------------------------

def _header_text(ds: ClientDataset, shape) -> bytes:
    lines = [
        f"center_id={ds.center_id}",
        f"n_train={len(ds.train)}",
        f"n_test={len(ds.test)}",
        "shape=" + ",".join(str(s) for s in shape),
        "image_dtype=f64",
        "mask_dtype=u8",
        f"seed={ds.seed}",
    ]
    return ("\n".join(lines) + "\n\n").encode("ascii")


def dataset_bytes(ds: ClientDataset) -> bytes:
    samples = ds.samples()
    shape = tuple(np.asarray(samples[0][0]).shape) if samples else DEFAULT_SHAPE
    payload = bytearray()
    for image, mask in samples:
        image = np.asarray(image)
        if image.shape != shape or np.asarray(mask).shape != shape:
            raise StructuralError("all samples in a dataset file must share one shape")
        payload += np.ascontiguousarray(image, dtype="<f8").tobytes()
        payload += np.ascontiguousarray(mask, dtype=np.uint8).tobytes()
    return MAGIC + _header_text(ds, shape) + bytes(payload) + struct.pack("<I", zlib.crc32(payload))


def save_dataset(ds: ClientDataset, path) -> int:
    """Write one center to ``path``; returns the payload CRC32."""
    blob = dataset_bytes(ds)
    Path(path).write_bytes(blob)
    return struct.unpack("<I", blob[-4:])[0]


def parse_dataset(blob: bytes) -> ClientDataset:
    if len(blob) < len(MAGIC):
        raise FormatError("file too short for magic", 0)
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic", 0)
    end = blob.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise FormatError("unterminated header", len(MAGIC))
    header = {}
    pos = len(MAGIC)
    for line in blob[len(MAGIC): end].decode("ascii", errors="replace").split("\n"):
        if "=" not in line:
            raise FormatError(f"malformed header line {line!r}", pos)
        k, v = line.split("=", 1)
        header[k] = v
        pos += len(line) + 1
    try:
        center_id = header["center_id"]
        n_train, n_test = int(header["n_train"]), int(header["n_test"])
        shape = tuple(int(s) for s in header["shape"].split(","))
        seed = int(header["seed"])
        if header["image_dtype"] != "f64" or header["mask_dtype"] != "u8":
            raise ValueError("unsupported dtype")
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid header: {exc}", len(MAGIC)) from None
    start = end + 2
    nvox = int(np.prod(shape))
    per_sample = nvox * 9
    expected = start + (n_train + n_test) * per_sample + 4
    if len(blob) != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, found {len(blob)}",
                          min(len(blob), expected))
    payload = blob[start:-4]
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != stored:
        raise FormatError("checksum mismatch", len(blob) - 4)
    samples = []
    off = 0
    for _ in range(n_train + n_test):
        image = np.frombuffer(payload, dtype="<f8", count=nvox, offset=off).reshape(shape).astype(np.float64)
        off += nvox * 8
        mask = np.frombuffer(payload, dtype=np.uint8, count=nvox, offset=off).reshape(shape).copy()
        off += nvox
        samples.append((image, mask))
    return ClientDataset(center_id, samples[:n_train], samples[n_train:], seed)


def load_dataset(path) -> ClientDataset:
    return parse_dataset(Path(path).read_bytes())


def write_pgm(mask, path) -> None:
    """Binary PGM (P5, maxval 1); depth slices are stacked vertically."""
    m = np.asarray(mask, dtype=np.uint8)
    if m.ndim == 3:
        m = m.reshape(m.shape[0] * m.shape[1], m.shape[2])
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n1\n".encode("ascii") + np.ascontiguousarray(m).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h = int(parts[1]), int(parts[2])
    data = blob[len(blob) - w * h:]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
