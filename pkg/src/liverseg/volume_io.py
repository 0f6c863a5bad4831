"""CT-style volumes, the CTVOL1 container format, and synthetic phantoms.

A CTVOL1 file is:

    b"CTVOL1\\n"
    one JSON text line: {"shape":[d,h,w],"dtype":"i16"|"u8","spacing":[z,y,x]}
    b"\\n"-terminated, then the raw little-endian voxel payload, z-major.

``i16`` payloads are Hounsfield volumes, ``u8`` payloads are label volumes.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "HU_MIN", "HU_MAX", "FormatError", "PhantomError", "Volume",
    "LabelVolume", "PhantomConfig", "write_volume", "read_volume",
    "generate_phantom",
]

HU_MIN, HU_MAX = -2048, 4095
MAGIC = b"CTVOL1\n"

_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("<u1")}


class FormatError(ValueError):
    """Malformed CTVOL1 container."""


class PhantomError(ValueError):
    """Unsatisfiable phantom configuration."""


@dataclass
class Volume:
    """int16 Hounsfield voxels, z-major (depth, height, width)."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.int16)
        if self.voxels.ndim != 3:
            raise FormatError(f"volume must be 3D, got shape {self.voxels.shape}")
        if self.voxels.size and (self.voxels.min() < HU_MIN or self.voxels.max() > HU_MAX):
            raise FormatError(f"HU values outside [{HU_MIN}, {HU_MAX}]")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise FormatError(f"spacing must be three positive floats, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LabelVolume:
    """uint8 labels: 0 background, 1 organ, 2 lesion."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise FormatError(f"labels must be 3D, got shape {self.labels.shape}")
        if self.labels.size and self.labels.max() > 2:
            raise FormatError("labels must lie in {0, 1, 2}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise FormatError(f"spacing must be three positive floats, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


def write_volume(vol: Volume | LabelVolume, dest) -> None:
    """Write a volume to a path or binary file object."""
    if isinstance(vol, Volume):
        arr, dtype = vol.voxels, "i16"
    elif isinstance(vol, LabelVolume):
        arr, dtype = vol.labels, "u8"
    else:
        raise FormatError(f"cannot serialize {type(vol).__name__}")
    header = {"shape": list(arr.shape), "dtype": dtype,
              "spacing": list(vol.spacing)}
    blob = (MAGIC + json.dumps(header, separators=(",", ":")).encode("ascii")
            + b"\n" + arr.astype(_DTYPES[dtype]).tobytes())
    if isinstance(dest, (str, os.PathLike)):
        Path(dest).write_bytes(blob)
    else:
        dest.write(blob)


def read_volume(src) -> Volume | LabelVolume:
    """Read a CTVOL1 file; dtype selects the returned type."""
    if isinstance(src, (str, os.PathLike)):
        raw = Path(src).read_bytes()
    else:
        raw = src.read()
    if not raw.startswith(MAGIC):
        raise FormatError("bad magic: not a CTVOL1 file")
    body = raw[len(MAGIC):]
    nl = body.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line")
    try:
        header = json.loads(body[:nl].decode("ascii"))
        shape = tuple(int(s) for s in header["shape"])
        dtype = header["dtype"]
        spacing = tuple(float(s) for s in header["spacing"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise FormatError(f"malformed header: {e}") from e
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}")
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise FormatError(f"bad shape {shape}")
    payload = body[nl + 1:]
    expected = int(np.prod(shape)) * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape)
    if dtype == "i16":
        return Volume(arr, spacing)
    return LabelVolume(arr, spacing)


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and intensity model for one synthetic abdominal phantom.

    All lengths are voxel units.  The organ is an axis-aligned ellipsoid
    inside a larger soft-tissue body ellipsoid; lesions are spheres placed
    entirely inside the organ.
    """

    seed: int = 0
    shape: tuple[int, int, int] = (16, 64, 64)
    body_radii: tuple[float, float, float] = (8.0, 30.0, 30.0)
    liver_radii: tuple[float, float, float] = (6.0, 24.0, 24.0)
    lesion_count: int = 2
    # mid-slice diameter must reach the training target stride (8) or the
    # nearest-neighbour label reduction erases the lesion from supervision
    lesion_radius: tuple[float, float] = (4.0, 5.5)
    hu_background: float = -1000.0
    hu_tissue: float = 50.0
    hu_liver: float = 100.0
    hu_lesion: float = 30.0
    noise_sigma: float = 10.0
    max_tries: int = 200
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise PhantomError(f"bad shape {self.shape}")
        for radii in (self.body_radii, self.liver_radii):
            if len(radii) != 3 or any(r <= 0 for r in radii):
                raise PhantomError(f"radii must be positive, got {radii}")
        lo, hi = self.lesion_radius
        if not (0 < lo <= hi):
            raise PhantomError(f"bad lesion radius range {self.lesion_radius}")
        if self.lesion_count < 0:
            raise PhantomError("lesion_count must be >= 0")
        if self.lesion_count and hi >= min(self.liver_radii):
            raise PhantomError("largest lesion cannot fit inside the organ")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    q = (((zz - center[0]) / radii[0]) ** 2
         + ((yy - center[1]) / radii[1]) ** 2
         + ((xx - center[2]) / radii[2]) ** 2)
    return q < 1.0


def _sphere_mask(shape, center, radius) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    q = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    return q < radius ** 2


def _place_lesions(cfg: PhantomConfig, center, rng) -> list[tuple[np.ndarray, float]]:
    """Draw lesion centres uniformly inside the margin-shrunk organ ellipsoid."""
    radii = np.asarray(cfg.liver_radii)
    out = []
    for _ in range(cfg.lesion_count):
        r = rng.uniform(*cfg.lesion_radius)
        # shrink so the whole sphere stays inside:
        # |(c-c0)/R| + r/min(R) <= 1 is sufficient for containment
        shrink = 1.0 - r / float(radii.min())
        if shrink <= 0:
            raise PhantomError("lesion radius exceeds organ extent")
        for attempt in range(cfg.max_tries):
            u = rng.uniform(-1.0, 1.0, size=3)
            if (u ** 2).sum() <= 1.0:
                out.append((np.asarray(center) + u * radii * shrink, r))
                break
        else:
            raise PhantomError(
                f"no admissible lesion centre after {cfg.max_tries} tries")
    return out


def _build_phantom(cfg: PhantomConfig):
    """Noise-free HU map, labels, and the rng positioned after placement."""
    center = tuple((s - 1) / 2.0 for s in cfg.shape)
    rng = np.random.default_rng(cfg.seed)
    body = _ellipsoid_mask(cfg.shape, center, cfg.body_radii)
    liver = _ellipsoid_mask(cfg.shape, center, cfg.liver_radii)
    lesion = np.zeros(cfg.shape, dtype=bool)
    for c, r in _place_lesions(cfg, center, rng):
        lesion |= _sphere_mask(cfg.shape, c, r)
    hu = np.full(cfg.shape, cfg.hu_background)
    hu[body] = cfg.hu_tissue
    hu[liver] = cfg.hu_liver
    hu[lesion] = cfg.hu_lesion
    labels = np.zeros(cfg.shape, dtype=np.uint8)
    labels[liver] = 1
    labels[lesion] = 2
    return hu, labels, rng


def _phantom_arrays(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pre-noise view for tests: analytic HU map and matching labels."""
    hu, labels, _ = _build_phantom(cfg)
    return hu, labels


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, LabelVolume]:
    """Deterministic per seed: analytic shapes plus Gaussian HU noise."""
    hu, labels, rng = _build_phantom(cfg)
    noisy = hu + rng.normal(0.0, cfg.noise_sigma, size=cfg.shape)
    voxels = np.clip(np.rint(noisy), HU_MIN, HU_MAX).astype(np.int16)
    return Volume(voxels, cfg.spacing), LabelVolume(labels, cfg.spacing)
