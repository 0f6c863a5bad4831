"""HU windowing, slice extraction, balanced sampling, and augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine.ops import bilinear_array
from .volume_io import LabelVolume, Volume

__all__ = [
    "WindowSpec", "SliceSample", "window_and_normalize", "extract_slices",
    "select_training_slices", "augment", "augment_planes", "nearest_array",
]


@dataclass(frozen=True)
class WindowSpec:
    """Intensity window mapped affinely onto [0, 1]."""

    lo: float = -160.0
    hi: float = 240.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window needs lo < hi, got [{self.lo}, {self.hi}]")


@dataclass
class SliceSample:
    """One axial slice: normalized image plus binary organ/lesion masks."""

    image: np.ndarray          # (H, W) float64 in [0, 1]
    liver_labels: np.ndarray   # (H, W) uint8, 1 where organ or lesion
    lesion_labels: np.ndarray  # (H, W) uint8, 1 where lesion
    source: tuple[str, int]    # (volume id, slice index)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.liver_labels = np.asarray(self.liver_labels, dtype=np.uint8)
        self.lesion_labels = np.asarray(self.lesion_labels, dtype=np.uint8)
        if not (self.image.shape == self.liver_labels.shape == self.lesion_labels.shape):
            raise ValueError("image and label planes must share one shape")
        if self.image.ndim != 2:
            raise ValueError(f"slices are 2D, got shape {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        for lab in (self.liver_labels, self.lesion_labels):
            if lab.size and lab.max() > 1:
                raise ValueError("label planes must be binary")

    @property
    def planes(self) -> np.ndarray:
        """(1, H, W) network-input view; multi-channel variants mirror this."""
        return self.image[None]

    @property
    def has_lesion(self) -> bool:
        return bool(self.lesion_labels.any())

    @property
    def has_liver(self) -> bool:
        return bool(self.liver_labels.any())


def window_and_normalize(vol: Volume | np.ndarray,
                         window: WindowSpec = WindowSpec()) -> np.ndarray:
    """Clamp to the window and map [lo, hi] -> [0, 1]."""
    hu = vol.voxels if isinstance(vol, Volume) else np.asarray(vol)
    hu = hu.astype(np.float64)
    return (np.clip(hu, window.lo, window.hi) - window.lo) / (window.hi - window.lo)


def extract_slices(image_volume: np.ndarray, labels: LabelVolume,
                   volume_id: str) -> list[SliceSample]:
    """Split a normalized volume into per-slice samples with binary masks.

    The organ mask covers labels {1, 2} (a lesion is organ tissue too); the
    lesion mask covers label 2 only.
    """
    image_volume = np.asarray(image_volume, dtype=np.float64)
    if image_volume.shape != labels.shape:
        raise ValueError(
            f"image shape {image_volume.shape} does not match labels {labels.shape}")
    liver = (labels.labels >= 1).astype(np.uint8)
    lesion = (labels.labels == 2).astype(np.uint8)
    return [
        SliceSample(image_volume[z], liver[z], lesion[z], (volume_id, z))
        for z in range(image_volume.shape[0])
    ]


def select_training_slices(samples: list[SliceSample], n: int,
                           seed: int) -> list[SliceSample]:
    """Pick a balanced training set, deterministic per seed.

    Exactly n/2 slices containing both organ and lesion, and n/2 containing
    neither; organ-only slices are excluded from training entirely.
    """
    if n <= 0 or n % 2:
        raise ValueError(f"n must be even and positive, got {n}")
    with_lesion = [s for s in samples if s.has_liver and s.has_lesion]
    empty = [s for s in samples if not s.has_liver and not s.has_lesion]
    half = n // 2
    if len(with_lesion) < half or len(empty) < half:
        raise ValueError(
            f"need {half} lesion slices and {half} empty slices, "
            f"pool has {len(with_lesion)} and {len(empty)}")
    rng = np.random.default_rng(seed)
    picked = [with_lesion[i] for i in rng.choice(len(with_lesion), half, replace=False)]
    picked += [empty[i] for i in rng.choice(len(empty), half, replace=False)]
    order = rng.permutation(n)
    return [picked[i] for i in order]


def nearest_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with the same half-pixel-center convention."""
    h, w = a.shape[-2:]
    iy = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(int), 0, h - 1)
    ix = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(int), 0, w - 1)
    return a[..., iy[:, None], ix[None, :]]


def augment_planes(planes: np.ndarray, labels: list[np.ndarray], rng,
                   crop_size: int, scale_range=(0.8, 1.2),
                   flip_prob: float = 0.5):
    """Shared transform core: scale, crop, flip, identically on all planes.

    ``planes`` is (C, H, W) float and is resized bilinearly; every array in
    ``labels`` is resized nearest-neighbour so values are copied, never
    blended.  Draw order is fixed: scale factor, crop y, crop x, flip.
    """
    planes = np.asarray(planes, dtype=np.float64)
    c, h, w = planes.shape
    s = float(rng.uniform(scale_range[0], scale_range[1]))
    nh, nw = int(round(h * s)), int(round(w * s))
    if nh < crop_size or nw < crop_size:
        raise ValueError(
            f"crop {crop_size} does not fit the scaled extent {(nh, nw)}")
    planes = bilinear_array(planes, nh, nw)
    labels = [nearest_array(np.asarray(lab), nh, nw) for lab in labels]
    oy = int(rng.integers(0, nh - crop_size + 1))
    ox = int(rng.integers(0, nw - crop_size + 1))
    planes = planes[:, oy:oy + crop_size, ox:ox + crop_size]
    labels = [lab[oy:oy + crop_size, ox:ox + crop_size] for lab in labels]
    if rng.random() < flip_prob:
        planes = planes[:, :, ::-1]
        labels = [lab[:, ::-1] for lab in labels]
    return np.ascontiguousarray(planes), [np.ascontiguousarray(l) for l in labels]


def augment(sample: SliceSample, rng, crop_size: int,
            scale_range=(0.8, 1.2), flip_prob: float = 0.5) -> SliceSample:
    """Random scale, crop, and horizontal flip of one training slice."""
    planes, (liver, lesion) = augment_planes(
        sample.planes, [sample.liver_labels, sample.lesion_labels], rng,
        crop_size, scale_range, flip_prob)
    # bilinear blending can graze the limits by an ulp; the contract is [0, 1]
    image = np.clip(planes[0], 0.0, 1.0)
    return SliceSample(image, liver, lesion, sample.source)
