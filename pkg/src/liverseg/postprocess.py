"""Slice-level hole filling and assembly of the final 3-value label map."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import binary_fill_holes

__all__ = ["PostprocessError", "HOLE_CONNECTIVITY", "fill_holes_slice",
           "finalize_labels"]


class PostprocessError(RuntimeError):
    """Post-processing received inconsistent inputs."""


# Background is flood-filled from the border through edge-adjacent pixels
# only; diagonal gaps therefore seal a hole.
HOLE_CONNECTIVITY = 4

_CROSS = np.array([[0, 1, 0],
                   [1, 1, 1],
                   [0, 1, 0]], dtype=bool)


def fill_holes_slice(mask: np.ndarray) -> np.ndarray:
    """Turn enclosed background into foreground; foreground is never removed.

    A background region is a hole when no 4-connected path links it to the
    image border.  Idempotent by construction.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise PostprocessError(f"expected a 2D mask, got shape {mask.shape}")
    binary = mask != 0
    if binary.size == 0:
        return np.zeros_like(binary, dtype=np.uint8)
    return binary_fill_holes(binary, structure=_CROSS).astype(np.uint8)


def finalize_labels(liver_map, lesion_map, liver_threshold: float = 0.5,
                    lesion_threshold: float = 0.5) -> np.ndarray:
    """Threshold both maps, fill holes, and assemble {0,1,2} labels.

    The organ-level mask (liver or lesion) and the lesion mask are
    hole-filled independently before assembly; lesion wins wherever both
    claims hold.  Lesions are deliberately not clipped to the liver mask.
    """
    liver = np.asarray(getattr(liver_map, "values", liver_map), dtype=np.float64)
    lesion = np.asarray(getattr(lesion_map, "values", lesion_map), dtype=np.float64)
    if liver.shape != lesion.shape:
        raise PostprocessError(
            f"map extents differ: {liver.shape} vs {lesion.shape}")
    if liver.ndim != 2:
        raise PostprocessError(f"expected 2D maps, got shape {liver.shape}")
    lesion_mask = lesion >= lesion_threshold
    organ_mask = (liver >= liver_threshold) | lesion_mask
    organ_mask = fill_holes_slice(organ_mask)
    lesion_mask = fill_holes_slice(lesion_mask)
    labels = np.zeros(liver.shape, dtype=np.uint8)
    labels[organ_mask != 0] = 1
    labels[lesion_mask != 0] = 2
    return labels
