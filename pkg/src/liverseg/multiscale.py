"""Multi-scale inference: predict at several resized extents, average back
at base resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cascade import CascadeModel, cascade_predict
from .engine import bilinear_array
from .network import DOWNSAMPLE, ProbabilityMap

__all__ = ["FusionError", "ScaleSet", "fuse", "multiscale_predict",
           "full_scale_set", "desk_scale_set"]


class FusionError(RuntimeError):
    """Invalid scale set or inconsistent maps."""


@dataclass(frozen=True)
class ScaleSet:
    """Base extent plus the ordered square extents inference runs at."""

    base: int
    scales: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.base < DOWNSAMPLE or self.base % DOWNSAMPLE:
            raise FusionError(
                f"base extent must be a positive multiple of {DOWNSAMPLE}")
        if not self.scales:
            raise FusionError("scale set must be non-empty")
        for s in self.scales:
            if s < DOWNSAMPLE or s % DOWNSAMPLE:
                raise FusionError(
                    f"scale {s} must be a positive multiple of {DOWNSAMPLE}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise FusionError(f"scales must strictly increase, got {self.scales}")


def full_scale_set() -> ScaleSet:
    return ScaleSet(512, (512, 544, 576, 608, 640))


def desk_scale_set(base: int = 64) -> ScaleSet:
    """Desk mirror of the full-scale set: +8 steps on a 64 base instead of
    +32 on 512, keeping every extent a multiple of 8."""
    return ScaleSet(base, tuple(base + 8 * i for i in range(5)))


def _pairwise_sum(stack: np.ndarray) -> np.ndarray:
    # balanced pairwise reduction over axis 0: fixed association order, so
    # any identical multiset of addends reduces to identical bits
    while stack.shape[0] > 1:
        half = stack.shape[0] // 2
        even = stack[: 2 * half : 2] + stack[1 : 2 * half : 2]
        stack = np.concatenate([even, stack[2 * half :]], axis=0)
    return stack[0]


def fuse(maps: list[ProbabilityMap]) -> ProbabilityMap:
    """Per-pixel arithmetic mean, bit-invariant under input permutation.

    Values at each pixel are sorted before a balanced pairwise reduction;
    reordering the list cannot change a single output bit.
    """
    if not maps:
        raise FusionError("cannot fuse an empty list of maps")
    extent = maps[0].values.shape
    kind = maps[0].kind
    for m in maps[1:]:
        if m.values.shape != extent:
            raise FusionError(
                f"map extent {m.values.shape} does not match {extent}")
        if m.kind != kind:
            raise FusionError(f"cannot fuse {m.kind} into {kind} maps")
    if len(maps) == 1:
        return ProbabilityMap(maps[0].values.copy(), kind)
    stack = np.sort(np.stack([m.values for m in maps]), axis=0)
    mean = _pairwise_sum(stack) / len(maps)
    # where every addend agrees the mean is that value, exactly; sum/n
    # would round it
    mean = np.where(stack[0] == stack[-1], stack[0], mean)
    return ProbabilityMap(np.clip(mean, 0.0, 1.0), kind)


def multiscale_predict(model: CascadeModel, plane: np.ndarray,
                       scale_set: ScaleSet, predict_fn=cascade_predict):
    """Cascade prediction fused over every extent in the scale set.

    The slice is resized to each scale, predicted, and both maps are
    resized back to the base extent before averaging.  A single-scale set
    at the slice's own extent reproduces cascade_predict bit-for-bit.
    ``predict_fn(model, plane)`` is the per-scale predictor seam; tests
    substitute stubs for it.

    Returns (liver map, lesion map) at base resolution.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise FusionError(f"expected a 2D slice, got shape {plane.shape}")
    if plane.shape != (scale_set.base, scale_set.base):
        raise FusionError(
            f"slice extent {plane.shape} does not match base {scale_set.base}")
    base = scale_set.base
    livers, lesions = [], []
    for s in scale_set.scales:
        scaled = bilinear_array(plane, s, s)
        liver, lesion = predict_fn(model, scaled)
        livers.append(ProbabilityMap(
            np.clip(bilinear_array(liver.values, base, base), 0.0, 1.0),
            "liver"))
        lesions.append(ProbabilityMap(
            np.clip(bilinear_array(lesion.values, base, base), 0.0, 1.0),
            "lesion"))
    return fuse(livers), fuse(lesions)
