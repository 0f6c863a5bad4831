"""Overlap metrics and per-volume evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .volume_io import LabelVolume

__all__ = ["MetricsError", "dice", "jaccard", "evaluate", "VolumeMetrics",
           "EvalReport", "build_report"]


class MetricsError(ValueError):
    """Metric inputs are inconsistent."""


def _binary_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a != 0, b != 0


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty sets score 1."""
    a, b = _binary_pair(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def jaccard(a, b) -> float:
    """|A∩B| / |A∪B|; two empty sets score 1."""
    a, b = _binary_pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


@dataclass(frozen=True)
class VolumeMetrics:
    """The four overlap scores for one volume."""

    volume_id: str
    liver_dice: float
    lesion_dice: float
    liver_jaccard: float
    lesion_jaccard: float

    def as_row(self) -> list[float]:
        return [self.liver_dice, self.lesion_dice,
                self.liver_jaccard, self.lesion_jaccard]


def evaluate(pred, truth, volume_id: str = "volume") -> VolumeMetrics:
    """Score one predicted label volume against its truth.

    Liver metrics treat labels {1, 2} as foreground (the lesion lies inside
    the organ); lesion metrics use label 2 alone.
    """
    pred = pred.labels if isinstance(pred, LabelVolume) else np.asarray(pred)
    truth = truth.labels if isinstance(truth, LabelVolume) else np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricsError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and arr.max() > 2:
            raise MetricsError(f"{name} contains labels outside {{0, 1, 2}}")
    pl, tl = pred >= 1, truth >= 1
    pt, tt = pred == 2, truth == 2
    return VolumeMetrics(volume_id, dice(pl, tl), dice(pt, tt),
                         jaccard(pl, tl), jaccard(pt, tt))


COLUMNS = ("Liver Dice", "Lesion Dice", "Liver Jaccard", "Lesion Jaccard")


@dataclass(frozen=True)
class EvalReport:
    """Per-volume scores plus their unweighted means."""

    volumes: tuple[VolumeMetrics, ...]

    def __post_init__(self):
        if not self.volumes:
            raise MetricsError("a report needs at least one volume")

    @property
    def volume_count(self) -> int:
        return len(self.volumes)

    def mean(self) -> VolumeMetrics:
        rows = np.array([v.as_row() for v in self.volumes])
        m = rows.mean(axis=0)
        return VolumeMetrics("mean", *m.tolist())

    def to_json_dict(self) -> dict:
        keys = ("liver_dice", "lesion_dice", "liver_jaccard", "lesion_jaccard")
        mean = self.mean()
        return {
            "volume_count": self.volume_count,
            "volumes": [
                {"volume_id": v.volume_id,
                 **{k: getattr(v, k) for k in keys}}
                for v in self.volumes
            ],
            "mean": {k: getattr(mean, k) for k in keys},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def text_table(self) -> str:
        """Aligned table, one row per volume plus the mean row."""
        names = [v.volume_id for v in self.volumes] + ["mean"]
        rows = [v.as_row() for v in self.volumes] + [self.mean().as_row()]
        id_w = max(len("Volume"), max(len(n) for n in names))
        widths = [max(len(c), 8) for c in COLUMNS]
        head = "  ".join(["Volume".ljust(id_w)]
                         + [c.rjust(w) for c, w in zip(COLUMNS, widths)])
        lines = [head, "-" * len(head)]
        for name, row in zip(names, rows):
            cells = [f"{x:.4f}".rjust(w) for x, w in zip(row, widths)]
            lines.append("  ".join([name.ljust(id_w)] + cells))
        return "\n".join(lines)


def build_report(pairs) -> EvalReport:
    """Evaluate (volume_id, pred, truth) triples into one report."""
    return EvalReport(tuple(evaluate(p, t, vid) for vid, p, t in pairs))
