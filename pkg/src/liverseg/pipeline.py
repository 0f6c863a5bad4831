"""End-to-end orchestration: phantom data, training, masks, reports.

Every function takes a RunConfig and is deterministic given (config, seed).
On-disk layout:

    data_dir/train/vol000.ct            int16 HU volume
    data_dir/train/vol000.labels.ct     uint8 truth labels
    data_dir/val/...                    same scheme
    checkpoint_dir/<role>.lsn           one checkpoint per cascade network
    output_dir/masks/vol000.ct          uint8 predicted labels
    output_dir/report.json|report.txt   evaluation outputs
    output_dir/overlays/*.png           slice renderings
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .cascade import (CascadeConfig, CascadeModel, cascade_predict,
                      load_model, save_model, train_cascade)
from .config import RunConfig
from .metrics import EvalReport, build_report
from .multiscale import multiscale_predict
from .postprocess import finalize_labels
from .preprocess import (SliceSample, extract_slices, select_training_slices,
                         window_and_normalize)
from .volume_io import (LabelVolume, PhantomConfig, Volume, generate_phantom,
                        read_volume, write_volume)

__all__ = [
    "PipelineError", "generate_dataset", "split_stems", "load_pair",
    "split_slices", "training_slices", "preprocess_summary", "train_pipeline",
    "predict_volume", "predict_pipeline", "evaluate_pipeline", "write_overlays",
]


class PipelineError(RuntimeError):
    """A pipeline stage cannot run: missing inputs or inconsistent state."""


_SPLIT_TAGS = {"train": 0, "val": 1}


def _split_dir(cfg: RunConfig, split: str) -> Path:
    if split not in _SPLIT_TAGS:
        raise PipelineError(f"split must be one of {sorted(_SPLIT_TAGS)}, got {split!r}")
    return Path(cfg.data_dir) / split


def _child_seed(*key) -> int:
    # SeedSequence folds the key into an independent 32-bit stream seed.
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def generate_dataset(cfg: RunConfig) -> dict:
    """Write train/val phantom volumes plus labels; returns the manifest."""
    manifest = {}
    for split, count in (("train", cfg.train_volumes), ("val", cfg.val_volumes)):
        d = _split_dir(cfg, split)
        d.mkdir(parents=True, exist_ok=True)
        tag = _SPLIT_TAGS[split]
        stems = []
        for i in range(count):
            pc = PhantomConfig(seed=_child_seed(cfg.seed, tag, i),
                               shape=cfg.volume_shape)
            vol, labels = generate_phantom(pc)
            stem = f"vol{i:03d}"
            write_volume(vol, d / f"{stem}.ct")
            write_volume(labels, d / f"{stem}.labels.ct")
            stems.append(stem)
        manifest[split] = stems
    return manifest


def split_stems(cfg: RunConfig, split: str) -> list[str]:
    """Volume stems present in a split directory, sorted."""
    d = _split_dir(cfg, split)
    if not d.is_dir():
        raise PipelineError(f"no {split} data at {d}; run the phantom stage first")
    stems = sorted(p.name[:-3] for p in d.glob("*.ct")
                   if not p.name.endswith(".labels.ct"))
    if not stems:
        raise PipelineError(f"{d} holds no volumes")
    return stems


def load_pair(cfg: RunConfig, split: str, stem: str):
    """(HU volume, truth labels) for one stem."""
    d = _split_dir(cfg, split)
    vol = read_volume(d / f"{stem}.ct")
    labels = read_volume(d / f"{stem}.labels.ct")
    if not isinstance(vol, Volume) or not isinstance(labels, LabelVolume):
        raise PipelineError(f"{stem}: image/label files have swapped dtypes")
    return vol, labels


def split_slices(cfg: RunConfig, split: str) -> list[SliceSample]:
    """All slices of a split, windowed and paired with binary masks."""
    out: list[SliceSample] = []
    for stem in split_stems(cfg, split):
        vol, labels = load_pair(cfg, split, stem)
        image = window_and_normalize(vol, cfg.window)
        out.extend(extract_slices(image, labels, stem))
    return out


def training_slices(cfg: RunConfig) -> list[SliceSample]:
    return select_training_slices(split_slices(cfg, "train"),
                                  cfg.slice_budget, cfg.seed)


def preprocess_summary(cfg: RunConfig) -> dict:
    """Slice inventory per split plus the selected training set."""
    summary: dict = {"window": {"lo": cfg.window.lo, "hi": cfg.window.hi},
                     "slice_budget": cfg.slice_budget, "splits": {}}
    for split in ("train", "val"):
        slices = split_slices(cfg, split)
        lesion = sum(1 for s in slices if s.lesion_labels.any())
        organ_only = sum(1 for s in slices
                         if s.liver_labels.any() and not s.lesion_labels.any())
        empty = sum(1 for s in slices if not s.liver_labels.any())
        summary["splits"][split] = {
            "volumes": len(split_stems(cfg, split)), "slices": len(slices),
            "with_lesion": lesion, "organ_only": organ_only, "empty": empty,
        }
    selected = training_slices(cfg)
    summary["selected"] = [{"volume": s.source[0], "slice": s.source[1]}
                           for s in selected]
    return summary


def train_pipeline(cfg: RunConfig) -> CascadeModel:
    """Train the full cascade on the balanced slice set and checkpoint it."""
    samples = training_slices(cfg)
    ccfg = CascadeConfig(arch=cfg.arch(), stage1=cfg.stage_config(1),
                         stage2=cfg.stage_config(2), seed=cfg.seed)
    model = train_cascade(samples, ccfg)
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    save_model(model, cfg.checkpoint_dir)
    return model


def predict_volume(model: CascadeModel, image: np.ndarray, cfg: RunConfig,
                   multiscale: bool = True) -> np.ndarray:
    """Label every slice of a windowed volume; returns (Z, H, W) uint8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise PipelineError(f"expected a 3D image volume, got shape {image.shape}")
    planes = []
    for z in range(image.shape[0]):
        if multiscale:
            liver, lesion = multiscale_predict(model, image[z], cfg.scales)
        else:
            liver, lesion = cascade_predict(model, image[z])
        planes.append(finalize_labels(liver, lesion, cfg.liver_threshold,
                                      cfg.lesion_threshold))
    return np.stack(planes)


def predict_pipeline(cfg: RunConfig, multiscale: bool = True,
                     split: str = "val") -> list[str]:
    """Write a predicted label volume per split member; returns mask paths."""
    model = load_model(cfg.checkpoint_dir)
    mask_dir = Path(cfg.output_dir) / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem in split_stems(cfg, split):
        vol, _ = load_pair(cfg, split, stem)
        image = window_and_normalize(vol, cfg.window)
        mask = predict_volume(model, image, cfg, multiscale=multiscale)
        dest = mask_dir / f"{stem}.ct"
        write_volume(LabelVolume(mask, vol.spacing), dest)
        written.append(str(dest))
    return written


def evaluate_pipeline(cfg: RunConfig, split: str = "val") -> EvalReport:
    """Score predicted masks against truth; writes report.json and report.txt."""
    mask_dir = Path(cfg.output_dir) / "masks"
    pairs = []
    for stem in split_stems(cfg, split):
        mask_path = mask_dir / f"{stem}.ct"
        if not mask_path.exists():
            raise PipelineError(f"no predicted mask for {stem}; run predict first")
        pred = read_volume(mask_path)
        _, truth = load_pair(cfg, split, stem)
        pairs.append((stem, pred, truth))
    report = build_report(pairs)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2)
                                     + "\n")
    (out / "report.txt").write_text(report.text_table() + "\n")
    return report


_LIVER_TINT = np.array([0, 220, 0], dtype=np.float64)
_LESION_TINT = np.array([220, 0, 0], dtype=np.float64)


def _overlay_rgb(image_plane: np.ndarray, label_plane: np.ndarray) -> np.ndarray:
    """Organ boundary as a green contour, lesion area as a red fill."""
    from scipy.ndimage import binary_erosion

    rgb = np.repeat((image_plane * 255.0)[..., None], 3, axis=2)
    organ = label_plane >= 1
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    contour = organ & ~binary_erosion(organ, structure=cross)
    lesion = label_plane == 2
    rgb[lesion] = 0.5 * rgb[lesion] + 0.5 * _LESION_TINT
    rgb[contour] = _LIVER_TINT
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_overlays(cfg: RunConfig, split: str = "val",
                   stems=None) -> list[str]:
    """Render predicted masks over the windowed image, one PNG per slice."""
    from PIL import Image

    mask_dir = Path(cfg.output_dir) / "masks"
    overlay_dir = Path(cfg.output_dir) / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    stems = list(stems) if stems is not None else split_stems(cfg, split)
    written = []
    for stem in stems:
        mask_path = mask_dir / f"{stem}.ct"
        if not mask_path.exists():
            raise PipelineError(f"no predicted mask for {stem}; run predict first")
        mask = read_volume(mask_path)
        vol, _ = load_pair(cfg, split, stem)
        image = window_and_normalize(vol, cfg.window)
        if mask.labels.shape != image.shape:
            raise PipelineError(f"{stem}: mask shape {mask.labels.shape} does "
                                f"not match volume {image.shape}")
        for z in range(image.shape[0]):
            rgb = _overlay_rgb(image[z], mask.labels[z])
            dest = overlay_dir / f"{stem}_z{z:03d}.png"
            Image.fromarray(rgb).save(dest)
            written.append(str(dest))
    return written
