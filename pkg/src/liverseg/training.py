"""Slice-level training: schedule, minibatch loop, epoch bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import EngineError, SGD, Tensor, backward, cross_entropy_loss, no_grad
from .network import DOWNSAMPLE, Network
from .preprocess import augment_planes, nearest_array

__all__ = ["TrainConfig", "TrainingError", "EpochStats", "learning_rate",
           "train_epoch", "refresh_batch_stats"]


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or inconsistent setup)."""


@dataclass(frozen=True)
class TrainConfig:
    """Per-stage training hyperparameters.

    The schedule holds the step size fixed for the first 60% of the epochs,
    then decays a halved base rate linearly to zero over the remainder.
    """

    epochs: int
    batch_size: int = 10
    crop_size: int = 48
    lr_fixed: float = 0.0016
    lr_linear_base: float = 0.0008
    momentum: float = 0.9
    scale_range: tuple[float, float] = (0.8, 1.2)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.crop_size < DOWNSAMPLE or self.crop_size % DOWNSAMPLE:
            raise ValueError(
                f"crop_size must be a positive multiple of {DOWNSAMPLE}")
        if not (0 < self.scale_range[0] <= self.scale_range[1]):
            raise ValueError(f"bad scale range {self.scale_range}")
        if not (0 <= self.flip_prob <= 1):
            raise ValueError("flip_prob must lie in [0, 1]")

    @property
    def fixed_phase_epochs(self) -> int:
        # 60% of the budget, rounded half-up, in exact integer arithmetic
        return (6 * self.epochs + 5) // 10


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Step size for one epoch; errors outside the configured schedule."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise ValueError(
            f"epoch {epoch} outside schedule of {cfg.epochs} epochs")
    boundary = cfg.fixed_phase_epochs
    if epoch < boundary:
        return cfg.lr_fixed
    remaining = cfg.epochs - boundary
    return cfg.lr_linear_base * (1.0 - (epoch - boundary) / remaining)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int
    learning_rate: float


def _planes_of(sample) -> np.ndarray:
    planes = sample.planes
    if planes.ndim != 3:
        raise TrainingError(f"sample planes must be (C, H, W), got {planes.shape}")
    return planes


def train_epoch(net: Network, samples, optimizer: SGD, epoch: int,
                cfg: TrainConfig, target: str = "liver",
                stream: int = 0) -> EpochStats:
    """One pass over the samples: shuffle, augment, minibatch SGD.

    ``target`` picks which binary mask supervises this network.  The loss
    compares 1/8-resolution logits against the nearest-neighbour-downsampled
    mask.  ``stream`` separates the rng sequences of networks trained with
    the same config seed.
    """
    if target not in ("liver", "lesion"):
        raise TrainingError(f"target must be 'liver' or 'lesion', got {target!r}")
    if not samples:
        raise TrainingError("no training samples")
    rng = np.random.default_rng((cfg.seed, stream, epoch))
    optimizer.learning_rate = learning_rate(epoch, cfg)
    order = rng.permutation(len(samples))
    losses = []
    low = cfg.crop_size // DOWNSAMPLE
    for start in range(0, len(order), cfg.batch_size):
        chunk = order[start:start + cfg.batch_size]
        images, masks = [], []
        for idx in chunk:
            s = samples[idx]
            mask = s.liver_labels if target == "liver" else s.lesion_labels
            planes, (m,) = augment_planes(
                _planes_of(s), [mask], rng, cfg.crop_size,
                cfg.scale_range, cfg.flip_prob)
            images.append(planes)
            masks.append(m)
        x = Tensor(np.stack(images))
        y = nearest_array(np.stack(masks), low, low).astype(np.int64)
        try:
            logits = net.forward(x, "train")
            loss = cross_entropy_loss(logits, y)
        except EngineError as e:
            raise TrainingError(
                f"non-finite state at epoch {epoch}, batch {start // cfg.batch_size}"
                f" (target={target}): {e}") from e
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at epoch {epoch}, "
                f"batch {start // cfg.batch_size} (target={target})")
        optimizer.zero_grad()
        backward(loss)
        optimizer.step()
        losses.append(value)
    return EpochStats(epoch, float(np.mean(losses)), len(losses),
                      optimizer.learning_rate)


def refresh_batch_stats(net: Network, planes_list, batch_size: int = 8,
                        passes: int = 2) -> None:
    """Re-estimate BN running statistics at inference geometry.

    The minibatch loop normalizes over augmented crops, so the running
    moments it accumulates describe crop-sized activations.  Prediction
    runs on whole slices, and the mismatch compounds through every
    normalized layer.  A few forward passes over the uncropped planes in
    train mode (no gradients, no parameter updates) re-center the running
    moments on what eval mode will actually see.
    """
    if not planes_list:
        raise TrainingError("no planes to calibrate on")
    with no_grad():
        for _ in range(passes):
            for start in range(0, len(planes_list), batch_size):
                chunk = planes_list[start:start + batch_size]
                net.forward(Tensor(np.stack(chunk)), "train")
