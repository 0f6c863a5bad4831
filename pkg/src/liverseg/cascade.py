"""Two-stage refinement: stack stage-1 probability maps onto the image and
re-segment with 3-channel networks.

Stage 1 holds one liver and one lesion network reading the bare image.
Stage 2 holds the same pair reading (image, lesion map, liver map) and is
trained on maps produced by the frozen stage 1.  Checkpoints are one file
per network: a magic line, a JSON manifest, then raw little-endian float64
payloads in manifest order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine import SGD, Tensor
from .network import (
    ArchSpec, Network, ProbabilityMap, build_network, predict_prob,
)
from .training import TrainConfig, refresh_batch_stats, train_epoch

__all__ = [
    "CascadeError", "CheckpointError", "CascadeConfig", "CascadeModel",
    "CascadeSample", "stack_cascade_input", "stacked_samples",
    "train_cascade", "cascade_predict", "save_network", "load_network",
    "save_model", "load_model", "NETWORK_MAGIC", "NETWORK_ROLES",
]

NETWORK_MAGIC = b"LSNET1\n"
NETWORK_ROLES = ("stage1_liver", "stage1_lesion", "stage2_liver", "stage2_lesion")


class CascadeError(RuntimeError):
    """Cascade assembly or prediction failed."""


class CheckpointError(RuntimeError):
    """Network checkpoint file is malformed or inconsistent."""


@dataclass
class CascadeModel:
    """Four networks: two per stage, one per structure."""

    stage1_liver: Network
    stage1_lesion: Network
    stage2_liver: Network
    stage2_lesion: Network

    def __post_init__(self):
        for name in ("stage1_liver", "stage1_lesion"):
            if getattr(self, name).spec.input_channels != 1:
                raise CascadeError(f"{name} must read 1 channel")
        for name in ("stage2_liver", "stage2_lesion"):
            if getattr(self, name).spec.input_channels != 3:
                raise CascadeError(f"{name} must read 3 channels")
        base = self.stage1_liver.spec.with_input_channels(1)
        for name in NETWORK_ROLES:
            if getattr(self, name).spec.with_input_channels(1) != base:
                raise CascadeError(
                    f"{name} disagrees with the shared architecture")

    @classmethod
    def build(cls, spec: ArchSpec, seed) -> "CascadeModel":
        s1 = spec.with_input_channels(1)
        s2 = spec.with_input_channels(3)
        return cls(
            stage1_liver=build_network(s1, seed=(seed, 0)),
            stage1_lesion=build_network(s1, seed=(seed, 1)),
            stage2_liver=build_network(s2, seed=(seed, 2)),
            stage2_lesion=build_network(s2, seed=(seed, 3)),
        )

    def networks(self):
        for name in NETWORK_ROLES:
            yield name, getattr(self, name)


@dataclass(frozen=True)
class CascadeConfig:
    """Architecture plus the two per-phase training configurations."""

    arch: ArchSpec
    stage1: TrainConfig
    stage2: TrainConfig
    seed: int = 0


@dataclass
class CascadeSample:
    """A training slice carrying stage-1 maps as extra input channels."""

    planes: np.ndarray         # (3, H, W): image, lesion map, liver map
    liver_labels: np.ndarray
    lesion_labels: np.ndarray
    source: tuple[str, int]

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[0] != 3:
            raise CascadeError(
                f"cascade sample planes must be (3, H, W), got {self.planes.shape}")
        maps = self.planes[1:]
        if maps.size and (maps.min() < 0.0 or maps.max() > 1.0):
            raise CascadeError("probability channels must lie in [0, 1]")


def stack_cascade_input(image: Tensor, lesion_map: ProbabilityMap,
                        liver_map: ProbabilityMap) -> Tensor:
    """Concatenate (image, lesion map, liver map) along channels, untouched.

    The channel order is a fixed contract; the refinement networks are
    trained against it.
    """
    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 1:
        raise CascadeError(f"image must be (1, 1, H, W), got {image.shape}")
    extent = image.shape[2:]
    for m in (lesion_map, liver_map):
        if m.values.shape != extent:
            raise CascadeError(
                f"map extent {m.values.shape} does not match image {extent}")
    data = np.concatenate(
        [image.data, lesion_map.values[None, None], liver_map.values[None, None]],
        axis=1)
    return Tensor(data)


def _stage1_maps(model: CascadeModel, plane: np.ndarray):
    x = Tensor(np.asarray(plane, dtype=np.float64)[None, None])
    lesion = predict_prob(model.stage1_lesion, x, "lesion")
    liver = predict_prob(model.stage1_liver, x, "liver")
    return x, lesion, liver


def stacked_samples(model: CascadeModel, samples) -> list[CascadeSample]:
    """Frozen-stage-1 maps for every slice, assembled as 3-channel samples."""
    out = []
    for s in samples:
        x, lesion, liver = _stage1_maps(model, s.image)
        stacked = stack_cascade_input(x, lesion, liver)
        out.append(CascadeSample(stacked.data[0], s.liver_labels,
                                 s.lesion_labels, s.source))
    return out


def _warm_start_stage2(src: Network, dst: Network) -> None:
    """Seed a refinement net from its trained single-channel counterpart.

    Training is fine-tuning throughout, so stage 2 continues from stage 1
    rather than from scratch.  Tensors transfer by name; only the
    input-facing convolutions widen from 1 to 3 channels, and their two new
    weight columns start at zero so the refined net initially computes
    exactly the stage-1 function and learns the map channels from there.
    """
    params = dict(src.named_parameters())
    for name, t in dst.named_parameters():
        s = params[name].data
        if t.data.shape == s.shape:
            t.data[...] = s
        else:
            t.data[...] = 0.0
            t.data[:, : s.shape[1]] = s
    states = dict(src.bn_states())
    for name, st in dst.bn_states():
        st.mean[...] = states[name].mean
        st.var[...] = states[name].var


def train_cascade(samples, cfg: CascadeConfig) -> CascadeModel:
    """Phase A: stage-1 nets on the bare image.  Phase B: stage-2 nets on
    inputs stacked with frozen stage-1 maps.  Zero-epoch phases leave the
    corresponding networks at initialization.

    Phase B warm-starts from phase A's weights, and each trained phase ends
    with a BN statistics refresh over the uncropped planes, so the frozen
    maps phase B consumes come from the same stage-1 state that prediction
    will use.
    """
    model = CascadeModel.build(cfg.arch, cfg.seed)
    jobs = [(model.stage1_liver, "liver", 0), (model.stage1_lesion, "lesion", 1)]
    for net, target, stream in jobs:
        opt = SGD(net.parameters(), cfg.stage1.lr_fixed, cfg.stage1.momentum)
        for epoch in range(cfg.stage1.epochs):
            train_epoch(net, samples, opt, epoch, cfg.stage1, target, stream)
    if cfg.stage1.epochs > 0:
        planes = [s.planes for s in samples]
        refresh_batch_stats(model.stage1_liver, planes)
        refresh_batch_stats(model.stage1_lesion, planes)
    if cfg.stage2.epochs > 0:
        stacked = stacked_samples(model, samples)
        _warm_start_stage2(model.stage1_liver, model.stage2_liver)
        _warm_start_stage2(model.stage1_lesion, model.stage2_lesion)
        jobs = [(model.stage2_liver, "liver", 2), (model.stage2_lesion, "lesion", 3)]
        for net, target, stream in jobs:
            opt = SGD(net.parameters(), cfg.stage2.lr_fixed, cfg.stage2.momentum)
            for epoch in range(cfg.stage2.epochs):
                train_epoch(net, stacked, opt, epoch, cfg.stage2, target, stream)
        refresh_batch_stats(model.stage2_liver, [s.planes for s in stacked])
        refresh_batch_stats(model.stage2_lesion, [s.planes for s in stacked])
    return model


def cascade_predict(model: CascadeModel, plane: np.ndarray):
    """Full two-stage prediction for one slice.

    Returns (liver map, lesion map) at the slice's resolution.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise CascadeError(f"expected a 2D slice, got shape {plane.shape}")
    x, lesion1, liver1 = _stage1_maps(model, plane)
    stacked = stack_cascade_input(x, lesion1, liver1)
    liver = predict_prob(model.stage2_liver, stacked, "liver")
    lesion = predict_prob(model.stage2_lesion, stacked, "lesion")
    return liver, lesion


# -- checkpoints -------------------------------------------------------------

def _state_tensors(net: Network):
    """Every array defining the network's behaviour, in a fixed order."""
    for name, t in net.named_parameters():
        yield name, t.data
    for name, state in net.bn_states():
        yield f"{name}.mean", state.mean
        yield f"{name}.var", state.var


def save_network(net: Network, path) -> None:
    tensors = list(_state_tensors(net))
    manifest = {
        "spec_sha256": net.spec.sha256(),
        "arch": net.spec.to_json_dict(),
        "tensors": [[name, list(a.shape)] for name, a in tensors],
    }
    with open(path, "wb") as f:
        f.write(NETWORK_MAGIC)
        f.write(json.dumps(manifest, sort_keys=True).encode("ascii"))
        f.write(b"\n")
        for _, a in tensors:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as f:
        magic = f.read(len(NETWORK_MAGIC))
        if magic != NETWORK_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        header = f.readline()
        try:
            manifest = json.loads(header)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: unreadable manifest") from e
        try:
            spec = ArchSpec.from_json_dict(manifest["arch"])
            listed = [(str(n), tuple(s)) for n, s in manifest["tensors"]]
            claimed = manifest["spec_sha256"]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed manifest") from e
        if spec.sha256() != claimed:
            raise CheckpointError(f"{path}: architecture hash mismatch")
        net = build_network(spec, seed=0)
        current = list(_state_tensors(net))
        if [(n, a.shape) for n, a in current] != listed:
            raise CheckpointError(
                f"{path}: tensor table does not match the declared architecture")
        for name, a in current:
            raw = f.read(a.size * 8)
            if len(raw) != a.size * 8:
                raise CheckpointError(f"{path}: truncated payload at {name}")
            a[...] = np.frombuffer(raw, dtype="<f8").reshape(a.shape)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    return net


def save_model(model: CascadeModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, net in model.networks():
        save_network(net, os.path.join(directory, f"{name}.net"))


def load_model(directory) -> CascadeModel:
    nets = {}
    for name in NETWORK_ROLES:
        path = os.path.join(directory, f"{name}.net")
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint {path}")
        nets[name] = load_network(path)
    return CascadeModel(**nets)
