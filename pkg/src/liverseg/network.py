"""Dilated residual segmentation network: description, construction, forward.

The architecture is a table of rows; each row is a short conv sequence that
is either plain (conv-BN-ReLU) or a residual block repeated ``repeat``
times.  Three stride-2 rows give a fixed total downsampling of 8; the final
row is a bare classifier conv.  A width multiplier thins every layer except
that classifier, whose channel count is the number of classes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .engine import (
    BN_EPS, BatchNormState, ConvParams, EngineError, Tensor, add, batch_norm,
    bilinear_resize, conv2d, no_grad, relu, softmax_channels,
)

__all__ = [
    "ConvDef", "StageRow", "ArchSpec", "ShapeRow", "ShapeReport",
    "ProbabilityMap", "Network", "ResidualBlock", "PlainRow",
    "load_arch_spec", "full_scale_spec", "desk_spec", "analyze_shapes",
    "build_network", "predict_prob", "DOWNSAMPLE",
]

DOWNSAMPLE = 8  # fixed product of the stride-2 rows


@dataclass(frozen=True)
class ConvDef:
    """One convolution inside a row: square kernel, output width, stride, dilation."""

    kernel: int
    channels: int
    stride: int = 1
    dilation: int = 1


@dataclass(frozen=True)
class StageRow:
    convs: tuple[ConvDef, ...]
    residual: bool = False
    repeat: int = 1


@dataclass(frozen=True)
class ArchSpec:
    """The whole network as data; serializable, hashable, width-scalable."""

    rows: tuple[StageRow, ...]
    input_channels: int = 1
    width_multiplier: float = 1.0

    def __post_init__(self):
        if not self.rows:
            raise ValueError("architecture needs at least one row")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if not (0 < self.width_multiplier <= 1):
            raise ValueError(
                f"width multiplier must lie in (0, 1], got {self.width_multiplier}")
        total_stride = 1
        for i, row in enumerate(self.rows):
            if row.repeat < 1 or not row.convs:
                raise ValueError(f"row {i} is empty or has repeat < 1")
            strided = [c for c in row.convs if c.stride == 2]
            if len(strided) > 1:
                raise ValueError(f"row {i} has more than one stride-2 conv")
            if strided and row.repeat != 1:
                raise ValueError(f"stride-2 row {i} cannot repeat")
            for c in row.convs:
                if c.stride not in (1, 2):
                    raise ValueError(f"row {i}: stride must be 1 or 2")
                if c.kernel % 2 == 0 or c.kernel < 1 or c.dilation < 1 or c.channels < 1:
                    raise ValueError(f"row {i}: bad conv definition {c}")
                total_stride *= c.stride
        if total_stride != DOWNSAMPLE:
            raise ValueError(
                f"stride-2 convs must multiply to {DOWNSAMPLE}, got {total_stride}")
        last = self.rows[-1]
        if last.residual or last.repeat != 1 or len(last.convs) != 1:
            raise ValueError("final row must be a single plain classifier conv")

    # -- channel resolution -------------------------------------------------

    def resolved_channels(self) -> list[list[int]]:
        """Output channels per row per conv after width scaling.

        The classifier (last conv of the last row) is exempt: its width is
        the class count, not capacity.
        """
        out: list[list[int]] = []
        for i, row in enumerate(self.rows):
            row_ch = []
            for j, c in enumerate(row.convs):
                if i == len(self.rows) - 1 and j == len(row.convs) - 1:
                    row_ch.append(c.channels)
                else:
                    row_ch.append(max(1, int(round(c.channels * self.width_multiplier))))
            out.append(row_ch)
        return out

    def num_classes(self) -> int:
        return self.rows[-1].convs[-1].channels

    def with_input_channels(self, c: int) -> "ArchSpec":
        return replace(self, input_channels=c)

    def with_width_multiplier(self, m: float) -> "ArchSpec":
        return replace(self, width_multiplier=m)

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "width_multiplier": self.width_multiplier,
            "rows": [
                {
                    "convs": [
                        {"kernel": c.kernel, "channels": c.channels,
                         "stride": c.stride, "dilation": c.dilation}
                        for c in row.convs
                    ],
                    "residual": row.residual,
                    "repeat": row.repeat,
                }
                for row in self.rows
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ArchSpec":
        rows = tuple(
            StageRow(
                convs=tuple(
                    ConvDef(int(c["kernel"]), int(c["channels"]),
                            int(c.get("stride", 1)), int(c.get("dilation", 1)))
                    for c in row["convs"]
                ),
                residual=bool(row.get("residual", False)),
                repeat=int(row.get("repeat", 1)),
            )
            for row in d["rows"]
        )
        return cls(rows, int(d.get("input_channels", 1)),
                   float(d.get("width_multiplier", 1.0)))

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True,
                          separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()


def load_arch_spec(path) -> ArchSpec:
    with open(path, "r", encoding="ascii") as f:
        return ArchSpec.from_json_dict(json.load(f))


def _packaged_spec(name: str) -> ArchSpec:
    text = resources.files("liverseg").joinpath(f"arch/{name}").read_text("ascii")
    return ArchSpec.from_json_dict(json.loads(text))


def full_scale_spec() -> ArchSpec:
    """The reference table at full width: 2-class output, downsampling 8."""
    return _packaged_spec("fullscale.json")


def desk_spec(width_multiplier: float = 1.0 / 16.0) -> ArchSpec:
    """Same rows thinned for desk-scale runs (defaults to width 1/16)."""
    return _packaged_spec("desk.json").with_width_multiplier(width_multiplier)


# -- shape arithmetic -------------------------------------------------------

@dataclass(frozen=True)
class ShapeRow:
    index: int
    out_h: int
    out_w: int
    out_channels: int


@dataclass(frozen=True)
class ShapeReport:
    rows: tuple[ShapeRow, ...]
    parameter_count: int


def _conv_extent(n: int, k: int, stride: int, dilation: int) -> int:
    pad = dilation * (k - 1) // 2
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _block_needs_projection(in_ch: int, out_ch: int, stride: int) -> bool:
    return in_ch != out_ch or stride != 1


def analyze_shapes(spec: ArchSpec, input_size: tuple[int, int]) -> ShapeReport:
    """Pure arithmetic: per-row output extents plus trainable parameter count.

    Counts conv weights, BN scale/shift pairs, and the classifier bias
    (BN-followed convs are bias-free; running statistics are state, not
    parameters).  Must agree with a measured forward pass; that agreement
    is what the tests pin down.
    """
    h, w = input_size
    if h % DOWNSAMPLE or w % DOWNSAMPLE or h < DOWNSAMPLE or w < DOWNSAMPLE:
        raise ValueError(f"input extent {input_size} must be divisible by {DOWNSAMPLE}")
    channels = spec.resolved_channels()
    rows = []
    params = 0
    in_ch = spec.input_channels
    classifier = (len(spec.rows) - 1, len(spec.rows[-1].convs) - 1)
    for i, row in enumerate(spec.rows):
        for rep in range(row.repeat):
            block_in = in_ch
            block_stride = 1
            for j, c in enumerate(row.convs):
                out_ch = channels[i][j]
                params += out_ch * in_ch * c.kernel * c.kernel
                if (i, j) != classifier:
                    params += 2 * out_ch  # BN gamma/beta
                else:
                    params += out_ch     # classifier bias
                if rep == 0:
                    h = _conv_extent(h, c.kernel, c.stride, c.dilation)
                    w = _conv_extent(w, c.kernel, c.stride, c.dilation)
                block_stride *= c.stride
                in_ch = out_ch
            if row.residual and _block_needs_projection(block_in, in_ch, block_stride):
                params += in_ch * block_in  # 1x1 projection conv, no bias
                params += 2 * in_ch         # its BN
        rows.append(ShapeRow(i, h, w, in_ch))
    return ShapeReport(tuple(rows), params)


# -- runtime layers ---------------------------------------------------------

class ConvUnit:
    """conv [+ BN] [+ ReLU]; the building unit of every row.

    Units followed by batch norm carry no conv bias (mean subtraction
    would cancel it); only the bare classifier conv has one.
    """

    def __init__(self, params: ConvParams, weight: Tensor,
                 bias: Tensor | None, bn: BatchNormState | None,
                 gamma: Tensor | None, beta: Tensor | None, activate: bool):
        self.params = params
        self.weight = weight
        self.bias = bias
        self.bn = bn
        self.gamma = gamma
        self.beta = beta
        self.activate = activate

    def forward(self, x: Tensor, mode: str) -> Tensor:
        out = conv2d(x, self.weight, self.bias, self.params)
        if self.bn is not None:
            out = batch_norm(out, self.gamma, self.beta, self.bn, mode)
        if self.activate:
            out = relu(out)
        return out

    def named_tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias
        if self.bn is not None:
            yield f"{prefix}.bn.gamma", self.gamma
            yield f"{prefix}.bn.beta", self.beta


class PlainRow:
    """Non-residual row: its units applied in order."""

    def __init__(self, units: list[ConvUnit]):
        self.units = units

    def forward(self, x: Tensor, mode: str) -> Tensor:
        for u in self.units:
            x = u.forward(x, mode)
        return x

    def iter_units(self):
        return iter(self.units)


class ResidualBlock:
    """shortcut(x) + branch(x), no activation after the addition.

    The branch is conv-BN-ReLU repeated, except the last conv which keeps
    its BN but drops the ReLU.  The shortcut is the identity, or a 1x1
    projection conv with BN when the block changes width or strides.
    """

    def __init__(self, branch: list[ConvUnit], projection: ConvUnit | None):
        self.branch = branch
        self.projection = projection

    def branch_forward(self, x: Tensor, mode: str) -> Tensor:
        out = x
        for u in self.branch:
            out = u.forward(out, mode)
        return out

    def shortcut_forward(self, x: Tensor, mode: str) -> Tensor:
        if self.projection is None:
            return x
        return self.projection.forward(x, mode)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return add(self.shortcut_forward(x, mode), self.branch_forward(x, mode))

    def iter_units(self):
        yield from self.branch
        if self.projection is not None:
            yield self.projection


class Network:
    """An instantiated architecture: named blocks plus the spec that built it."""

    def __init__(self, spec: ArchSpec, blocks: list[tuple[str, object]]):
        self.spec = spec
        self.blocks = blocks

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if mode not in ("train", "eval"):
            raise EngineError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise EngineError(
                f"input shape {x.shape} does not match spec "
                f"(expects {self.spec.input_channels} channels)")
        if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
            raise EngineError(
                f"input extents {x.shape[2:]} must be divisible by {DOWNSAMPLE}")
        for _, block in self.blocks:
            x = block.forward(x, mode)
        return x

    def named_parameters(self):
        for name, block in self.blocks:
            for unit_name, unit in self._units_of(name, block):
                yield from unit.named_tensors(unit_name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def bn_states(self):
        for name, block in self.blocks:
            for unit_name, unit in self._units_of(name, block):
                if unit.bn is not None:
                    yield f"{unit_name}.bn", unit.bn

    @staticmethod
    def _units_of(name, block):
        if isinstance(block, PlainRow):
            for k, u in enumerate(block.units):
                yield f"{name}.conv{k}", u
        else:
            for k, u in enumerate(block.branch):
                yield f"{name}.conv{k}", u
            if block.projection is not None:
                yield f"{name}.shortcut", block.projection


def _init_unit(rng, in_ch: int, out_ch: int, kernel: int, stride: int,
               dilation: int, with_bn: bool, activate: bool) -> ConvUnit:
    fan_in = in_ch * kernel * kernel
    weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               size=(out_ch, in_ch, kernel, kernel)),
                    requires_grad=True)
    p = ConvParams(in_ch, out_ch, (kernel, kernel), stride=stride,
                   dilation=dilation)
    if with_bn:
        bias = None
        bn = BatchNormState.for_channels(out_ch)
        gamma = Tensor(np.ones(out_ch), requires_grad=True)
        beta = Tensor(np.zeros(out_ch), requires_grad=True)
    else:
        bias = Tensor(np.zeros(out_ch), requires_grad=True)
        bn = gamma = beta = None
    return ConvUnit(p, weight, bias, bn, gamma, beta, activate)


def build_network(spec: ArchSpec, seed) -> Network:
    """He-initialized network; bit-deterministic for a given seed.

    Weights are drawn in a fixed order (row by row, branch before
    projection), scaled by sqrt(2 / fan_in); the classifier bias and BN
    shifts start at zero, BN scales at one, running stats at (0, 1).
    """
    rng = np.random.default_rng(seed)
    channels = spec.resolved_channels()
    blocks: list[tuple[str, object]] = []
    in_ch = spec.input_channels
    last_row = len(spec.rows) - 1
    for i, row in enumerate(spec.rows):
        for rep in range(row.repeat):
            name = f"row{i:02d}" if row.repeat == 1 else f"row{i:02d}.rep{rep}"
            if not row.residual:
                units = []
                for j, c in enumerate(row.convs):
                    out_ch = channels[i][j]
                    is_classifier = i == last_row and j == len(row.convs) - 1
                    units.append(_init_unit(
                        rng, in_ch, out_ch, c.kernel, c.stride, c.dilation,
                        with_bn=not is_classifier,
                        activate=not is_classifier))
                    in_ch = out_ch
                blocks.append((name, PlainRow(units)))
            else:
                block_in = in_ch
                block_stride = 1
                branch = []
                for j, c in enumerate(row.convs):
                    out_ch = channels[i][j]
                    branch.append(_init_unit(
                        rng, in_ch, out_ch, c.kernel, c.stride, c.dilation,
                        with_bn=True, activate=j < len(row.convs) - 1))
                    block_stride *= c.stride
                    in_ch = out_ch
                projection = None
                if _block_needs_projection(block_in, in_ch, block_stride):
                    projection = _init_unit(
                        rng, block_in, in_ch, 1, block_stride, 1,
                        with_bn=True, activate=False)
                blocks.append((name, ResidualBlock(branch, projection)))
    return Network(spec, blocks)


# -- prediction -------------------------------------------------------------

@dataclass
class ProbabilityMap:
    """Foreground probability for one structure at input resolution."""

    values: np.ndarray
    kind: str  # "liver" | "lesion"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"probability map must be 2D, got {self.values.shape}")
        if self.kind not in ("liver", "lesion"):
            raise ValueError(f"kind must be 'liver' or 'lesion', got {self.kind!r}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")


def predict_prob(net: Network, x: Tensor, kind: str) -> ProbabilityMap:
    """Eval-mode forward, upsample logits to input resolution, softmax.

    ``x`` is a (1, C, H, W) tensor; the returned map is the foreground
    channel at (H, W).
    """
    if x.ndim != 4 or x.shape[0] != 1:
        raise EngineError(f"predict_prob expects a single-item batch, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    with no_grad():
        logits = net.forward(x, "eval")
        up = bilinear_resize(logits, h, w)
        prob = softmax_channels(up)
    return ProbabilityMap(prob.data[0, 1], kind)
