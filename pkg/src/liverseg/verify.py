"""Self-checks: the gradient suite and shape conformance, shared by CLI and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    BatchNormState, ConvParams, Tensor, add, batch_norm, bilinear_resize,
    conv2d, cross_entropy_loss, grad_check, mul, no_grad, relu,
    softmax_channels, sum_all,
)
from .network import Network, analyze_shapes, build_network, desk_spec

__all__ = ["GradResult", "gradient_suite", "measure_row_shapes",
           "GRAD_TOLERANCE"]

GRAD_TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < GRAD_TOLERANCE


def _projected(out_builder, shape, rng):
    pr = Tensor(rng.standard_normal(shape))
    return lambda: sum_all(mul(out_builder(), pr))


def _op_cases(seed: int):
    rng = np.random.default_rng(seed)

    def conv_case(stride, dilation, kernel):
        x = Tensor(rng.standard_normal((2, 2, 8, 9)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, kernel, kernel)), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        p = ConvParams(2, 3, (kernel, kernel), stride=stride, dilation=dilation)
        shape = (2, 3) + p.out_extent(8, 9)
        return _projected(lambda x=x, w=w, b=b, p=p: conv2d(x, w, b, p),
                          shape, rng), [x, w, b]

    cases = {}
    cases["conv2d/s1"] = conv_case(1, 1, 3)
    cases["conv2d/s2"] = conv_case(2, 1, 3)
    cases["conv2d/d2"] = conv_case(1, 2, 3)
    cases["conv2d/d4"] = conv_case(1, 4, 3)
    cases["conv2d/1x1"] = conv_case(1, 1, 1)

    for mode in ("train", "eval"):
        x = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
        g = Tensor(1.0 + 0.1 * rng.standard_normal(3), requires_grad=True)
        b = Tensor(0.1 * rng.standard_normal(3), requires_grad=True)
        st = BatchNormState(mean=rng.standard_normal(3), var=1.0 + rng.random(3))
        cases[f"batch_norm/{mode}"] = (
            _projected(lambda x=x, g=g, b=b, st=st, mode=mode:
                       batch_norm(x, g, b, st, mode), x.shape, rng),
            [x, g, b])

    # relu inputs held away from the kink so central differences are valid
    mag = 0.2 + rng.random((3, 4))
    xr = Tensor(mag * np.where(rng.random((3, 4)) < 0.5, -1, 1), requires_grad=True)
    cases["relu"] = (_projected(lambda: relu(xr), xr.shape, rng), [xr])

    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    cases["add"] = (_projected(lambda: add(a, b), a.shape, rng), [a, b])
    cases["mul"] = (_projected(lambda: mul(a, b), a.shape, rng), [a, b])

    xb = Tensor(rng.standard_normal((1, 2, 5, 6)), requires_grad=True)
    cases["bilinear/up"] = (
        _projected(lambda: bilinear_resize(xb, 9, 11), (1, 2, 9, 11), rng), [xb])
    cases["bilinear/down"] = (
        _projected(lambda: bilinear_resize(xb, 3, 4), (1, 2, 3, 4), rng), [xb])

    xs = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    cases["softmax_channels"] = (
        _projected(lambda: softmax_channels(xs), xs.shape, rng), [xs])

    xe = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    labels = rng.integers(0, 2, size=(2, 4, 4))
    cases["cross_entropy"] = (lambda: cross_entropy_loss(xe, labels), [xe])
    return cases


def _branch_kink_margin(block, x: Tensor) -> float:
    """Smallest |pre-activation| entering the branch ReLUs, train mode."""
    margin = np.inf
    with no_grad():
        t = x
        for u in block.branch:
            y = conv2d(t, u.weight, u.bias, u.params)
            if u.bn is not None:
                y = batch_norm(y, u.gamma, u.beta, u.bn, "train")
            if u.activate:
                margin = min(margin, float(np.abs(y.data).min()))
                y = relu(y)
            t = y
    return margin


def _block_cases(seed: int):
    """Whole desk-width residual blocks, one projecting and one identity.

    Central differences are only valid away from the ReLU kink, so the
    pre-activation distributions are shifted off zero and an explicit
    margin (>> the probe step) is verified before the check runs.
    """
    net = build_network(desk_spec(), seed=seed)
    blocks = dict(net.blocks)
    cases = {}
    for name, key, cin, size in [
        ("residual_block/projection", "row01", 4, 12),
        ("residual_block/identity", "row08.rep0", 64, 8),
    ]:
        block = blocks[key]
        for u in block.branch:
            if u.activate:
                u.beta.data += 2.5
        for attempt in range(50):
            rng = np.random.default_rng((seed, 77, attempt))
            x = Tensor(rng.standard_normal((1, cin, size, size)),
                       requires_grad=True)
            if _branch_kink_margin(block, x) > 1e-3:
                break
        else:
            raise RuntimeError(f"no kink-free input found for {name}")
        params = [t for u in block.iter_units() for _, t in u.named_tensors("p")]
        pr_shape = block.forward(x, "eval").shape
        pr = Tensor(rng.standard_normal(pr_shape))
        cases[name] = (
            lambda block=block, x=x, pr=pr: sum_all(mul(block.forward(x, "train"), pr)),
            [x] + params)
    return cases


def gradient_suite(seeds=(0, 1, 2), max_coords: int = 16) -> list[GradResult]:
    """Finite-difference check of every differentiable op and a full block."""
    results = []
    for seed in seeds:
        cases = _op_cases(seed)
        cases.update(_block_cases(seed))
        for name, (build, tensors) in cases.items():
            err = grad_check(build, tensors, rng=seed, max_coords=max_coords)
            results.append(GradResult(name, seed, err))
    return results


def measure_row_shapes(net: Network, x: Tensor) -> list[tuple[int, int, int]]:
    """Forward pass recording (H, W, C) after the last block of each row."""
    shapes = {}
    for name, block in net.blocks:
        x = block.forward(x, "eval")
        row = int(name[3:5])
        shapes[row] = (x.shape[2], x.shape[3], x.shape[1])
    return [shapes[i] for i in sorted(shapes)]
