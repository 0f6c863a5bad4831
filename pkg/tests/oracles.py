"""Independent reference implementations the tests compare against.

Everything in here is written the slow, obvious way (plain loops, no shared
code with the package) so the two routes stay independent.
"""

from __future__ import annotations

import numpy as np


def conv2d_loops(x, w, b, stride=1, dilation=1, pad=None):
    """Nested-loop direct convolution, NCHW, zero padding."""
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    assert cin == cin2
    if pad is None:
        pad = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
    ph, pw = pad
    oh = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = b[co]
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky * dilation - ph
                                ix = ox * stride + kx * dilation - pw
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[ni, ci, iy, ix] * w[co, ci, ky, kx]
                    out[ni, co, oy, ox] = acc
    return out


def zero_upsample_kernel(w, dilation):
    """Insert dilation-1 zero rows/cols between kernel taps."""
    cout, cin, kh, kw = w.shape
    ekh = dilation * (kh - 1) + 1
    ekw = dilation * (kw - 1) + 1
    out = np.zeros((cout, cin, ekh, ekw))
    out[:, :, ::dilation, ::dilation] = w
    return out


def bilinear_loops(a, out_h, out_w):
    """Per-pixel bilinear resize with half-pixel centers, 2D only."""
    h, w = a.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = min(int(np.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = min(int(np.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            top = a[y0, x0] + wx * (a[y0, x1] - a[y0, x0])
            bot = a[y1, x0] + wx * (a[y1, x1] - a[y1, x0])
            out[oy, ox] = top + wy * (bot - top)
    return out


def sgd_scalar_sim(w0, grad_fn, lr, momentum, steps):
    """Scalar SGD trajectory: v <- m*v + g; w <- w - lr*v."""
    w, v = float(w0), 0.0
    for _ in range(steps):
        v = momentum * v + grad_fn(w)
        w = w - lr * v
    return w


def fill_holes_bfs(mask):
    """Border-seeded 4-connected flood over background; unreached bg is a hole."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    reach = np.zeros_like(mask)
    stack = []
    for y in range(h):
        for x in (0, w - 1):
            if not mask[y, x]:
                stack.append((y, x))
    for x in range(w):
        for y in (0, h - 1):
            if not mask[y, x]:
                stack.append((y, x))
    while stack:
        y, x = stack.pop()
        if reach[y, x] or mask[y, x]:
            continue
        reach[y, x] = True
        if y > 0:
            stack.append((y - 1, x))
        if y < h - 1:
            stack.append((y + 1, x))
        if x > 0:
            stack.append((y, x - 1))
        if x < w - 1:
            stack.append((y, x + 1))
    return mask | (~mask & ~reach)


def overlap_counts(a, b):
    """Brute-force voxel counting for overlap metrics."""
    a = np.asarray(a).astype(bool).reshape(-1)
    b = np.asarray(b).astype(bool).reshape(-1)
    inter = sum(1 for x, y in zip(a, b) if x and y)
    union = sum(1 for x, y in zip(a, b) if x or y)
    return inter, union, int(a.sum()), int(b.sum())
