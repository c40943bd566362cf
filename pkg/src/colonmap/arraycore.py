"""Dense grid primitives shared by the rest of the package.

A grid is a numpy array of shape ``(H, W, C)``. Single-channel maps such as
masks and confidences are plain ``(H, W)`` arrays. Everything is computed in
float64; reductions walk kernel/window offsets in fixed row-major order so
results are bit-identical between calls.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions are incompatible."""


class EvaluationError(ArithmeticError):
    """Raised when a function under test returns a non-finite value."""


# Coordinates closer than this to an integer are snapped to it. Reprojecting
# float32-stored point maps lands up to ~5e-7 px off the pixel centre.
SNAP_EPS = 1e-5


def as_grid(a, channels: Optional[int] = None, name: str = "grid") -> np.ndarray:
    """Return ``a`` as a float64 (H, W, C) array, promoting (H, W) to one channel."""
    g = np.asarray(a, dtype=np.float64)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.ndim != 3:
        raise ShapeError(f"{name}: expected (H, W, C) array, got shape {g.shape}")
    if g.shape[0] < 1 or g.shape[1] < 1 or g.shape[2] < 1:
        raise ShapeError(f"{name}: empty dimension in shape {g.shape}")
    if channels is not None and g.shape[2] != channels:
        raise ShapeError(f"{name}: expected {channels} channels, got {g.shape[2]}")
    return g


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate an (H, W, Cin) grid with an [out, in, kh, kw] kernel.

    Zero padding. Output spatial size is ``(dim + 2*padding - k) // stride + 1``.
    """
    x = as_grid(x, name="input")
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D [out, in, kh, kw], got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if cin != x.shape[2]:
        raise ShapeError(f"kernel expects {cin} input channels, grid has {x.shape[2]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    if bias is None:
        bias = np.zeros(cout)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if bias.shape[0] != cout:
        raise ShapeError(f"bias length {bias.shape[0]} != out channels {cout}")

    h, w = x.shape[:2]
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    out = np.zeros((ho, wo, cout))
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride, :]
            out += patch @ kernel[:, :, ky, kx].T
    out += bias
    return out


def conv2d_backward_input(grad_out, kernel, input_shape: Sequence[int], stride: int = 1,
                          padding: int = 0) -> np.ndarray:
    """Gradient of ``sum(grad_out * conv2d(x, kernel, ...))`` with respect to ``x``."""
    grad_out = as_grid(grad_out, name="grad_out")
    kernel = np.asarray(kernel, dtype=np.float64)
    cout, cin, kh, kw = kernel.shape
    h, w = input_shape[:2]
    ho, wo = grad_out.shape[:2]
    gp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
    for ky in range(kh):
        for kx in range(kw):
            gp[ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride, :] += (
                grad_out @ kernel[:, :, ky, kx]
            )
    return gp[padding:padding + h, padding:padding + w, :]


def avg_pool(x, window: int, stride: Optional[int] = None) -> np.ndarray:
    """Mean over ``window x window`` patches, no padding."""
    x = as_grid(x, name="input")
    stride = window if stride is None else stride
    h, w = x.shape[:2]
    if window < 1 or stride < 1:
        raise ShapeError("window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than grid {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    acc = np.zeros((ho, wo, x.shape[2]))
    for dy in range(window):
        for dx in range(window):
            acc += x[dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride, :]
    return acc / (window * window)


def avg_pool_backward(grad_out, input_shape: Sequence[int], window: int,
                      stride: Optional[int] = None) -> np.ndarray:
    grad_out = as_grid(grad_out, name="grad_out")
    stride = window if stride is None else stride
    h, w = input_shape[:2]
    ho, wo, c = grad_out.shape
    g = np.zeros((h, w, c))
    share = grad_out / (window * window)
    for dy in range(window):
        for dx in range(window):
            g[dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride, :] += share
    return g


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of (x, y) = (column, row) pixel-center coordinates."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def bilinear_sample(x, coords) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``x`` at fractional (x, y) positions.

    Integer coordinates are pixel centers. A location is valid when every
    neighbour carrying non-zero weight lies inside the grid, i.e. when
    ``0 <= x <= W-1`` and ``0 <= y <= H-1``. Invalid samples return 0 with
    mask 0.
    """
    x = as_grid(x, name="input")
    coords = as_grid(coords, channels=2, name="coords")
    h, w = x.shape[:2]
    cx = coords[..., 0]
    cy = coords[..., 1]
    rx = np.round(cx)
    ry = np.round(cy)
    cx = np.where(np.abs(cx - rx) < SNAP_EPS, rx, cx)
    cy = np.where(np.abs(cy - ry) < SNAP_EPS, ry, cy)
    finite = np.isfinite(cx) & np.isfinite(cy)
    valid = finite & (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)

    cx = np.where(valid, cx, 0.0)
    cy = np.where(valid, cy, 0.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    fx = (cx - x0)[..., None]
    fy = (cy - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    top = x[y0, x0] * (1.0 - fx) + x[y0, x1] * fx
    bot = x[y1, x0] * (1.0 - fx) + x[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    out = np.where(valid[..., None], out, 0.0)
    return out, valid.astype(np.float64)


def masked_mean(values, weights) -> float:
    """Weighted mean with float64 accumulation; raises on zero total weight."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = float(weights.sum())
    if total <= 0.0:
        raise ZeroDivisionError("zero total weight")
    return float((values * weights).sum() / total)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_deviation: float
    max_abs_deviation: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_deviation <= self.tolerance


def grad_check(f: Callable[[np.ndarray], float], at, analytic_grad, step: float = 1e-3,
               tolerance: float = 1e-4, indices=None, abs_floor: float = 1e-12) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``at``.

    ``indices`` selects flat coordinates to probe (default: all). Entries where
    both gradients are below ``abs_floor`` in magnitude count as agreeing.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(at, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if g.shape[0] != x.size:
        raise ShapeError(f"gradient has {g.shape[0]} entries, input has {x.size}")
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst_rel = 0.0
    worst_abs = 0.0
    n = 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value probing coordinate {i}")
        num = (fp - fm) / (2.0 * step)
        diff = abs(num - g[i])
        scale = max(abs(num), abs(g[i]))
        rel = 0.0 if scale < abs_floor else diff / scale
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, diff)
        n += 1
    return GradCheckReport(worst_rel, worst_abs, n, tolerance)
