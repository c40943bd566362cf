"""Pinhole intrinsics with square pixels, and focal-length recovery from a point map."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .arraycore import ShapeError, as_grid, pixel_grid
from .geometry import PointMap

Z_MIN = 1e-6
RESIDUAL_FLOOR = 1e-9


class DegenerateInputError(ValueError):
    """Input does not constrain the requested quantity."""


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        return cls(float(focal), (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def matrix(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["focal"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def project_points(K: Intrinsics, xyz) -> tuple[np.ndarray, np.ndarray]:
    """Project (..., 3) points to (..., 2) pixel coordinates plus a depth-validity mask."""
    xyz = np.asarray(xyz, dtype=np.float64)
    z = xyz[..., 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    u = K.focal * xyz[..., 0] / zs + K.cx
    v = K.focal * xyz[..., 1] / zs + K.cy
    uv = np.stack([u, v], axis=-1)
    uv = np.where(valid[..., None], uv, 0.0)
    return uv, valid.astype(np.float64)


def project(K: Intrinsics, X: PointMap) -> tuple[np.ndarray, np.ndarray]:
    return project_points(K, X.xyz)


def unproject(K: Intrinsics, depth, frame=None) -> PointMap:
    d = as_grid(depth, channels=1, name="depth")[..., 0]
    h, w = d.shape
    pix = pixel_grid(h, w)
    x = d * ((pix[..., 0] - K.cx) / K.focal)
    y = d * ((pix[..., 1] - K.cy) / K.focal)
    return PointMap(np.stack([x, y, d], axis=-1), frame, frame)


@dataclass
class FocalEstimate:
    focal: float
    iterations: int
    focal_lsq: float
    objective_history: list = field(default_factory=list)
    converged: bool = True


def focal_objective(f: float, u, q, w) -> float:
    r = u - f * q
    return float(np.sum(w * np.sqrt(np.sum(r * r, axis=1))))


def _focal_problem(X: PointMap, confidence=None, principal: Optional[tuple] = None):
    xyz = X.xyz
    h, w = xyz.shape[:2]
    cx, cy = principal if principal is not None else ((w - 1) / 2.0, (h - 1) / 2.0)
    pix = pixel_grid(h, w)
    z = xyz[..., 2]
    valid = z > Z_MIN
    weights = np.ones((h, w)) if confidence is None else np.asarray(confidence, dtype=np.float64).reshape(h, w)
    valid &= weights > 0
    zs = np.where(valid, z, 1.0)
    q = np.stack([xyz[..., 0] / zs, xyz[..., 1] / zs], axis=-1)[valid]
    u = np.stack([pix[..., 0] - cx, pix[..., 1] - cy], axis=-1)[valid]
    return u, q, weights[valid]


def estimate_focal_weiszfeld(X: PointMap, confidence=None, max_iters: int = 100,
                             tol: float = 1e-10, principal: Optional[tuple] = None) -> FocalEstimate:
    """Focal length minimizing ``sum_i w_i |u_i - f q_i|`` by Weiszfeld iterations.

    ``u_i`` is the pixel position relative to the principal point (image
    centre by default), ``q_i = (x/z, y/z)`` the normalized direction of the
    point at that pixel. Starts from the least-squares solution, which is
    returned as ``focal_lsq``.
    """
    u, q, w = _focal_problem(X, confidence, principal)
    if u.shape[0] < 2:
        raise DegenerateInputError("fewer than two pixels with positive depth")
    qq = np.sum(q * q, axis=1)
    uq = np.sum(u * q, axis=1)
    denom = float(np.sum(w * qq))
    if denom <= 1e-18 * max(1.0, float(w.sum())):
        raise DegenerateInputError("all directions lie on the principal axis")
    f = float(np.sum(w * uq)) / denom
    if not f > 0:
        raise DegenerateInputError(f"non-positive least-squares focal {f}")
    f_lsq = f
    history = [focal_objective(f, u, q, w)]
    iters = 0
    converged = False
    while iters < max_iters:
        r = np.sqrt(np.sum((u - f * q) ** 2, axis=1))
        omega = w / np.maximum(r, RESIDUAL_FLOOR)
        f_new = float(np.sum(omega * uq)) / float(np.sum(omega * qq))
        iters += 1
        if not f_new > 0:
            raise DegenerateInputError(f"non-positive focal estimate {f_new}")
        done = abs(f_new - f) < tol * f
        f = f_new
        history.append(focal_objective(f, u, q, w))
        if done:
            converged = True
            break
    return FocalEstimate(f, iters, f_lsq, history, converged)
