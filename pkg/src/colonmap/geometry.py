"""Rigid/similarity transforms, trajectories, point maps and closed-form alignment.

Pose direction: ``T_a_to_b`` maps points expressed in frame ``a`` coordinates
into frame ``b`` coordinates (``x_b = R x_a + t``). Trajectory entries are
camera-to-world poses, as in the TUM format.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .arraycore import ShapeError, as_grid


class DegenerateConfigurationError(ValueError):
    """Point configuration does not determine a unique transform."""


class InsufficientSupportError(ValueError):
    """Too few confident correspondences for pose recovery."""


def _normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = math.sqrt(float(q @ q))
    if not n > 0 or not math.isfinite(n):
        raise ValueError(f"invalid quaternion {q}")
    q = q / n
    # canonical hemisphere keeps equality checks stable
    return -q if q[0] < 0 else q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _normalize_quat(q)


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x -> R x + t`` with R stored as a unit quaternion (w, x, y, z)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _normalize_quat(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, t=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(axis_angle_quat(axis, angle), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self * other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        return PoseSE3(q, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        w, x, y, z = self.rotation
        q = np.array([w, -x, -y, -z])
        return PoseSE3(q, -(quat_to_matrix(q) @ self.translation))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.translation

    def with_translation(self, t) -> "PoseSE3":
        return PoseSE3(self.rotation, t)


@dataclass(frozen=True)
class Sim3Transform:
    scale: float = 1.0
    pose: PoseSE3 = field(default_factory=PoseSE3)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.pose.R.T) + self.pose.translation

    def apply_pose(self, pose: PoseSE3) -> PoseSE3:
        """Transform a camera-to-world pose by this similarity (rotation and scaled position)."""
        q = quat_multiply(self.pose.rotation, pose.rotation)
        return PoseSE3(q, self.apply(pose.translation))


def rotation_angle(pose_or_quat) -> float:
    """Rotation angle in radians, accurate for tiny angles."""
    q = pose_or_quat.rotation if isinstance(pose_or_quat, PoseSE3) else _normalize_quat(pose_or_quat)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def rotation_error(a: PoseSE3, b: PoseSE3) -> float:
    return rotation_angle(a.inverse().compose(b))


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if ts.shape[0] != len(poses):
            raise ShapeError(f"{ts.shape[0]} timestamps for {len(poses)} poses")
        if ts.shape[0] > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    @classmethod
    def from_poses(cls, poses: Sequence[PoseSE3], dt: float = 1.0) -> "Trajectory":
        return cls(np.arange(len(poses)) * dt, tuple(poses))

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Trajectory(self.timestamps[i], self.poses[i])
        return self.poses[i]

    def subset(self, indices: Iterable[int]) -> "Trajectory":
        idx = sorted(set(int(i) for i in indices))
        return Trajectory(self.timestamps[idx], tuple(self.poses[i] for i in idx))

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def relative(self, i: int, j: int) -> PoseSE3:
        """``T^{j -> i}``: maps frame-j camera coordinates into frame-i camera coordinates."""
        return self.poses[i].inverse().compose(self.poses[j])


def read_trajectory(path) -> Trajectory:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` lines are comments."""
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        v = [float(p) for p in parts]
        stamps.append(v[0])
        poses.append(PoseSE3([v[7], v[4], v[5], v[6]], v[1:4]))
    return Trajectory(np.array(stamps), tuple(poses))


def format_trajectory(traj: Trajectory) -> str:
    lines = []
    for ts, p in zip(traj.timestamps, traj.poses):
        w, x, y, z = p.rotation
        vals = [ts, *p.translation, x, y, z, w]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def write_trajectory(path, traj: Trajectory) -> None:
    Path(path).write_text(format_trajectory(traj))


@dataclass(frozen=True)
class PointMap:
    """Per-pixel 3-D points of frame ``source_frame`` expressed in ``coord_frame`` coordinates."""

    xyz: np.ndarray
    source_frame: object = None
    coord_frame: object = None

    def __post_init__(self):
        g = as_grid(self.xyz, channels=3, name="point map")
        if not np.all(np.isfinite(g)):
            raise ValueError("point map contains non-finite values")
        object.__setattr__(self, "xyz", g)

    @property
    def shape(self) -> tuple:
        return self.xyz.shape[:2]

    def relabel(self, source_frame=None, coord_frame=None) -> "PointMap":
        return PointMap(self.xyz,
                        self.source_frame if source_frame is None else source_frame,
                        self.coord_frame if coord_frame is None else coord_frame)


@dataclass(frozen=True)
class FlowField:
    """Displacement field living on ``to_frame``'s pixel grid.

    ``flow(p)`` is added to pixel ``p`` of ``to_frame`` to reach the matching
    location in ``from_frame``; written F^{to <- from}.
    """

    uv: np.ndarray
    to_frame: object = None
    from_frame: object = None

    def __post_init__(self):
        g = as_grid(self.uv, channels=2, name="flow")
        if not np.all(np.isfinite(g)):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "uv", g)


def apply_pose(T: PoseSE3, X: PointMap, target_frame=None) -> PointMap:
    return PointMap(T.apply(X.xyz), X.source_frame,
                    X.coord_frame if target_frame is None else target_frame)


def umeyama_align(source, target, with_scale: bool = True, weights=None) -> Sim3Transform:
    """Least-squares ``target ~ s R source + t`` (Umeyama 1991), optionally weighted.

    ``weights`` are normalized to sum to one before accumulation.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ShapeError(f"source {src.shape} and target {dst.shape} differ")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError(f"need >= 3 correspondences, got {src.shape[0]}")
    if weights is None:
        w = np.full(src.shape[0], 1.0 / src.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != src.shape[0] or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be non-negative with positive sum")
        w = w / w.sum()

    mu_s = w @ src
    mu_d = w @ dst
    sc = src - mu_s
    dc = dst - mu_d
    cov = (dc * w[:, None]).T @ sc
    U, D, Vt = np.linalg.svd(cov)
    if D[0] <= 0 or D[1] <= 1e-12 * D[0]:
        raise DegenerateConfigurationError("rank-deficient cross-covariance (collinear points?)")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = float(w @ np.einsum("ij,ij->i", sc, sc))
        scale = float(np.trace(np.diag(D) @ S)) / var_s
    else:
        scale = 1.0
    t = mu_d - scale * (R @ mu_s)
    return Sim3Transform(scale, PoseSE3.from_matrix(R, t))


def alignment_residuals(transform: Sim3Transform, source, target) -> np.ndarray:
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    return np.linalg.norm(dst - transform.apply(src), axis=1)


def recover_pose_from_pointmaps(X_a: PointMap, X_b: PointMap, confidence=None,
                                min_conf: float = 0.0) -> PoseSE3:
    """Rigid pose mapping ``X_b``'s coordinate frame onto ``X_a``'s.

    Both maps hold the same physical points pixel for pixel. Pixels with
    confidence below ``min_conf`` are dropped; the rest are weighted by their
    confidence.
    """
    if X_a.shape != X_b.shape:
        raise ShapeError(f"point maps differ in shape: {X_a.shape} vs {X_b.shape}")
    conf = np.ones(X_a.shape) if confidence is None else np.asarray(confidence, dtype=np.float64)
    conf = conf.reshape(X_a.shape)
    keep = conf >= min_conf
    if min_conf <= 0:
        keep &= conf > 0
    if int(keep.sum()) < 3:
        raise InsufficientSupportError(f"only {int(keep.sum())} pixels at confidence >= {min_conf}")
    sim = umeyama_align(X_b.xyz[keep], X_a.xyz[keep], with_scale=False, weights=conf[keep])
    return sim.pose
