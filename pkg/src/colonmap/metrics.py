"""Evaluation protocol: trajectory, depth and point-map metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .arraycore import ShapeError
from .geometry import (PointMap, PoseSE3, Sim3Transform, Trajectory, rotation_angle,
                       umeyama_align)


class DegenerateMetricError(ValueError):
    pass


def lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise DegenerateMetricError("median of an empty set")
    return float(v[(v.size - 1) // 2])


def _valid(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[..., 0]
    return m.reshape(shape) > 0


def _plane(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[..., 0] if a.ndim == 3 else a


def median_scale(pred, gt, mask=None) -> float:
    """``median(gt) / median(pred)`` over the mask, lower median for even counts."""
    pred, gt = _plane(pred), _plane(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    m = _valid(mask, pred.shape)
    if not m.any():
        raise DegenerateMetricError("no valid pixels")
    mp = lower_median(pred[m])
    if mp <= 0:
        raise DegenerateMetricError(f"median prediction {mp} is not positive")
    return lower_median(gt[m]) / mp


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta: float
    scale_used: float

    def to_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, mask=None, apply_median_scaling: bool = True,
                  clamp: Optional[tuple] = None, delta_threshold: float = 1.25) -> DepthEvalResult:
    pred, gt = _plane(pred), _plane(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    m = _valid(mask, pred.shape)
    if not m.any():
        raise DegenerateMetricError("no valid pixels")
    d = pred[m]
    g = gt[m]
    if np.any(g <= 0):
        raise DegenerateMetricError("ground-truth depth must be positive on the mask")
    scale = median_scale(pred, gt, m) if apply_median_scaling else 1.0
    d = d * scale
    if clamp is not None:
        d = np.clip(d, clamp[0], clamp[1])
    if np.any(d <= 0):
        raise DegenerateMetricError("non-positive predicted depth")
    diff = d - g
    ratio = np.maximum(d / g, g / d)
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        delta=float(np.mean(ratio < delta_threshold)),
        scale_used=float(scale),
    )


def _check_pair(pred: Trajectory, gt: Trajectory):
    if len(pred) != len(gt):
        raise ShapeError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")


def align_trajectory(pred: Trajectory, gt: Trajectory, alignment: str = "sim3") -> Sim3Transform:
    if alignment == "none":
        return Sim3Transform()
    if alignment not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment {alignment!r}")
    return umeyama_align(pred.positions(), gt.positions(), with_scale=alignment == "sim3")


def ate(pred: Trajectory, gt: Trajectory, alignment: str = "sim3",
        transform: Optional[Sim3Transform] = None) -> float:
    """RMSE of position residuals after the requested alignment of ``pred`` onto ``gt``.

    A precomputed ``transform`` (e.g. fitted on the whole sequence while
    scoring a subset) overrides ``alignment``.
    """
    _check_pair(pred, gt)
    if len(gt) == 0:
        raise ShapeError("empty trajectory")
    S = transform if transform is not None else align_trajectory(pred, gt, alignment)
    res = gt.positions() - S.apply(pred.positions())
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def rpe(pred: Trajectory, gt: Trajectory, delta: int = 1, alignment: str = "none") -> tuple[float, float]:
    """(translation RMSE, rotation RMSE in degrees) of relative motions over ``delta`` frames.

    With ``alignment="sim3"`` the predicted translations are first rescaled by
    the trajectory-level Umeyama scale.
    """
    _check_pair(pred, gt)
    if delta < 1 or len(gt) < delta + 1:
        raise ShapeError(f"trajectory of length {len(gt)} too short for delta {delta}")
    scale = align_trajectory(pred, gt, alignment).scale if alignment != "none" else 1.0
    terr, rerr = [], []
    for i in range(len(gt) - delta):
        rel_gt = gt[i].inverse() @ gt[i + delta]
        rel_pr = pred[i].inverse() @ pred[i + delta]
        rel_pr = rel_pr.with_translation(rel_pr.t * scale)
        E = rel_gt.inverse() @ rel_pr
        terr.append(float(np.linalg.norm(E.t)))
        rerr.append(math.degrees(rotation_angle(E)))
    terr, rerr = np.array(terr), np.array(rerr)
    return float(np.sqrt(np.mean(terr ** 2))), float(np.sqrt(np.mean(rerr ** 2)))


def snippet_ate(pred: Trajectory, gt: Trajectory, snippet_len: int = 5) -> float:
    """Mean ATE over all windows of ``snippet_len`` consecutive poses.

    Each window is re-expressed relative to its first pose, then a single
    least-squares scale maps predicted onto ground-truth positions.
    """
    _check_pair(pred, gt)
    if snippet_len < 2 or len(gt) < snippet_len:
        raise ShapeError(f"trajectory of length {len(gt)} too short for {snippet_len}-frame snippets")
    errs = []
    for s in range(len(gt) - snippet_len + 1):
        g0inv = gt[s].inverse()
        p0inv = pred[s].inverse()
        g = np.array([(g0inv @ gt[s + k]).t for k in range(snippet_len)])
        p = np.array([(p0inv @ pred[s + k]).t for k in range(snippet_len)])
        pp = float(np.sum(p * p))
        scale = float(np.sum(g * p)) / pp if pp > 0 else 1.0
        res = scale * p - g
        errs.append(math.sqrt(float(np.sum(res * res)) / snippet_len))
    return float(np.mean(errs))


class KdTree3:
    """Exact nearest-neighbour index over 3-D points.

    Median splits on the axis of largest spread, leaves of at most
    ``leaf_size`` points. Squared distances are evaluated as
    ``dx*dx + dy*dy + dz*dz`` so results match a brute-force scan bit for bit.
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if pts.shape[0] == 0:
            raise ValueError("cannot index an empty point set")
        self.points = pts
        self.leaf_size = leaf_size
        self._order = np.arange(pts.shape[0])
        # node: (lo, hi, axis, split, left, right); leaves have axis -1
        self._nodes: list = []
        self._root = self._build(0, pts.shape[0])
        self._leaf_pts = {}

    def _build(self, lo: int, hi: int) -> int:
        idx = self._order[lo:hi]
        node_id = len(self._nodes)
        self._nodes.append(None)
        if hi - lo <= self.leaf_size:
            self._nodes[node_id] = (lo, hi, -1, 0.0, -1, -1)
            return node_id
        sub = self.points[idx]
        axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        order = np.argsort(sub[:, axis], kind="stable")
        self._order[lo:hi] = idx[order]
        mid = (lo + hi) // 2
        split = float(self.points[self._order[mid], axis])
        left = self._build(lo, mid)
        right = self._build(mid, hi)
        self._nodes[node_id] = (lo, hi, axis, split, left, right)
        return node_id

    def _leaf(self, lo, hi):
        key = (lo, hi)
        if key not in self._leaf_pts:
            idx = self._order[lo:hi]
            self._leaf_pts[key] = (idx, self.points[idx])
        return self._leaf_pts[key]

    def query_one(self, q) -> tuple[float, int]:
        qx, qy, qz = (float(v) for v in q)
        qa = (qx, qy, qz)
        best_d2 = math.inf
        best_i = -1
        stack = [(self._root, 0.0)]
        while stack:
            node_id, bound = stack.pop()
            if bound > best_d2:
                continue
            lo, hi, axis, split, left, right = self._nodes[node_id]
            if axis < 0:
                idx, pts = self._leaf(lo, hi)
                dx = qx - pts[:, 0]
                dy = qy - pts[:, 1]
                dz = qz - pts[:, 2]
                d2 = dx * dx + dy * dy + dz * dz
                m = d2.min()
                # leaf order is spatial, not index order: resolve ties by index
                i = int(idx[d2 == m].min())
                if m < best_d2 or (m == best_d2 and i < best_i):
                    best_d2 = float(m)
                    best_i = i
                continue
            diff = qa[axis] - split
            near, far = (left, right) if diff < 0 else (right, left)
            stack.append((far, diff * diff))
            stack.append((near, bound))
        return math.sqrt(best_d2), best_i

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        qs = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        dist = np.empty(qs.shape[0])
        index = np.empty(qs.shape[0], dtype=np.intp)
        for n, q in enumerate(qs):
            dist[n], index[n] = self.query_one(q)
        return dist, index


def nearest_distances(queries, points) -> np.ndarray:
    return KdTree3(points).query(queries)[0]


@dataclass(frozen=True)
class PointMapEvalResult:
    accuracy: float
    completeness: float
    sq_rel: float
    rmse_log: float
    scale_used: float
    # sq_rel / rmse_log use per-pixel correspondences normalized by GT point norm
    definition: str = "per-pixel-correspondence"

    def to_dict(self) -> dict:
        return asdict(self)


def pointmap_metrics(pred: PointMap, gt: PointMap, mask=None, align: bool = False) -> PointMapEvalResult:
    """Accuracy/completeness via nearest neighbours plus per-pixel SqRel and RMSE log.

    ``pred`` is median-scaled on its z channel first, then optionally
    Sim(3)-aligned onto ``gt``. SqRel is ``mean(|p-g|^2 / |g|)``; RMSE log is
    computed on point norms.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    m = _valid(mask, pred.shape)
    m &= (gt.xyz[..., 2] > 0) & (pred.xyz[..., 2] > 0)
    if not m.any():
        raise DegenerateMetricError("empty valid set")
    scale = median_scale(pred.xyz[..., 2], gt.xyz[..., 2], m)
    p = pred.xyz[m] * scale
    g = gt.xyz[m]
    if align:
        p = umeyama_align(p, g, with_scale=True).apply(p)
    acc = float(np.mean(KdTree3(g).query(p)[0]))
    comp = float(np.mean(KdTree3(p).query(g)[0]))
    gn = np.linalg.norm(g, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(gn <= 0) or np.any(pn <= 0):
        raise DegenerateMetricError("zero-norm point in evaluation set")
    d2 = np.sum((p - g) ** 2, axis=1)
    return PointMapEvalResult(
        accuracy=acc,
        completeness=comp,
        sq_rel=float(np.mean(d2 / gn)),
        rmse_log=float(np.sqrt(np.mean((np.log(pn) - np.log(gn)) ** 2))),
        scale_used=float(scale),
    )
