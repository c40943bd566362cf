"""Self-supervised training objectives on point maps.

Photometric loss (SSIM + L1), confidence-weighted photometric loss and the
geometry consistency loss (flow term + pose term), all as scalar reports
with per-term breakdowns, plus analytic subgradients of the L1 parts.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .arraycore import ShapeError, as_grid, avg_pool
from .geometry import FlowField, PointMap, PoseSE3, apply_pose
from .warp import warp_pointmap_by_flow


class EmptySupportError(ValueError):
    """No valid pixels contribute to a loss."""


class ConfidenceFloorError(ValueError):
    """A confidence value lies below the configured floor."""


class UnsupportedTermError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    beta: float = 0.2
    lambda_conf: float = 1.0
    lambda_photo: float = 1.0
    lambda_flow: float = 1.0
    lambda_pose: float = 1.0
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    ssim_window: int = 3
    conf_floor: float = 1.0
    # "symmetric": X^{t;t-1} is carried into frame t for the second pose summand.
    # "literal": both summands derive from X^{t-1;t}.
    pose_term: str = "symmetric"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        for name in ("lambda_conf", "lambda_photo", "lambda_flow", "lambda_pose"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if not (self.ssim_c1 > 0 and self.ssim_c2 > 0):
            raise ValueError("SSIM constants must be positive")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")
        if not self.conf_floor > 0:
            raise ValueError("conf_floor must be positive")
        if self.pose_term not in ("symmetric", "literal"):
            raise ValueError(f"unknown pose_term {self.pose_term!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown loss config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    total: float
    terms: dict
    weights: dict = field(default_factory=dict)
    per_pixel: dict = field(default_factory=dict)
    valid_counts: dict = field(default_factory=dict)

    def to_dict(self, config: Optional[LossConfig] = None) -> dict:
        d = {"total": self.total, "terms": dict(self.terms), "valid_counts": dict(self.valid_counts)}
        if config is not None:
            d["config"] = config.to_dict()
        return d

    def to_json(self, config: Optional[LossConfig] = None) -> str:
        return json.dumps(self.to_dict(config), sort_keys=True)


def _weights(mask, shape) -> np.ndarray:
    m = np.ones(shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(shape)
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask weights must lie in [0, 1]")
    return m


def _weighted_mean(values, w, what: str) -> float:
    total = float(w.sum())
    if total <= 0:
        raise EmptySupportError(f"{what}: no valid pixels")
    return float((values * w).sum() / total)


def ssim_map(a, b, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pixel, per-channel SSIM over a uniform window with reflection padding."""
    a = as_grid(a, name="a")
    b = as_grid(b, name="b")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    k = cfg.ssim_window
    r = k // 2

    def pool(x):
        if r == 0:
            return x
        mode = "reflect" if min(x.shape[:2]) > r else "edge"
        return avg_pool(np.pad(x, ((r, r), (r, r), (0, 0)), mode=mode), k, 1)

    mu_a = pool(a)
    mu_b = pool(b)
    var_a = pool(a * a) - mu_a * mu_a
    var_b = pool(b * b) - mu_b * mu_b
    cov = pool(a * b) - mu_a * mu_b
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return np.clip(num / den, -1.0, 1.0)


def photometric_map(I_cal, I_rec, mask=None, cfg: LossConfig = LossConfig()):
    """Per-pixel photometric error split into its SSIM and L1 parts, each (H, W)."""
    I_cal = as_grid(I_cal, name="calibrated image")
    I_rec = as_grid(I_rec, name="reconstructed image")
    if I_cal.shape != I_rec.shape:
        raise ShapeError(f"image shapes differ: {I_cal.shape} vs {I_rec.shape}")
    w = _weights(mask, I_cal.shape[:2])
    # invalid reconstructions must not leak into neighbouring SSIM windows
    rec = np.where(w[..., None] > 0, I_rec, I_cal)
    s = ssim_map(I_cal, rec, cfg)
    ssim_part = cfg.alpha * np.mean((1.0 - s) / 2.0, axis=2)
    l1_part = (1.0 - cfg.alpha) * np.mean(np.abs(I_cal - rec), axis=2)
    return ssim_part, l1_part, w


def photometric_loss(I_cal, I_rec, mask=None, cfg: LossConfig = LossConfig()) -> LossReport:
    ssim_part, l1_part, w = photometric_map(I_cal, I_rec, mask, cfg)
    per_pixel = ssim_part + l1_part
    s = _weighted_mean(ssim_part, w, "photometric loss")
    l1 = _weighted_mean(l1_part, w, "photometric loss")
    return LossReport(
        total=s + l1,
        terms={"ssim": s, "l1": l1},
        weights={"ssim": 1.0, "l1": 1.0},
        per_pixel={"photometric": per_pixel},
        valid_counts={"N": int((w > 0).sum())},
    )


def check_confidence(C, cfg: LossConfig = LossConfig()) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim == 3:
        C = C[..., 0]
    if not np.all(np.isfinite(C)):
        raise ConfidenceFloorError("confidence map has non-finite values")
    low = C < cfg.conf_floor
    if np.any(low):
        raise ConfidenceFloorError(
            f"{int(low.sum())} confidence values below floor {cfg.conf_floor} (min {C.min():.6g})")
    return C


def confidence_objective(C, l, beta: float):
    """Per-pixel confidence-aware term ``C*l - beta*log(C)``."""
    return C * l - beta * np.log(C)


def confidence_weighted_loss(l_photo_t, C_t, l_photo_tm1, masks=(None, None),
                             cfg: LossConfig = LossConfig()) -> LossReport:
    """Confidence-aware photometric term on frame t plus plain photometric term on t-1.

    ``l_photo_t`` and ``l_photo_tm1`` are per-pixel photometric maps; the
    ``-beta*log C`` regularizer sits inside the per-pixel mean.
    """
    l_t = np.asarray(l_photo_t, dtype=np.float64)
    l_tm1 = np.asarray(l_photo_tm1, dtype=np.float64)
    C = check_confidence(C_t, cfg).reshape(l_t.shape)
    m_t = _weights(masks[0], l_t.shape)
    m_tm1 = _weights(masks[1], l_tm1.shape)
    conf_term = _weighted_mean(confidence_objective(C, l_t, cfg.beta), m_t, "confidence-aware term")
    photo_term = _weighted_mean(l_tm1, m_tm1, "photometric term (t-1)")
    return LossReport(
        total=cfg.lambda_conf * conf_term + cfg.lambda_photo * photo_term,
        terms={"conf_aware": conf_term, "photo_prev": photo_term},
        weights={"conf_aware": cfg.lambda_conf, "photo_prev": cfg.lambda_photo},
        valid_counts={"N_t": int((m_t > 0).sum()), "N_tm1": int((m_tm1 > 0).sum())},
    )


@dataclass(frozen=True)
class GeometryInputs:
    """The four point maps, two flows, two occlusion masks and two poses of a frame pair."""

    X_t_t: PointMap
    X_tm1_tm1: PointMap
    X_tm1_t: PointMap
    X_t_tm1: PointMap
    F_t_from_tm1: FlowField
    F_tm1_from_t: FlowField
    M_t_from_tm1: np.ndarray
    M_tm1_from_t: np.ndarray
    T_t_to_tm1: PoseSE3
    T_tm1_to_t: PoseSE3

    def scaled(self, s: float) -> "GeometryInputs":
        sc = lambda X: PointMap(X.xyz * s, X.source_frame, X.coord_frame)
        return replace(self, X_t_t=sc(self.X_t_t), X_tm1_tm1=sc(self.X_tm1_tm1),
                       X_tm1_t=sc(self.X_tm1_t), X_t_tm1=sc(self.X_t_tm1),
                       T_t_to_tm1=self.T_t_to_tm1.with_translation(self.T_t_to_tm1.t * s),
                       T_tm1_to_t=self.T_tm1_to_t.with_translation(self.T_tm1_to_t.t * s))


def _flow_residuals(g: GeometryInputs):
    # F^{t-1<-t} pulls X^{t;t} onto frame t-1's grid -> compare with X^{t-1;t}
    hat_tm1_t, inb_a = warp_pointmap_by_flow(g.X_t_t, g.F_tm1_from_t)
    # F^{t<-t-1} pulls X^{t-1;t-1} onto frame t's grid -> compare with X^{t;t-1}
    hat_t_tm1, inb_b = warp_pointmap_by_flow(g.X_tm1_tm1, g.F_t_from_tm1)
    w_a = _weights(g.M_tm1_from_t, g.X_tm1_t.shape) * inb_a
    w_b = _weights(g.M_t_from_tm1, g.X_t_tm1.shape) * inb_b
    r_a = g.X_tm1_t.xyz - hat_tm1_t.xyz
    r_b = g.X_t_tm1.xyz - hat_t_tm1.xyz
    return r_a, w_a, r_b, w_b


def _pose_residuals(g: GeometryInputs, cfg: LossConfig):
    hat_tm1_tm1 = apply_pose(g.T_t_to_tm1, g.X_tm1_t, target_frame=g.X_tm1_tm1.coord_frame)
    if cfg.pose_term == "symmetric":
        hat_t_t = apply_pose(g.T_tm1_to_t, g.X_t_tm1, target_frame=g.X_t_t.coord_frame)
    else:
        hat_t_t = apply_pose(g.T_tm1_to_t, hat_tm1_tm1, target_frame=g.X_t_t.coord_frame)
    return g.X_tm1_tm1.xyz - hat_tm1_tm1.xyz, g.X_t_t.xyz - hat_t_t.xyz


def geometry_consistency_loss(g: GeometryInputs, cfg: LossConfig = LossConfig()) -> LossReport:
    """Flow alignment term plus pose transformation term, each an L1 mean."""
    r_a, w_a, r_b, w_b = _flow_residuals(g)
    flow_a = _weighted_mean(np.abs(r_a).sum(axis=2), w_a, "flow term (t-1 grid)")
    flow_b = _weighted_mean(np.abs(r_b).sum(axis=2), w_b, "flow term (t grid)")
    p_a, p_b = _pose_residuals(g, cfg)
    pose_a = float(np.abs(p_a).sum(axis=2).mean())
    pose_b = float(np.abs(p_b).sum(axis=2).mean())
    t_flow = flow_a + flow_b
    t_pose = pose_a + pose_b
    return LossReport(
        total=cfg.lambda_flow * t_flow + cfg.lambda_pose * t_pose,
        terms={"t_flow": t_flow, "t_pose": t_pose,
               "t_flow_tm1_grid": flow_a, "t_flow_t_grid": flow_b,
               "t_pose_tm1": pose_a, "t_pose_t": pose_b},
        weights={"t_flow": cfg.lambda_flow, "t_pose": cfg.lambda_pose},
        valid_counts={"flow_tm1_grid": int((w_a > 0).sum()), "flow_t_grid": int((w_b > 0).sum())},
    )


def loss_gradients(term: str, cfg: LossConfig = LossConfig(), **inputs) -> dict:
    """Analytic subgradients of the L1-based terms (zero at zero residual).

    ``term="l1_photo"`` takes ``I_cal, I_rec, mask``: gradient of the weighted
    (1-alpha) L1 part. ``term="t_flow"`` and ``term="t_pose"`` take
    ``geometry=GeometryInputs`` and differentiate ``lambda * term``; the flow
    gradient is w.r.t. the unwarped-side maps only.
    """
    if term == "l1_photo":
        a = as_grid(inputs["I_cal"])
        b = as_grid(inputs["I_rec"])
        w = _weights(inputs.get("mask"), a.shape[:2])
        total = float(w.sum())
        if total <= 0:
            raise EmptySupportError("l1_photo: no valid pixels")
        g = -(1.0 - cfg.alpha) * np.sign(a - b) * (w / (total * a.shape[2]))[..., None]
        return {"I_rec": g, "I_cal": -g}
    if term == "t_flow":
        geo: GeometryInputs = inputs["geometry"]
        r_a, w_a, r_b, w_b = _flow_residuals(geo)
        if w_a.sum() <= 0 or w_b.sum() <= 0:
            raise EmptySupportError("t_flow: no valid pixels")
        lam = cfg.lambda_flow
        return {
            "X_tm1_t": lam * np.sign(r_a) * (w_a / w_a.sum())[..., None],
            "X_t_tm1": lam * np.sign(r_b) * (w_b / w_b.sum())[..., None],
        }
    if term == "t_pose":
        if cfg.pose_term != "symmetric":
            raise UnsupportedTermError("t_pose gradients are only provided for the symmetric variant")
        geo = inputs["geometry"]
        p_a, p_b = _pose_residuals(geo, cfg)
        lam = cfg.lambda_pose
        s_a = lam * np.sign(p_a) / (p_a.shape[0] * p_a.shape[1])
        s_b = lam * np.sign(p_b) / (p_b.shape[0] * p_b.shape[1])
        return {
            "X_tm1_tm1": s_a,
            "X_t_t": s_b,
            "X_tm1_t": -(s_a @ geo.T_t_to_tm1.R),
            "X_t_tm1": -(s_b @ geo.T_tm1_to_t.R),
            "t_t_to_tm1": -s_a.sum(axis=(0, 1)),
            "t_tm1_to_t": -s_b.sum(axis=(0, 1)),
        }
    raise UnsupportedTermError(f"no analytic gradient for term {term!r}")
