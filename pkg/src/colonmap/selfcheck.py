"""Embedded oracle suite run by ``colonmap selfcheck``.

Each check returns a :class:`CheckResult`. Setting ``COLONMAP_SELFCHECK_INJECT``
to a comma-separated list of fault names (``ssim_c1``, ``umeyama_sign``,
``focal_scale``) deliberately corrupts the corresponding computation so the
suite can be shown to fail.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import oracles
from .arraycore import grad_check
from .camera import Intrinsics, estimate_focal_weiszfeld, unproject
from .drm import FusionAdapterParams, drm_forward, fusion_adapter_forward
from .geometry import FlowField, PointMap, PoseSE3, Trajectory, rotation_error, umeyama_align
from .losses import (GeometryInputs, LossConfig, confidence_objective, geometry_consistency_loss,
                     loss_gradients, photometric_loss, ssim_map)
from .metrics import KdTree3, ate, depth_metrics
from .warp import reconstruct_image, warp_pointmap_by_flow

INJECT_ENV = "COLONMAP_SELFCHECK_INJECT"


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.passed))


def _injected() -> set:
    return {s.strip() for s in os.environ.get(INJECT_ENV, "").split(",") if s.strip()}


def check_conv_oracle() -> CheckResult:
    rng = np.random.default_rng(11)
    params = FusionAdapterParams.random(4, 3, rng=rng)
    cnn = rng.normal(size=(8, 8, 4))
    vit = rng.normal(size=(4, 4, 3))
    dev = float(np.abs(fusion_adapter_forward(cnn, vit, params) - oracles.loop_fusion_forward(cnn, vit, params)).max())
    zero = FusionAdapterParams.zero_init(4, 3, rng=rng)
    pyramid = [cnn] * 5
    feats = [rng.normal(size=(4, 4, 3)) for _ in range(7)]
    out = drm_forward(pyramid, feats, [zero] * 5)
    inert = all(np.array_equal(a, b) for a, b in zip(out, feats))
    return CheckResult("conv_vs_loop_oracle", dev <= 1e-6 and inert,
                       f"max dev {dev:.2e}, zero-init inert={inert}")


def check_umeyama() -> CheckResult:
    rng = np.random.default_rng(12)
    src = rng.normal(size=(50, 3))
    truth = PoseSE3(rng.normal(size=4), rng.normal(size=3))
    s = 1.7
    dst = s * truth.apply(src)
    if "umeyama_sign" in _injected():
        dst = dst * np.array([1.0, 1.0, -1.0])
    est = umeyama_align(src, dst)
    hs, hR, ht = oracles.horn_align(src, dst)
    rot_err = rotation_error(est.pose, truth)
    ok = rot_err < 1e-9 and abs(est.scale - s) < 1e-9 and np.abs(est.pose.R - hR).max() < 1e-9
    return CheckResult("umeyama_round_trip", bool(ok),
                       f"rot err {rot_err:.2e} rad, scale err {abs(est.scale - s):.2e}, horn dev {np.abs(est.pose.R - hR).max():.2e}")


def check_weiszfeld() -> CheckResult:
    worst = 0.0
    iters = 0
    for k, f in enumerate((120.0, 310.0, 575.0)):
        K = Intrinsics.centered(f, 48, 36)
        rng = np.random.default_rng(100 + k)
        depth = 2.0 + 0.3 * np.sin(np.arange(48)[None, :] / 7.0) + rng.uniform(0, 0.2, (36, 48))
        X = unproject(K, depth)
        if "focal_scale" in _injected():
            X = PointMap(X.xyz * np.array([1.001, 1.0, 1.0]))
        est = estimate_focal_weiszfeld(X)
        worst = max(worst, abs(est.focal - f) / f)
        iters = max(iters, est.iterations)
    return CheckResult("weiszfeld_recovery", worst <= 1e-6 and iters <= 10,
                       f"max rel err {worst:.2e}, max iterations {iters}")


def gradient_configuration(seed: int, h: int = 6, w: int = 7, margin: float = 0.05) -> GeometryInputs:
    """Random geometry inputs whose L1 residuals all stay at least ``margin`` from zero."""
    rng = np.random.default_rng(seed)
    X_t_t = PointMap(rng.normal(0, 0.5, (h, w, 3)) + [0, 0, 3], 1, 1)
    X_tm1_tm1 = PointMap(rng.normal(0, 0.5, (h, w, 3)) + [0, 0, 3], 0, 0)
    F_tm1_from_t = FlowField(rng.uniform(-1.0, 1.0, (h, w, 2)), 0, 1)
    F_t_from_tm1 = FlowField(rng.uniform(-1.0, 1.0, (h, w, 2)), 1, 0)
    T_a = PoseSE3(rng.normal(size=4), rng.normal(0, 0.3, 3))
    T_b = PoseSE3(rng.normal(size=4), rng.normal(0, 0.3, 3))

    def offset(shape):
        return rng.choice([-1.0, 1.0], shape) * rng.uniform(margin, 4 * margin, shape)

    hat_a, _ = warp_pointmap_by_flow(X_t_t, F_tm1_from_t)
    hat_b, _ = warp_pointmap_by_flow(X_tm1_tm1, F_t_from_tm1)
    X_tm1_t = PointMap(hat_a.xyz + offset((h, w, 3)), 0, 1)
    X_t_tm1 = PointMap(hat_b.xyz + offset((h, w, 3)), 1, 0)
    # pose residuals: move the target maps away from the transformed ones
    X_tm1_tm1 = PointMap(T_a.apply(X_tm1_t.xyz) + offset((h, w, 3)), 0, 0)
    X_t_t = PointMap(T_b.apply(X_t_tm1.xyz) + offset((h, w, 3)), 1, 1)
    masks = rng.uniform(0.2, 1.0, (2, h, w))
    return GeometryInputs(X_t_t, X_tm1_tm1, X_tm1_t, X_t_tm1, F_t_from_tm1, F_tm1_from_t,
                          masks[0], masks[1], T_a, T_b)


def gradient_check_suite(seeds=range(10), step: float = 1e-4, abs_floor: float = 1e-8) -> dict:
    """Worst relative deviation per term over the seeded configurations.

    Gradient entries below ``abs_floor`` on both sides (e.g. translation
    gradients whose sign contributions cancel) are not compared relatively.
    """
    from dataclasses import replace

    cfg = LossConfig(lambda_flow=0.7, lambda_pose=1.3)
    worst = {"l1_photo": 0.0, "t_flow": 0.0, "t_pose": 0.0}
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        I_cal = rng.uniform(0.2, 0.8, (5, 6, 3))
        I_rec = I_cal + rng.choice([-1.0, 1.0], I_cal.shape) * rng.uniform(0.01, 0.05, I_cal.shape)
        mask = rng.uniform(0.1, 1.0, (5, 6))

        def l1(rec):
            return photometric_loss(I_cal, rec, mask, cfg).terms["l1"]

        g = loss_gradients("l1_photo", cfg, I_cal=I_cal, I_rec=I_rec, mask=mask)["I_rec"]
        worst["l1_photo"] = max(worst["l1_photo"], grad_check(l1, I_rec, g, step=step, abs_floor=abs_floor).max_rel_deviation)

        geo = gradient_configuration(seed)
        gf = loss_gradients("t_flow", cfg, geometry=geo)
        gp = loss_gradients("t_pose", cfg, geometry=geo)
        for name in ("X_tm1_t", "X_t_tm1"):
            def fl(x, name=name):
                X = getattr(geo, name)
                return cfg.lambda_flow * geometry_consistency_loss(
                    replace(geo, **{name: PointMap(x, X.source_frame, X.coord_frame)}), cfg).terms["t_flow"]
            rep = grad_check(fl, getattr(geo, name).xyz, gf[name], step=step, abs_floor=abs_floor)
            worst["t_flow"] = max(worst["t_flow"], rep.max_rel_deviation)
        for name in ("X_tm1_tm1", "X_t_t", "X_tm1_t", "X_t_tm1"):
            def fp(x, name=name):
                X = getattr(geo, name)
                return cfg.lambda_pose * geometry_consistency_loss(
                    replace(geo, **{name: PointMap(x, X.source_frame, X.coord_frame)}), cfg).terms["t_pose"]
            rep = grad_check(fp, getattr(geo, name).xyz, gp[name], step=step, abs_floor=abs_floor)
            worst["t_pose"] = max(worst["t_pose"], rep.max_rel_deviation)
        for name, key in (("T_t_to_tm1", "t_t_to_tm1"), ("T_tm1_to_t", "t_tm1_to_t")):
            def ft(t, name=name):
                T = getattr(geo, name)
                return cfg.lambda_pose * geometry_consistency_loss(
                    replace(geo, **{name: T.with_translation(t)}), cfg).terms["t_pose"]
            rep = grad_check(ft, getattr(geo, name).t, gp[key], step=step, abs_floor=abs_floor)
            worst["t_pose"] = max(worst["t_pose"], rep.max_rel_deviation)
    return worst


def check_gradients() -> CheckResult:
    worst = gradient_check_suite(range(3))
    return CheckResult("gradient_checks", max(worst.values()) <= 1e-3,
                       ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def check_kdtree() -> CheckResult:
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(400, 3))
    qs = rng.normal(size=(200, 3))
    d, i = KdTree3(pts).query(qs)
    bd, bi = oracles.brute_nearest(qs, pts)
    ok = np.array_equal(d, bd) and np.array_equal(i, bi)
    return CheckResult("kdtree_vs_brute_force", bool(ok), f"{int((d != bd).sum())} distance mismatches")


def check_ssim_constants() -> CheckResult:
    cfg = LossConfig(ssim_c1=1e-2) if "ssim_c1" in _injected() else LossConfig()
    a = np.full((6, 6, 3), 0.5)
    b = np.full((6, 6, 3), 0.6)
    got = float(ssim_map(a, b, cfg).mean())
    c1 = 1e-4
    expected = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
    return CheckResult("ssim_closed_form", abs(got - expected) <= 1e-12,
                       f"SSIM {got:.9f}, closed form {expected:.9f}")


def check_confidence_minimizer() -> CheckResult:
    beta = 0.2
    worst = 0.0
    for l in (0.01, 0.1, 1.0):
        c = oracles.grid_argmin(lambda C: confidence_objective(C, l, beta), 1.0, 40.0, 390001)
        worst = max(worst, abs(c - max(1.0, beta / l)))
    return CheckResult("confidence_minimizer", worst <= 1e-4, f"max deviation {worst:.2e}")


def check_warp_identity() -> CheckResult:
    rng = np.random.default_rng(14)
    K = Intrinsics.centered(50.0, 20, 16)
    X = unproject(K, rng.uniform(1.0, 3.0, (16, 20)))
    img = rng.uniform(size=(16, 20, 3))
    rec, mask = reconstruct_image(K, PoseSE3.identity(), X, img)
    diff = float(np.abs(rec - img)[mask > 0].max())
    return CheckResult("warp_identity", diff == 0.0 and mask.all(), f"max abs diff {diff:.1e}")


def check_metrics() -> CheckResult:
    rng = np.random.default_rng(15)
    gt = Trajectory.from_poses([PoseSE3(rng.normal(size=4), rng.normal(size=3)) for _ in range(8)])
    pred = Trajectory.from_poses([PoseSE3(p.rotation, p.translation + rng.normal(0, 0.05, 3)) for p in gt.poses])
    d_ate = abs(ate(pred, gt) - oracles.ate_reference(pred, gt))
    p = rng.uniform(1, 5, (12, 12))
    g = rng.uniform(1, 5, (12, 12))
    ref = oracles.depth_metrics_reference(p, g)
    got = depth_metrics(p, g).to_dict()
    d_depth = max(abs(got[k] - ref[k]) for k in ref)
    return CheckResult("metric_oracles", d_ate <= 1e-9 and d_depth <= 1e-9,
                       f"ATE dev {d_ate:.1e}, depth dev {d_depth:.1e}")


CHECKS = (check_conv_oracle, check_umeyama, check_weiszfeld, check_gradients, check_kdtree,
          check_ssim_constants, check_confidence_minimizer, check_warp_identity, check_metrics)


def run_selfcheck() -> list:
    results = []
    for fn in CHECKS:
        try:
            results.append(fn())
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(fn.__name__.replace("check_", ""), False, f"{type(exc).__name__}: {exc}"))
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}" for r in results]
    return "\n".join(lines)
