import numpy as np
import pytest

from colonmap import oracles
from colonmap.arraycore import grad_check
from colonmap.geometry import FlowField, PointMap, PoseSE3
from colonmap.losses import (ConfidenceFloorError, EmptySupportError, GeometryInputs, LossConfig,
                             UnsupportedTermError, confidence_objective, confidence_weighted_loss,
                             geometry_consistency_loss, loss_gradients, photometric_loss, ssim_map)
from colonmap.pipeline import pair_geometry

# constant-image SSIM with c1 = 1e-4: (2*0.5*0.6 + c1) / (0.5^2 + 0.6^2 + c1)
SSIM_CONST = 0.6001 / 0.6101
PHOTO_CONST = 0.85 * (1 - SSIM_CONST) / 2 + 0.15 * 0.1


def test_ssim_identical_is_one(rng):
    a = rng.uniform(size=(7, 9, 3))
    assert np.abs(ssim_map(a, a) - 1).max() < 1e-12


def test_ssim_constant_images_closed_form():
    s = ssim_map(np.full((5, 6, 3), 0.5), np.full((5, 6, 3), 0.6))
    assert abs(SSIM_CONST - 0.9836092443861662) < 1e-15
    assert np.abs(s - SSIM_CONST).max() < 1e-12


def test_ssim_checker_anticorrelated_is_negative():
    # zero-mean +-1 patch: the mean factor is exactly 1, the covariance factor negative
    a = np.array([[1.0, -1.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 1.0, -1.0]])
    s = ssim_map(a, -a)[1, 1, 0]
    mu = a.mean()
    var = (a * a).mean() - mu * mu
    c1, c2 = 1e-4, 9e-4
    direct = ((2 * mu * -mu + c1) * (-2 * var + c2)) / ((2 * mu * mu + c1) * (2 * var + c2))
    assert s < 0 and abs(s - direct) < 1e-12


def test_photometric_identical_and_constant():
    a = np.full((6, 6, 3), 0.5)
    assert photometric_loss(a, a).total == 0.0
    rep = photometric_loss(a, np.full((6, 6, 3), 0.6))
    assert abs(rep.total - PHOTO_CONST) < 1e-12
    assert abs(PHOTO_CONST - 0.021966) < 1e-6
    assert rep.valid_counts["N"] == 36


def test_photometric_mask_contract(rng):
    a = rng.uniform(size=(10, 10, 3))
    b = a.copy()
    b[:, 5:] = rng.uniform(size=(10, 5, 3))
    m = np.zeros((10, 10))
    m[:, :3] = 1
    c = b.copy()
    c[:, 5:] = 0.0
    assert photometric_loss(a, b, m).total == photometric_loss(a, c, m).total
    assert photometric_loss(a, b, m).total == 0.0


def test_photometric_empty_support():
    with pytest.raises(EmptySupportError):
        photometric_loss(np.ones((3, 3, 1)), np.ones((3, 3, 1)), np.zeros((3, 3)))


def test_confidence_ones_reduces_to_means(rng):
    lt, ltm1 = rng.uniform(size=(4, 5)), rng.uniform(size=(4, 5))
    cfg = LossConfig(lambda_conf=0.7, lambda_photo=1.9)
    rep = confidence_weighted_loss(lt, np.ones((4, 5)), ltm1, cfg=cfg)
    assert abs(rep.total - (0.7 * lt.mean() + 1.9 * ltm1.mean())) < 1e-12
    assert confidence_weighted_loss(np.zeros((4, 5)), np.ones((4, 5)), np.zeros((4, 5))).total == 0.0


@pytest.mark.parametrize("l,beta", [(0.05, 0.2), (0.5, 0.2), (0.01, 0.3)])
def test_confidence_minimizer_matches_grid_search(l, beta):
    f = lambda C: confidence_objective(C, l, beta)
    ref = oracles.grid_argmin(f, 1.0, 50.0, 490001)
    assert abs(ref - max(1.0, beta / l)) <= 1e-4 * max(1.0, beta / l)


def test_confidence_floor_violation():
    with pytest.raises(ConfidenceFloorError):
        confidence_weighted_loss(np.ones((2, 2)), np.full((2, 2), 0.5), np.ones((2, 2)))


def static_inputs(rng, h=5, w=6):
    X = PointMap(rng.normal(size=(h, w, 3)) + [0, 0, 3])
    F = FlowField(np.zeros((h, w, 2)))
    M = np.ones((h, w))
    return GeometryInputs(X, X, X, X, F, F, M, M, PoseSE3(), PoseSE3())


def test_geometry_static_scene_zero(rng):
    rep = geometry_consistency_loss(static_inputs(rng))
    assert rep.total == 0.0 and rep.terms["t_flow"] == 0.0 and rep.terms["t_pose"] == 0.0


def test_geometry_rigid_motion_below_floor(tube_scene):
    spec, packets = tube_scene
    for t in (1, 5, 9):
        rep = geometry_consistency_loss(pair_geometry(packets[t - 1], packets[t]))
        assert rep.total < 1e-3


def test_pose_translation_offset_exact(tube_scene):
    _, packets = tube_scene
    prev, cur = packets[3], packets[4]
    T = prev.pose.inverse() @ cur.pose
    base = geometry_consistency_loss(pair_geometry(prev, cur))
    delta = np.array([0.03, -0.05, 0.01])
    rep = geometry_consistency_loss(pair_geometry(prev, cur, T_t_to_tm1=T.with_translation(T.t + delta)))
    inc = rep.terms["t_pose_tm1"] - base.terms["t_pose_tm1"]
    assert abs(inc - np.abs(delta).sum()) < 1e-9
    assert rep.terms["t_pose_t"] == base.terms["t_pose_t"]


def test_pose_term_monotone_in_offset(rng):
    g = static_inputs(rng)
    vals = []
    for s in np.linspace(0, 0.5, 6):
        g2 = GeometryInputs(**{**g.__dict__, "T_t_to_tm1": PoseSE3(translation=(s, -s, 0))})
        vals.append(geometry_consistency_loss(g2).terms["t_pose"])
    assert np.all(np.diff(vals) > 0)


def test_geometry_scale_homogeneous(tube_scene):
    _, packets = tube_scene
    g = pair_geometry(packets[1], packets[2])
    a = geometry_consistency_loss(g).total
    b = geometry_consistency_loss(g.scaled(3.0)).total
    assert abs(b - 3.0 * a) < 1e-9 * max(1.0, a)


def test_geometry_swap_symmetry(rng):
    h, w = 5, 6
    pm = lambda: PointMap(rng.normal(size=(h, w, 3)))
    fl = lambda: FlowField(rng.uniform(-0.5, 0.5, (h, w, 2)))
    X_t_t, X_tm1_tm1, X_tm1_t, X_t_tm1 = pm(), pm(), pm(), pm()
    F_a, F_b = fl(), fl()
    M_a, M_b = rng.uniform(size=(h, w)), rng.uniform(size=(h, w))
    T_a, T_b = PoseSE3(rng.normal(size=4), rng.normal(size=3)), PoseSE3(rng.normal(size=4), rng.normal(size=3))
    fwd = GeometryInputs(X_t_t, X_tm1_tm1, X_tm1_t, X_t_tm1, F_a, F_b, M_a, M_b, T_a, T_b)
    rev = GeometryInputs(X_tm1_tm1, X_t_t, X_t_tm1, X_tm1_t, F_b, F_a, M_b, M_a, T_b, T_a)
    a, b = geometry_consistency_loss(fwd), geometry_consistency_loss(rev)
    assert abs(a.total - b.total) < 1e-12


def test_literal_variant_ignores_cross_map(rng):
    g = static_inputs(rng)
    other = PointMap(g.X_t_tm1.xyz + 5.0)
    g2 = GeometryInputs(**{**g.__dict__, "X_t_tm1": other})
    lit = LossConfig(pose_term="literal")
    assert geometry_consistency_loss(g2, lit).terms["t_pose"] == 0.0
    assert geometry_consistency_loss(g2).terms["t_pose"] > 0.0


def test_geometry_empty_support(rng):
    g = static_inputs(rng)
    g2 = GeometryInputs(**{**g.__dict__, "M_t_from_tm1": np.zeros((5, 6))})
    with pytest.raises(EmptySupportError):
        geometry_consistency_loss(g2)


def test_l1_photometric_gradient_zero_at_identity(rng):
    a = rng.uniform(size=(4, 4, 3))
    g = loss_gradients("l1_photo", I_cal=a, I_rec=a)
    assert not g["I_rec"].any()


def test_pose_translation_gradient(rng):
    g = static_inputs(rng)
    delta = np.array([0.2, -0.1, 0.05])
    cfg = LossConfig(lambda_pose=2.0)
    g2 = GeometryInputs(**{**g.__dict__, "T_t_to_tm1": PoseSE3(translation=delta)})
    grads = loss_gradients("t_pose", cfg, geometry=g2)
    # residual X - (X + delta) = -delta everywhere -> d/dt of lambda*mean|.| = lambda*sign(delta)
    assert np.allclose(grads["t_t_to_tm1"], 2.0 * np.sign(delta), atol=1e-12)

    def f(t):
        gi = GeometryInputs(**{**g.__dict__, "T_t_to_tm1": PoseSE3(translation=t)})
        return cfg.lambda_pose * geometry_consistency_loss(gi, cfg).terms["t_pose"]

    assert grad_check(f, delta, grads["t_t_to_tm1"], step=1e-4, tolerance=1e-3).passed


def test_unsupported_gradient_terms(rng):
    with pytest.raises(UnsupportedTermError):
        loss_gradients("ssim")
    with pytest.raises(UnsupportedTermError):
        loss_gradients("t_pose", LossConfig(pose_term="literal"), geometry=static_inputs(rng))


def test_config_validation_and_dict():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.0)
    with pytest.raises(ValueError):
        LossConfig(pose_term="other")
    with pytest.raises(KeyError):
        LossConfig.from_dict({"gamma": 1.0})
    cfg = LossConfig(beta=0.3)
    assert LossConfig.from_dict(cfg.to_dict()) == cfg
