import math

import numpy as np
import pytest

from colonmap import oracles
from colonmap.arraycore import ShapeError
from colonmap.geometry import PointMap, PoseSE3, Sim3Transform, Trajectory
from colonmap.metrics import (DegenerateMetricError, KdTree3, ate, depth_metrics, lower_median, median_scale,
                              pointmap_metrics, rpe, snippet_ate)


def wavy_traj(rng, n=12):
    poses = []
    for k in range(n):
        poses.append(PoseSE3.from_axis_angle(rng.normal(size=3), 0.05 * k,
                                             t=(np.sin(0.4 * k), 0.3 * k, 0.1 * k * k)))
    return Trajectory.from_poses(poses)


def test_median_scale_examples(rng):
    gt = rng.uniform(1, 5, (6, 7))
    assert median_scale(gt, gt) == 1.0
    assert median_scale(gt / 2, gt) == 2.0
    pred = rng.uniform(1, 5, (6, 7))
    assert median_scale(pred, gt) == np.sort(gt.ravel())[20] / np.sort(pred.ravel())[20]
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
    with pytest.raises(DegenerateMetricError):
        median_scale(-gt, gt)


def test_depth_metrics_identity_and_scale(rng):
    gt = rng.uniform(1, 5, (6, 7))
    for pred in (gt, 2 * gt):
        r = depth_metrics(pred, gt)
        assert r.abs_rel < 1e-15 and r.rmse < 1e-14 and r.delta == 1.0


def test_depth_metrics_handcrafted():
    gt = np.array([[1.0, 2.0], [4.0, 8.0]])
    pred = np.array([[1.1, 2.2], [3.6, 8.8]])
    r = depth_metrics(pred, gt, apply_median_scaling=False)
    assert abs(r.abs_rel - 0.1) < 1e-15
    assert abs(r.sq_rel - (0.01 / 1 + 0.04 / 2 + 0.16 / 4 + 0.64 / 8) / 4) < 1e-15
    assert abs(r.rmse - math.sqrt((0.01 + 0.04 + 0.16 + 0.64) / 4)) < 1e-15
    logs = [math.log(1.1), math.log(1.1), math.log(0.9), math.log(1.1)]
    assert abs(r.rmse_log - math.sqrt(sum(v * v for v in logs) / 4)) < 1e-15
    assert r.delta == 1.0 and r.scale_used == 1.0


def test_depth_metrics_match_reference(rng):
    for _ in range(5):
        gt = rng.uniform(0.5, 10, (9, 11))
        pred = gt * rng.uniform(0.5, 1.5, gt.shape) * 3.0
        mask = rng.uniform(size=gt.shape) > 0.3
        got = depth_metrics(pred, gt, mask).to_dict()
        ref = oracles.depth_metrics_reference(pred, gt, mask)
        for k in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta"):
            assert abs(got[k] - ref[k]) <= 1e-12 * max(1.0, abs(ref[k]))


def test_depth_clamp_and_errors(rng):
    gt = rng.uniform(1, 5, (3, 3))
    assert depth_metrics(gt * 100, gt, apply_median_scaling=False, clamp=(0.1, 5.0)).rmse <= 4.0
    with pytest.raises(DegenerateMetricError):
        depth_metrics(gt, gt, mask=np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        depth_metrics(gt, np.ones((2, 2)))


def test_ate_examples(rng):
    gt = wavy_traj(rng)
    assert ate(gt, gt) < 1e-12
    S = Sim3Transform(2.5, PoseSE3(rng.normal(size=4), rng.normal(size=3)))
    pred = Trajectory(gt.timestamps, tuple(S.apply_pose(p) for p in gt.poses))
    assert ate(pred, gt) < 1e-9
    assert ate(pred, gt, "none") > 0.1


def test_ate_handcrafted_offset():
    gt = Trajectory.from_poses([PoseSE3(translation=(k, 0, 0)) for k in range(3)])
    pred = Trajectory.from_poses([PoseSE3(translation=(k + (0.3 if k == 1 else 0), 0, 0)) for k in range(3)])
    assert abs(ate(pred, gt, "none") - math.sqrt(0.03)) < 1e-15
    assert abs(ate(pred, gt, "none") - 0.17321) < 1e-5


def test_ate_matches_reference(rng):
    gt = wavy_traj(rng)
    pred = Trajectory(gt.timestamps, tuple(p.with_translation(p.t * 1.7 + rng.normal(0, 0.1, 3)) for p in gt.poses))
    for mode in ("sim3", "se3", "none"):
        assert abs(ate(pred, gt, mode) - oracles.ate_reference(pred, gt, mode)) < 1e-12


def test_rpe_examples(rng):
    gt = wavy_traj(rng)
    t_err, r_err = rpe(gt, gt)
    assert t_err < 1e-12 and r_err < 1e-9
    G = PoseSE3(rng.normal(size=4), rng.normal(size=3))
    moved = Trajectory(gt.timestamps, tuple(G @ p for p in gt.poses))
    t_err, r_err = rpe(moved, gt)
    assert t_err < 1e-12 and r_err < 1e-6


def test_rpe_single_rotation_error():
    gt = Trajectory.from_poses([PoseSE3(translation=(k, 0, 0)) for k in range(3)])
    bad = PoseSE3.from_axis_angle([0, 0, 1], math.radians(10.0), t=(2, 0, 0))
    pred = Trajectory.from_poses([gt[0], gt[1], bad])
    _, r_err = rpe(pred, gt)
    ref = oracles.rpe_reference(pred, gt, 1)[1]
    assert abs(r_err - ref) < 1e-12 and abs(r_err - math.sqrt(50.0)) < 1e-9


def test_rpe_too_short():
    t = Trajectory.from_poses([PoseSE3()])
    with pytest.raises(ShapeError):
        rpe(t, t)


def test_snippet_ate_examples(rng):
    gt = wavy_traj(rng)
    assert snippet_ate(gt, gt) < 1e-12
    scaled = Trajectory(gt.timestamps, tuple(p.with_translation(3 * p.t) for p in gt.poses))
    assert snippet_ate(scaled, gt) < 1e-9
    line = Trajectory.from_poses([PoseSE3(translation=(0, 0, 0.1 * k)) for k in range(9)])
    kinked = list(line.poses)
    kinked[4] = kinked[4].with_translation(kinked[4].t + [0.05, 0, 0])
    kinked = Trajectory.from_poses(kinked)
    assert abs(snippet_ate(kinked, line) - oracles.snippet_ate_reference(kinked, line, 5)) < 1e-14


def test_snippet_too_short(rng):
    with pytest.raises(ShapeError):
        snippet_ate(wavy_traj(rng, 4), wavy_traj(rng, 4))


def test_kdtree_matches_brute_force(rng):
    pts = rng.normal(size=(1000, 3))
    q = rng.normal(size=(300, 3))
    d, i = KdTree3(pts).query(q)
    bd, bi = oracles.brute_nearest(q, pts)
    assert np.array_equal(i, bi) and np.array_equal(d, bd)


def test_kdtree_duplicates_and_singleton():
    pts = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [5.0, 5.0, 5.0]])
    d, i = KdTree3(pts).query(np.array([[1.0, 1.0, 1.0]]))
    assert d[0] == 0.0 and i[0] == 0
    d, _ = KdTree3(pts[:1]).query(np.zeros((1, 3)))
    assert abs(d[0] - math.sqrt(3)) < 1e-15


def test_pointmap_identity():
    g = np.stack(np.meshgrid(np.arange(6.0), np.arange(5.0)), axis=-1)
    xyz = np.concatenate([g, np.full((5, 6, 1), 3.0)], axis=-1)
    r = pointmap_metrics(PointMap(xyz), PointMap(xyz))
    assert r.accuracy == 0.0 and r.completeness == 0.0 and r.sq_rel == 0.0


def test_pointmap_translated_plane_matches_brute_force():
    s, d = 0.01, 0.2
    g = np.stack(np.meshgrid(np.arange(30) * s, np.arange(20) * s), axis=-1)
    gt = np.concatenate([g, np.full((20, 30, 1), 2.0)], axis=-1)
    pred = gt + [d, 0.0, 0.0]
    r = pointmap_metrics(PointMap(pred), PointMap(gt))
    ref = oracles.pointmap_metrics_reference(pred, gt)
    assert abs(r.accuracy - ref["accuracy"]) < 1e-14 and abs(r.completeness - ref["completeness"]) < 1e-14
    # the overlapping strip matches exactly, the rest sits up to d away
    assert 0 < r.accuracy <= d + 1e-12


def test_pointmap_align_removes_similarity(rng):
    gt = PointMap(rng.normal(size=(6, 8, 3)) + [0, 0, 4])
    S = Sim3Transform(1.0, PoseSE3.from_axis_angle([0, 1, 0], 0.1, t=(0.2, 0, 0)))
    r = pointmap_metrics(PointMap(S.apply(gt.xyz)), gt, align=True)
    assert r.accuracy < 1e-9


def test_pointmap_empty():
    z = np.zeros((2, 2, 3))
    with pytest.raises(DegenerateMetricError):
        pointmap_metrics(PointMap(z), PointMap(z))
