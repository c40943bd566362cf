import numpy as np
import pytest

from colonmap import oracles
from colonmap.arraycore import pixel_grid
from colonmap.camera import (DegenerateInputError, Intrinsics, estimate_focal_weiszfeld, focal_objective, project,
                             project_points, unproject, _focal_problem)
from colonmap.geometry import PointMap


def test_intrinsics_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 4, 4)
    K = Intrinsics.centered(300.0, 64, 48)
    assert (K.cx, K.cy) == (31.5, 23.5)
    assert Intrinsics.from_dict(K.to_dict()) == K
    assert np.array_equal(K.matrix(), [[300, 0, 31.5], [0, 300, 23.5], [0, 0, 1]])


def test_project_principal_axis_and_zero_depth():
    K = Intrinsics.centered(300.0, 64, 48)
    uv, m = project_points(K, np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 0.0, -2.0]]))
    assert np.array_equal(uv[0], [K.cx, K.cy])
    assert m.tolist() == [1.0, 0.0, 0.0]


def test_project_matches_formula(rng):
    K = Intrinsics(300.0, 20.0, 15.0, 40, 30)
    xyz = rng.normal(size=(30, 40, 3)) + [0, 0, 5]
    uv, m = project(K, PointMap(xyz))
    assert m.all()
    for i, j in [(0, 0), (5, 17), (29, 39)]:
        x, y, z = xyz[i, j]
        assert abs(uv[i, j, 0] - (300.0 * x / z + 20.0)) < 1e-12
        assert abs(uv[i, j, 1] - (300.0 * y / z + 15.0)) < 1e-12


def test_unproject_principal_pixel():
    K = Intrinsics(10.0, 2.0, 1.0, 5, 3)
    X = unproject(K, np.ones((3, 5)))
    assert np.array_equal(X.xyz[1, 2], [0.0, 0.0, 1.0])


@pytest.mark.parametrize("focal", [1.0, 300.0, 5000.0])
def test_unproject_project_round_trip(rng, focal):
    K = Intrinsics.centered(focal, 32, 24)
    depth = rng.uniform(0.5, 20.0, (24, 32))
    uv, m = project(K, unproject(K, depth, frame=3))
    assert m.all() and np.abs(uv - pixel_grid(24, 32)).max() < 1e-5


def test_focal_noise_free_recovers_exactly(rng):
    K = Intrinsics.centered(300.0, 40, 30)
    X = unproject(K, rng.uniform(1.0, 5.0, (30, 40)))
    est = estimate_focal_weiszfeld(X)
    assert abs(est.focal - 300.0) / 300.0 < 1e-6 and est.iterations <= 10


def test_focal_matches_golden_section_oracle(rng):
    K = Intrinsics.centered(250.0, 40, 30)
    X = unproject(K, rng.uniform(1.0, 5.0, (30, 40)))
    noisy = X.xyz.copy()
    noisy[..., :2] += rng.normal(0, 0.01, noisy[..., :2].shape) * noisy[..., 2:3]
    Xn = PointMap(noisy)
    est = estimate_focal_weiszfeld(Xn, max_iters=500, tol=1e-13)
    u, q, w = _focal_problem(Xn)
    ref = oracles.golden_section_min(lambda f: focal_objective(f, u, q, w), 0.5 * est.focal_lsq, 2 * est.focal_lsq)
    assert abs(est.focal - ref) / ref < 1e-3
    # Weiszfeld never increases the objective
    h = np.array(est.objective_history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])


def test_focal_scale_invariant(rng):
    K = Intrinsics.centered(120.0, 20, 16)
    X = PointMap(unproject(K, rng.uniform(1, 3, (16, 20))).xyz + rng.normal(0, 0.01, (16, 20, 3)))
    a = estimate_focal_weiszfeld(X).focal
    b = estimate_focal_weiszfeld(PointMap(X.xyz * 7.5)).focal
    assert abs(a - b) / a < 1e-9


def test_focal_confidence_excludes_corruption(rng):
    K = Intrinsics.centered(300.0, 40, 30)
    xyz = unproject(K, rng.uniform(1, 4, (30, 40))).xyz.copy()
    bad = rng.uniform(size=(30, 40)) < 0.2
    xyz[bad, :2] *= 3.0
    conf = np.where(bad, 0.0, 1.0)
    est = estimate_focal_weiszfeld(PointMap(xyz), confidence=conf)
    assert abs(est.focal - 300.0) / 300.0 < 1e-3


def test_focal_principal_axis_degenerate():
    xyz = np.zeros((4, 4, 3))
    xyz[..., 2] = 2.0
    with pytest.raises(DegenerateInputError):
        estimate_focal_weiszfeld(PointMap(xyz))


def test_focal_negative_focal_degenerate(rng):
    K = Intrinsics.centered(100.0, 10, 8)
    X = unproject(K, np.ones((8, 10)))
    flipped = X.xyz * [-1.0, -1.0, 1.0]
    with pytest.raises(DegenerateInputError):
        estimate_focal_weiszfeld(PointMap(flipped))


def test_focal_too_few_pixels():
    xyz = np.zeros((2, 2, 3))
    xyz[0, 0] = [0.1, 0.1, 1.0]
    with pytest.raises(DegenerateInputError):
        estimate_focal_weiszfeld(PointMap(xyz))
