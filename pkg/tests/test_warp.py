import numpy as np
import pytest

from colonmap.arraycore import ShapeError, pixel_grid
from colonmap.camera import Intrinsics, unproject
from colonmap.geometry import FlowField, PointMap, PoseSE3
from colonmap.warp import reconstruct_image, warp_grid_by_flow, warp_pointmap_by_flow


def test_identity_reconstruction_is_exact(rng):
    K = Intrinsics.centered(50.0, 20, 14)
    X = unproject(K, rng.uniform(1, 3, (14, 20)))
    img = rng.uniform(size=(14, 20, 3))
    rec, m = reconstruct_image(K, PoseSE3(), X, img)
    assert np.array_equal(rec, img) and m.all()


def test_points_behind_camera_are_masked():
    K = Intrinsics.centered(50.0, 6, 4)
    X = unproject(K, np.ones((4, 6)))
    rec, m = reconstruct_image(K, PoseSE3(translation=(0, 0, -2.0)), X, np.ones((4, 6, 3)))
    assert not m.any() and not rec.any()


@pytest.mark.parametrize("tx,z,f", [(0.1, 2.0, 40.0), (-0.15, 1.5, 30.0), (0.05, 0.5, 20.0)])
def test_plane_shift_matches_integer_shift(rng, tx, z, f):
    h, w = 12, 24
    K = Intrinsics.centered(f, w, h)
    shift = f * tx / z
    assert shift == round(shift)
    s = int(round(shift))
    X = unproject(K, np.full((h, w), z))
    src = rng.uniform(size=(h, w, 3))
    rec, m = reconstruct_image(K, PoseSE3(translation=(tx, 0, 0)), X, src)
    expected_mask = np.zeros((h, w))
    if s >= 0:
        expected_mask[:, :w - s] = 1
        assert np.array_equal(rec[:, :w - s], src[:, s:])
    else:
        expected_mask[:, -s:] = 1
        assert np.array_equal(rec[:, -s:], src[:, :w + s])
    assert np.array_equal(m, expected_mask)


def test_occlusion_weights_multiply_mask(rng):
    K = Intrinsics.centered(50.0, 8, 6)
    X = unproject(K, np.ones((6, 8)))
    occ = rng.uniform(size=(6, 8))
    _, m = reconstruct_image(K, PoseSE3(), X, np.ones((6, 8, 1)), occlusion=occ)
    assert np.array_equal(m, occ)


def test_zero_flow_is_identity(rng):
    X = PointMap(rng.normal(size=(5, 7, 3)), 1, 1)
    out, m = warp_pointmap_by_flow(X, FlowField(np.zeros((5, 7, 2)), 0, 1))
    assert np.array_equal(out.xyz, X.xyz) and m.all()
    assert out.source_frame == 0 and out.coord_frame == 1


def test_integer_flow_on_linear_map():
    h, w = 6, 9
    pix = pixel_grid(h, w)
    lin = np.stack([2 * pix[..., 0] + 1, -pix[..., 1], pix[..., 0] + pix[..., 1]], axis=-1)
    d = (2.0, -1.0)
    out, m = warp_pointmap_by_flow(PointMap(lin), FlowField(np.broadcast_to(d, (h, w, 2))))
    xs, ys = pix[..., 0] + d[0], pix[..., 1] + d[1]
    inside = (xs <= w - 1) & (ys >= 0)
    assert np.array_equal(m > 0, inside)
    expected = np.stack([2 * xs + 1, -ys, xs + ys], axis=-1)
    assert np.abs(out.xyz[inside] - expected[inside]).max() < 1e-12
    assert not out.xyz[~inside].any()


def test_flow_outside_image_masks():
    out, m = warp_grid_by_flow(np.ones((4, 4, 1)), FlowField(np.full((4, 4, 2), 10.0)))
    assert not m.any() and not out.any()


def test_flow_frame_mismatch_rejected(rng):
    with pytest.raises(ShapeError):
        warp_pointmap_by_flow(PointMap(rng.normal(size=(3, 3, 3)), 2, 2), FlowField(np.zeros((3, 3, 2)), 0, 1))
