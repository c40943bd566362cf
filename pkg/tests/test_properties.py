import numpy as np
from hypothesis import example, given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from colonmap import oracles
from colonmap.arraycore import avg_pool, bilinear_sample, conv2d
from colonmap.dataio import read_fmap, read_ppm, write_fmap, write_ppm
from colonmap.geometry import PoseSE3, Sim3Transform, rotation_error, umeyama_align
from colonmap.losses import LossConfig, confidence_objective, photometric_loss, ssim_map
from colonmap.metrics import KdTree3, depth_metrics

SETTINGS = settings(max_examples=40, deadline=None)
seeds = st.integers(0, 2 ** 32 - 1)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@SETTINGS
@given(seeds, st.integers(3, 9), st.integers(3, 9), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear(seed, h, w, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, h, w, 2))
    k = rng.normal(size=(3, 2, 3, 3))
    lhs = conv2d(a * x + b * y, k, padding=1)
    rhs = a * conv2d(x, k, padding=1) + b * conv2d(y, k, padding=1)
    assert np.abs(lhs - rhs).max() <= 1e-9 * (1 + np.abs(rhs).max())


@SETTINGS
@given(seeds, st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_tiling_pool_preserves_mean(seed, th, tw, window):
    x = np.random.default_rng(seed).normal(size=(th * window, tw * window, 2))
    assert abs(avg_pool(x, window).mean() - x.mean()) < 1e-12


@SETTINGS
@given(seeds, st.integers(2, 8), st.integers(2, 8))
def test_bilinear_stays_within_range(seed, h, w):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(h, w, 1))
    coords = np.stack([rng.uniform(0, w - 1, (5, 5)), rng.uniform(0, h - 1, (5, 5))], axis=-1)
    out, mask = bilinear_sample(img, coords)
    assert mask.all()
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


@SETTINGS
@given(hnp.arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 1e-3),
       hnp.arrays(np.float64, 3, elements=finite))
def test_pose_inverse_round_trip(q, t):
    T = PoseSE3(q, t)
    x = np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 0.0]])
    back = T.inverse().apply(T.apply(x))
    assert np.abs(back - x).max() <= 1e-9 * (1 + np.abs(t).max())
    assert abs(np.linalg.norm(T.rotation) - 1) < 1e-12 and T.rotation[0] >= 0


@SETTINGS
@given(seeds, st.floats(0.05, 20.0))
def test_umeyama_recovers_random_sim3(seed, scale):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(12, 3))
    truth = Sim3Transform(scale, PoseSE3(rng.normal(size=4), rng.normal(0, 5, 3)))
    est = umeyama_align(src, truth.apply(src))
    assert abs(est.scale - scale) <= 1e-8 * scale
    assert rotation_error(est.pose, truth.pose) < 1e-7
    s, R, t = oracles.horn_align(src, truth.apply(src))
    assert np.abs(R - est.pose.R).max() < 1e-7


@SETTINGS
@given(seeds)
def test_photometric_nonnegative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 6, 7, 3))
    ab, ba = photometric_loss(a, b).total, photometric_loss(b, a).total
    assert ab >= 0 and abs(ab - ba) < 1e-12
    s = ssim_map(a, b, LossConfig())
    assert s.min() >= -1 and s.max() <= 1


@SETTINGS
@given(st.floats(1e-3, 10.0), st.floats(1e-3, 5.0))
def test_confidence_minimizer_closed_form(l, beta):
    c_star = max(1.0, beta / l)
    f0 = confidence_objective(c_star, l, beta)
    for c in (1.0, c_star * 0.9, c_star * 1.1, c_star + 1.0):
        if c >= 1.0:
            assert f0 <= confidence_objective(c, l, beta) + 1e-12


@SETTINGS
@given(seeds, st.floats(0.01, 100.0))
def test_depth_metrics_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.5, 10, (5, 6))
    pred = gt * rng.uniform(0.7, 1.3, gt.shape)
    a, b = depth_metrics(pred, gt), depth_metrics(k * pred, gt)
    assert abs(a.abs_rel - b.abs_rel) < 1e-12 and abs(a.rmse_log - b.rmse_log) < 1e-12


@SETTINGS
@given(seeds, st.integers(1, 200), st.integers(1, 16))
@example(243693, 14, 2)  # several equidistant points in one leaf
def test_kdtree_exact(seed, n, leaf):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.normal(size=(n, 3)), 1)  # coarse grid forces ties
    q = np.round(rng.normal(size=(20, 3)), 1)
    d, i = KdTree3(pts, leaf_size=leaf).query(q)
    bd, bi = oracles.brute_nearest(q, pts)
    assert np.array_equal(d, bd) and np.array_equal(i, bi)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_fmap_round_trip_property(tmp_path_factory, g):
    p = tmp_path_factory.mktemp("fmap") / "g.fmap"
    write_fmap(p, g)
    assert read_fmap(p).tobytes() == g.astype("<f4").tobytes()


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_round_trip_property(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("ppm") / "i.ppm"
    write_ppm(p, img / 255.0)
    back = read_ppm(p)
    assert np.array_equal(np.floor(back.astype(np.float64) * 255 + 0.5).astype(np.uint8), img)
