"""Evaluation metrics and the zero-initialized fusion adapter.

Trajectory error after similarity alignment, per-snippet error, depth
metrics with median scaling, point-map accuracy/completeness, and a check
that freshly initialized adapters leave decoder features bit-for-bit
unchanged. Run with ``python3 demos/03_evaluation_and_adapters.py``.
"""
# %%
import numpy as np

from colonmap.drm import FeaturePyramid, FusionAdapterParams, drm_forward
from colonmap.geometry import PointMap, PoseSE3, Sim3Transform, Trajectory
from colonmap.metrics import ate, depth_metrics, pointmap_metrics, rpe, snippet_ate

rng = np.random.default_rng(7)

# %% A monocular prediction is only known up to a similarity transform.
gt = Trajectory.from_poses([PoseSE3.from_axis_angle([0, 1, 0], 0.02 * k, t=(0.1 * np.sin(k / 3), 0.0, 0.08 * k))
                            for k in range(20)])
S = Sim3Transform(0.37, PoseSE3.from_axis_angle([1, 2, 3], 0.4, t=(1.0, -2.0, 0.5)))
pred = Trajectory(gt.timestamps, tuple(S.apply_pose(p).with_translation(S.apply_pose(p).t + rng.normal(0, 0.002, 3))
                                       for p in gt.poses))
print("ATE unaligned %.4f, Sim(3)-aligned %.5f" % (ate(pred, gt, "none"), ate(pred, gt, "sim3")))
print("RPE after rescaling: trans %.5f, rot %.4f deg" % rpe(pred, gt, 1, alignment="sim3"))
print("5-frame snippet ATE %.5f" % snippet_ate(pred, gt, 5))

# %% Depth: median scaling removes the unknown global scale.
depth = rng.uniform(1.0, 4.0, (24, 32))
noisy = 3.0 * depth * rng.uniform(0.95, 1.05, depth.shape)
print({k: round(v, 5) for k, v in depth_metrics(noisy, depth).to_dict().items()})

# %% Point maps: nearest-neighbour accuracy/completeness after the same scaling.
u, v = np.meshgrid(np.linspace(-1, 1, 32), np.linspace(-0.75, 0.75, 24))
gt_pm = PointMap(np.stack([u, v, 2.0 + 0.3 * u * u], axis=-1))
pred_pm = PointMap(gt_pm.xyz * 0.5 + rng.normal(0, 0.005, gt_pm.xyz.shape))
print({k: v for k, v in pointmap_metrics(pred_pm, gt_pm).to_dict().items()})

# %% Zero-initialized adapters are inert: the decoder output is bitwise unchanged.
channels = (8, 16, 32, 64, 64)
pyramid = FeaturePyramid([rng.normal(size=(16, 16, c)) for c in channels])
decoder = [rng.normal(size=(8, 8, 32)) for _ in range(7)]
adapters = [FusionAdapterParams.zero_init(c, 32, level=i, rng=rng) for i, c in enumerate(channels)]
out = drm_forward(pyramid, decoder, adapters)
print("inert at init:", all(a.tobytes() == b.tobytes() for a, b in zip(out, decoder)))
adapters[2] = FusionAdapterParams.random(32, 32, level=2, rng=rng)
out = drm_forward(pyramid, decoder, adapters)
print("layers changed by adapter 2 alone:", [i for i, (a, b) in enumerate(zip(out, decoder)) if not np.array_equal(a, b)])
