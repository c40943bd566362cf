"""Recovering the focal length from a single point map.

A point map stores, for every pixel, the 3-D point seen there. With a
pinhole camera each pixel offset from the principal point equals the focal
length times the point's normalized direction, so the focal length is a
1-D robust fit. Run with ``python3 demos/01_focal_from_pointmap.py``.
"""
# %%
import numpy as np

from colonmap.camera import Intrinsics, estimate_focal_weiszfeld
from colonmap.geometry import PointMap
from colonmap.synth import SceneSpec, centerline_trajectory, render_sequence

K = Intrinsics.centered(80.0, 96, 72)
spec = SceneSpec("tube", K, centerline_trajectory(2, start_z=-1.0, step=0.08), seed=1)
frame = render_sequence(spec)[0]
print("depth range inside the tube: %.3f .. %.3f" % (frame.depth.min(), frame.depth.max()))

# %% Exact data: the least-squares start is already the answer.
est = estimate_focal_weiszfeld(frame.pointmap)
print("true focal 80.0 -> estimate %.10f after %d iteration(s)" % (est.focal, est.iterations))

# %% Noisy directions: the L1 fit stays close, and its objective never goes up.
rng = np.random.default_rng(0)
xyz = frame.pointmap.xyz.copy()
xyz[..., :2] += rng.normal(0.0, 0.01, xyz[..., :2].shape) * xyz[..., 2:3]
noisy = estimate_focal_weiszfeld(PointMap(xyz), max_iters=200)
print("noisy estimate %.4f, least-squares start %.4f" % (noisy.focal, noisy.focal_lsq))
print("objective history is non-increasing:", bool(np.all(np.diff(noisy.objective_history) <= 1e-9)))

# %% Gross corruption on most pixels: zero confidence removes it.
bad = rng.uniform(size=K.height * K.width).reshape(K.height, K.width) < 0.6
xyz = frame.pointmap.xyz.copy()
xyz[bad, :2] *= 2.0
plain = estimate_focal_weiszfeld(PointMap(xyz)).focal
weighted = estimate_focal_weiszfeld(PointMap(xyz), confidence=np.where(bad, 0.0, 1.0)).focal
print("60%% corrupted: unweighted %.3f, confidence-weighted %.6f" % (plain, weighted))
