"""Training losses on a rendered frame pair.

The renderer produces every quantity the losses consume (images, point
maps in own and neighbour coordinates, flows, occlusion masks, poses), so
on ground truth each loss should sit at its numerical floor. Perturbing the
relative pose then raises the pose term by a predictable amount. Run with
``python3 demos/02_losses_on_a_frame_pair.py``.
"""
# %%
import json
from pathlib import Path

import numpy as np

from colonmap.geometry import PointMap
from colonmap.losses import LossConfig, geometry_consistency_loss
from colonmap.pipeline import pair_geometry, pair_losses
from colonmap.synth import render_sequence, scene_from_dict

spec = scene_from_dict(json.loads((Path(__file__).parent / "tube_scene.json").read_text()))
packets = render_sequence(spec)
K = spec.intrinsics
prev, cur = packets[3], packets[4]

# %% Ground truth: every term is close to zero.
report = pair_losses(K, prev, cur)
for key in ("photometric_t", "photometric_tm1", "conf_aware", "t_flow", "t_pose"):
    print("%-16s %.3e" % (key, report[key]))

# %% Shift the predicted translation of T^{t->t-1} by delta.
# Every point of the first pose summand moves by delta, so its L1 mean grows by |delta|_1.
T = prev.pose.inverse() @ cur.pose
delta = np.array([0.02, -0.01, 0.03])
shifted = pair_losses(K, prev, cur, T_t_to_tm1=T.with_translation(T.t + delta))
print("t_pose increase %.12f, |delta|_1 = %.12f" % (shifted["t_pose"] - report["t_pose"], np.abs(delta).sum()))

# %% The two pose-term variants differ in which cross-frame map gets supervised.
# The literal variant never reads X^{t;t-1}, and it compares frame t-1's points with
# X^{t;t} pixel by pixel, so it is not zero even on ground truth.
geo = pair_geometry(prev, cur)
broken = geo.__class__(**{**geo.__dict__, "X_t_tm1": PointMap(geo.X_t_tm1.xyz + 0.05)})
for variant in ("symmetric", "literal"):
    cfg = LossConfig(pose_term=variant)
    clean = geometry_consistency_loss(geo, cfg).terms["t_pose"]
    corrupted = geometry_consistency_loss(broken, cfg).terms["t_pose"]
    print("%-9s pose term: clean %.4f, X^{t;t-1} shifted by 0.05: %.4f" % (variant, clean, corrupted))
