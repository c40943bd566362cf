"""Analytic synthetic scenes with exact depth, point maps, flow and occlusion.

Two scene kinds are supported:

* ``tube`` -- a closed colon-like tube. Cross-sections in planes of constant
  world ``z`` are circles centred on
  ``c(z) = (A sin(2 pi z / P), eps A cos(2 pi z / P))`` with radius ``R``,
  narrowing over the last ``dome_length`` units into an ellipsoidal dome
  that closes the tube smoothly at ``z_end``. A flat cap closes it at
  ``z_start``.
* ``plane`` -- a textured plane at world ``z = plane_depth``.

Rays are cast per pixel (marching plus bisection on the implicit surface).
Because the camera ray direction is ``((u-cx)/f, (v-cy)/f, 1)`` in camera
coordinates, the ray parameter at the hit is the depth itself.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .arraycore import pixel_grid
from .camera import Z_MIN, Intrinsics, project_points, unproject
from .geometry import FlowField, PointMap, PoseSE3, Trajectory, axis_angle_quat, quat_multiply

OCCLUSION_TOL = 1e-3
BISECT_ITERS = 64


class InvalidSceneError(ValueError):
    pass


def thread_count() -> int:
    env = os.environ.get("COLONMAP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidSceneError(f"COLONMAP_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


@dataclass(frozen=True)
class Texture:
    """Solid texture: three sinusoids of the 3-D surface point around 0.5.

    ``frequencies`` are wave numbers in rad per scene unit; wave directions
    and per-channel phases are drawn from the scene seed. Amplitudes must sum
    to at most 0.4 so intensities stay in [0.1, 0.9].
    """

    amplitudes: tuple = (0.2, 0.12, 0.08)
    frequencies: tuple = (7.0, 11.0, 4.0)

    def __post_init__(self):
        if sum(abs(a) for a in self.amplitudes) > 0.4 + 1e-12:
            raise InvalidSceneError("texture amplitudes must sum to at most 0.4")
        if len(self.amplitudes) != len(self.frequencies):
            raise InvalidSceneError("texture amplitudes and frequencies must have equal length")


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    intrinsics: Intrinsics
    trajectory: Trajectory
    seed: int = 0
    radius: float = 1.0
    amplitude: float = 0.15
    period: float = 6.0
    eccentricity: float = 0.5
    z_start: float = -2.0
    z_end: float = 2.0
    dome_length: float = 1.0
    plane_depth: float = 2.0
    texture: Texture = field(default_factory=Texture)
    march_step: float = 0.02
    occlusion_tol: float = OCCLUSION_TOL

    def __post_init__(self):
        if self.kind not in ("tube", "plane"):
            raise InvalidSceneError(f"unknown scene kind {self.kind!r}")
        for name in ("radius", "period", "plane_depth", "march_step", "occlusion_tol", "dome_length"):
            if not getattr(self, name) > 0:
                raise InvalidSceneError(f"{name} must be positive")
        if self.amplitude < 0 or self.eccentricity < 0:
            raise InvalidSceneError("amplitude and eccentricity must be non-negative")
        if self.kind == "tube" and not self.z_end - self.dome_length > self.z_start:
            raise InvalidSceneError("z_end - dome_length must exceed z_start")
        if len(self.trajectory) < 2:
            raise InvalidSceneError("trajectory needs at least two poses")

    def centerline(self, z):
        ph = 2.0 * np.pi * np.asarray(z) / self.period
        return self.amplitude * np.sin(ph), self.eccentricity * self.amplitude * np.cos(ph)

    def inside(self, p) -> np.ndarray:
        """Implicit function, positive strictly inside the tube wall."""
        p = np.asarray(p, dtype=np.float64)
        z = p[..., 2]
        cx, cy = self.centerline(z)
        u = np.maximum(z - (self.z_end - self.dome_length), 0.0) / self.dome_length
        r2 = self.radius ** 2 * (1.0 - u * u)
        return r2 - (p[..., 0] - cx) ** 2 - (p[..., 1] - cy) ** 2


def centerline_trajectory(n_frames: int, start_z: float = 0.0, step: float = 0.08,
                          offset=(0.0, 0.0), yaw_deg: float = 0.0, pitch_deg: float = 0.0,
                          amplitude: float = 0.15, period: float = 6.0, eccentricity: float = 0.5,
                          dt: float = 0.1) -> Trajectory:
    """Camera poses following the tube centreline, optionally with a per-frame yaw/pitch drift."""
    poses = []
    for k in range(n_frames):
        z = start_z + k * step
        ph = 2.0 * np.pi * z / period
        pos = [amplitude * np.sin(ph) + offset[0], eccentricity * amplitude * np.cos(ph) + offset[1], z]
        q = quat_multiply(axis_angle_quat([0, 1, 0], math.radians(yaw_deg * k)),
                          axis_angle_quat([1, 0, 0], math.radians(pitch_deg * k)))
        poses.append(PoseSE3(q, pos))
    return Trajectory(np.arange(n_frames) * dt, tuple(poses))


def linear_trajectory(n_frames: int, start=(0.0, 0.0, 0.0), step=(0.0, 0.0, 0.0),
                      yaw_deg: float = 0.0, dt: float = 0.1) -> Trajectory:
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    poses = [PoseSE3(axis_angle_quat([0, 1, 0], math.radians(yaw_deg * k)), start + k * step)
             for k in range(n_frames)]
    return Trajectory(np.arange(n_frames) * dt, tuple(poses))


@dataclass(frozen=True)
class FramePacket:
    """Everything a frame contributes to the training losses.

    ``pointmaps_in[r]`` is X^{t;r}, ``flows[r]`` is F^{t<-r} on this frame's
    grid and ``occlusion[r]`` the matching validity mask M^{t<-r}.
    """

    index: int
    image: np.ndarray
    depth: np.ndarray
    pointmap: PointMap
    pose: PoseSE3
    confidence: np.ndarray
    pointmaps_in: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    occlusion: dict = field(default_factory=dict)
    consistent: bool = True


def _camera_rays(K: Intrinsics, coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    return np.stack([(coords[..., 0] - K.cx) / K.focal,
                     (coords[..., 1] - K.cy) / K.focal,
                     np.ones(coords.shape[:-1])], axis=-1)


def _cast_plane(spec: SceneSpec, origin, dirs):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (spec.plane_depth - origin[2]) / dz
    ok = (dz > 0) & np.isfinite(t) & (t > 0)
    return np.where(ok, t, np.nan), np.zeros(dirs.shape[0], dtype=np.int8)


def _cast_tube(spec: SceneSpec, origin, dirs):
    """Return hit parameters and surface ids (0 wall or dome, 1 start cap).

    Steps are ``max(march_step, g / (G |d|))`` with ``G`` a bound on the
    gradient norm of the implicit function, so no crossing is skipped that a
    fixed ``march_step`` would have found.
    """
    n = dirs.shape[0]
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = np.where(dz < 0, (spec.z_start - origin[2]) / dz, np.inf)
    R = spec.radius
    grad_bound = 2.0 * R * (1.0 + R / spec.dome_length + 2.0 * np.pi * spec.amplitude / spec.period)
    inv_speed = 1.0 / (grad_bound * np.linalg.norm(dirs, axis=1))

    t_hit = np.full(n, np.nan)
    surf = np.zeros(n, dtype=np.int8)
    lo = np.zeros(n)
    hi = np.zeros(n)
    t_cur = np.zeros(n)
    g_cur = np.full(n, float(spec.inside(origin)))
    active = np.arange(n)
    h = spec.march_step
    while active.size:
        t_prev = t_cur[active]
        t_k = np.minimum(t_prev + np.maximum(h, g_cur[active] * inv_speed[active]), t_cap[active])
        g = spec.inside(origin + t_k[:, None] * dirs[active])
        crossed = g <= 0
        at_cap = (~crossed) & (t_k >= t_cap[active])
        if np.any(crossed):
            ids = active[crossed]
            lo[ids] = t_prev[crossed]
            hi[ids] = t_k[crossed]
        if np.any(at_cap):
            ids = active[at_cap]
            t_hit[ids] = t_cap[ids]
            surf[ids] = 1
        t_cur[active] = t_k
        g_cur[active] = g
        active = active[~(crossed | at_cap)]

    ids = np.nonzero(np.isnan(t_hit))[0]
    a, b = lo[ids], hi[ids]
    d = dirs[ids]
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (a + b)
        inside = spec.inside(origin + mid[:, None] * d) > 0
        a = np.where(inside, mid, a)
        b = np.where(inside, b, mid)
    t_hit[ids] = b
    return t_hit, surf


def cast(spec: SceneSpec, pose: PoseSE3, coords) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depth, world hit points and surface ids for rays through pixel ``coords`` (..., 2)."""
    K = spec.intrinsics
    shape = np.asarray(coords).shape[:-1]
    rays = _camera_rays(K, coords).reshape(-1, 3)
    dirs = rays @ pose.R.T
    origin = pose.translation
    if spec.kind == "tube":
        t, surf = _cast_tube(spec, origin, dirs)
    else:
        t, surf = _cast_plane(spec, origin, dirs)
    pts = origin + t[:, None] * dirs
    return t.reshape(shape), pts.reshape(shape + (3,)), surf.reshape(shape)


def _texture(spec: SceneSpec, pts) -> np.ndarray:
    tex = spec.texture
    rng = np.random.default_rng(spec.seed)
    waves = rng.normal(size=(len(tex.amplitudes), 3))
    waves /= np.linalg.norm(waves, axis=1, keepdims=True)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(len(tex.amplitudes), 3))
    img = np.full(pts.shape[:-1] + (3,), 0.5)
    for k, a in enumerate(tex.amplitudes):
        arg = tex.frequencies[k] * (pts @ waves[k])
        img += a * np.sin(arg[..., None] + phases[k])
    return img


def validate_spec(spec: SceneSpec) -> None:
    K = spec.intrinsics
    for i, pose in enumerate(spec.trajectory.poses):
        o = pose.translation
        if spec.kind == "tube":
            if not o[2] > spec.z_start or spec.inside(o) <= 0:
                raise InvalidSceneError(f"camera {i} at {o.tolist()} is outside the tube")
        else:
            corners = np.array([[0, 0], [K.width - 1, 0], [0, K.height - 1], [K.width - 1, K.height - 1]], float)
            dirs = _camera_rays(K, corners) @ pose.R.T
            if o[2] >= spec.plane_depth or np.any(dirs[:, 2] <= 0):
                raise InvalidSceneError(f"camera {i} does not see the plane with every pixel")


def _render_frame(spec: SceneSpec, t: int) -> FramePacket:
    K = spec.intrinsics
    poses = spec.trajectory.poses
    pose = poses[t]
    pix = pixel_grid(K.height, K.width)
    depth, pts, surf = cast(spec, pose, pix)
    if not np.all(np.isfinite(depth)) or np.any(depth <= Z_MIN):
        raise InvalidSceneError(f"frame {t}: some rays miss the surface")
    image = _texture(spec, pts)
    X = unproject(K, depth, frame=t)

    pm_in, flows, occ = {}, {}, {}
    for r in (t - 1, t + 1):
        if not 0 <= r < len(poses):
            continue
        T = poses[r].inverse() @ pose
        X_r = T.apply(X.xyz)
        q, z_ok = project_points(K, X_r)
        inb = (q[..., 0] >= 0) & (q[..., 0] <= K.width - 1) & (q[..., 1] >= 0) & (q[..., 1] <= K.height - 1)
        vis = np.zeros(depth.shape, dtype=bool)
        cand = inb & (z_ok > 0)
        if np.any(cand):
            d_r, _, _ = cast(spec, poses[r], q[cand])
            vis[cand] = np.abs(d_r - X_r[..., 2][cand]) <= spec.occlusion_tol
        pm_in[r] = PointMap(X_r, t, r)
        flows[r] = FlowField(np.where(z_ok[..., None] > 0, q - pix, 0.0), t, r)
        occ[r] = vis.astype(np.float64)
    return FramePacket(t, image, depth, X, pose, np.ones(depth.shape), pm_in, flows, occ)


def render_sequence(spec: SceneSpec, threads: Optional[int] = None) -> list:
    """Render every frame of ``spec``; output does not depend on the thread count."""
    validate_spec(spec)
    n = len(spec.trajectory)
    threads = thread_count() if threads is None else max(1, threads)
    if threads == 1 or n == 1:
        return [_render_frame(spec, t) for t in range(n)]
    with ThreadPoolExecutor(max_workers=min(threads, n)) as pool:
        return list(pool.map(lambda t: _render_frame(spec, t), range(n)))


@dataclass(frozen=True)
class Noise:
    pointmap_sigma: float = 0.0
    flow_sigma: float = 0.0
    pose_rot_rad: float = 0.0
    pose_trans: float = 0.0

    def __post_init__(self):
        if min(self.pointmap_sigma, self.flow_sigma, self.pose_rot_rad, self.pose_trans) < 0:
            raise ValueError("noise levels must be non-negative")

    def is_zero(self) -> bool:
        return not (self.pointmap_sigma or self.flow_sigma or self.pose_rot_rad or self.pose_trans)


def perturb(packet: FramePacket, noise: Noise, seed: int) -> FramePacket:
    """Seeded Gaussian corruption of point maps, flows and pose.

    The pose gets a rotation of exactly ``pose_rot_rad`` about a random axis and
    a Gaussian translation offset with std ``pose_trans`` per axis.
    """
    if noise.is_zero():
        return packet
    rng = np.random.default_rng(seed)

    def jitter_pm(X: PointMap) -> PointMap:
        if not noise.pointmap_sigma:
            return X
        return PointMap(X.xyz + rng.normal(0.0, noise.pointmap_sigma, X.xyz.shape), X.source_frame, X.coord_frame)

    def jitter_flow(F: FlowField) -> FlowField:
        if not noise.flow_sigma:
            return F
        return FlowField(F.uv + rng.normal(0.0, noise.flow_sigma, F.uv.shape), F.to_frame, F.from_frame)

    pointmap = jitter_pm(packet.pointmap)
    pm_in = {r: jitter_pm(X) for r, X in sorted(packet.pointmaps_in.items())}
    flows = {r: jitter_flow(F) for r, F in sorted(packet.flows.items())}
    pose = packet.pose
    if noise.pose_rot_rad or noise.pose_trans:
        axis = rng.normal(size=3)
        dq = axis_angle_quat(axis, noise.pose_rot_rad)
        dt = rng.normal(0.0, noise.pose_trans, 3) if noise.pose_trans else np.zeros(3)
        pose = PoseSE3(quat_multiply(dq, pose.rotation), pose.translation + dt)
    return replace(packet, pointmap=pointmap, pointmaps_in=pm_in, flows=flows, pose=pose, consistent=False)


def scene_from_dict(d: dict) -> SceneSpec:
    """Build a scene from its JSON description (see the README for the schema)."""
    d = dict(d)
    allowed = {"kind", "width", "height", "focal", "seed", "tube", "plane_depth", "texture",
               "trajectory", "march_step", "occlusion_tol"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise InvalidSceneError(f"unknown scene keys: {unknown}")
    try:
        kind = d["kind"]
        K = Intrinsics.centered(float(d["focal"]), int(d["width"]), int(d["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSceneError(f"bad scene header: {exc}") from exc
    tube = dict(d.get("tube", {}))
    tube_keys = {"radius", "amplitude", "period", "eccentricity", "z_start", "z_end", "dome_length"}
    if set(tube) - tube_keys:
        raise InvalidSceneError(f"unknown tube keys: {sorted(set(tube) - tube_keys)}")
    tex = d.get("texture", {})
    try:
        texture = Texture(**{k: tuple(v) for k, v in tex.items()})
    except TypeError as exc:
        raise InvalidSceneError(f"bad texture: {exc}") from exc
    traj = _trajectory_from_dict(d.get("trajectory", {}), kind, tube)
    extra = {k: float(d[k]) for k in ("plane_depth", "march_step", "occlusion_tol") if k in d}
    return SceneSpec(kind=kind, intrinsics=K, trajectory=traj, seed=int(d.get("seed", 0)),
                     texture=texture, **{k: float(v) for k, v in tube.items()}, **extra)


def _trajectory_from_dict(t: dict, kind: str, tube: dict) -> Trajectory:
    if "poses" in t:
        stamps, poses = [], []
        for row in t["poses"]:
            if len(row) != 8:
                raise InvalidSceneError("pose rows must be [timestamp, tx, ty, tz, qx, qy, qz, qw]")
            stamps.append(float(row[0]))
            poses.append(PoseSE3([row[7], row[4], row[5], row[6]], row[1:4]))
        return Trajectory(np.array(stamps), tuple(poses))
    allowed = {"frames", "start", "step", "yaw_deg", "pitch_deg", "offset", "dt"}
    if set(t) - allowed:
        raise InvalidSceneError(f"unknown trajectory keys: {sorted(set(t) - allowed)}")
    n = int(t.get("frames", 10))
    dt = float(t.get("dt", 0.1))
    if kind == "tube":
        step = t.get("step", 0.08)
        step = float(step[2] if isinstance(step, (list, tuple)) else step)
        start = t.get("start", 0.0)
        start = float(start[2] if isinstance(start, (list, tuple)) else start)
        return centerline_trajectory(n, start, step, tuple(t.get("offset", (0.0, 0.0))),
                                     float(t.get("yaw_deg", 0.0)), float(t.get("pitch_deg", 0.0)),
                                     float(tube.get("amplitude", 0.15)), float(tube.get("period", 6.0)),
                                     float(tube.get("eccentricity", 0.5)), dt)
    return linear_trajectory(n, t.get("start", (0.0, 0.0, 0.0)), t.get("step", (0.0, 0.0, 0.0)),
                             float(t.get("yaw_deg", 0.0)), dt)
