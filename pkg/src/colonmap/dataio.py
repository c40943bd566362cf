"""File formats: FMAP grids, binary PPM images, adapter containers, dataset directories.

FMAP layout (little endian)::

    offset  size  field
    0       4     magic b"FMAP"
    4       4     version (u32) = 1
    8       4     height (u32)
    12      4     width (u32)
    16      4     channels (u32)
    20      4     dtype (u32), 0 = float32
    24      ...   height*width*channels float32, row-major, channel-interleaved

An adapter file is a plain concatenation of FMAP records.
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .camera import Intrinsics
from .drm import FusionAdapterParams
from .geometry import FlowField, PointMap, Trajectory, read_trajectory, write_trajectory

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
FMAP_HEADER = struct.Struct("<4s5I")
DTYPE_FLOAT32 = 0
DEFAULT_MAX_BYTES = 1 << 30

FRAME_FILES = ("image.ppm", "depth.fmap", "pm_self.fmap", "conf.fmap")
PREV_FILES = ("pm_in_prev.fmap", "flow_prev.fmap", "occ_prev.fmap")
NEXT_FILES = ("pm_in_next.fmap", "flow_next.fmap", "occ_next.fmap")


class FormatError(ValueError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class LayoutError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid dataset layout:\n  " + "\n  ".join(self.violations))


def _fmap_bytes(grid) -> bytes:
    g = np.asarray(grid)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.ndim != 3:
        raise ValueError(f"FMAP stores (H, W, C) grids, got shape {g.shape}")
    g32 = g.astype("<f4")
    if not np.all(np.isfinite(g32)):
        raise ValueError("FMAP payload must be finite")
    h, w, c = g32.shape
    return FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, h, w, c, DTYPE_FLOAT32) + g32.tobytes(order="C")


def _parse_fmap(buf: bytes, pos: int, max_bytes: int) -> tuple[np.ndarray, int]:
    if len(buf) - pos < FMAP_HEADER.size:
        raise FormatError(f"truncated header: need {FMAP_HEADER.size} bytes, have {len(buf) - pos}", pos)
    magic, version, h, w, c, dtype = FMAP_HEADER.unpack_from(buf, pos)
    if magic != FMAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}", pos)
    if version != FMAP_VERSION:
        raise FormatError(f"unsupported version {version}", pos + 4)
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}", pos + 20)
    if h == 0 or w == 0 or c == 0:
        raise FormatError(f"empty grid {h}x{w}x{c}", pos + 8)
    nbytes = h * w * c * 4
    if nbytes > max_bytes:
        raise FormatError(f"payload of {nbytes} bytes exceeds limit {max_bytes}", pos + 8)
    start = pos + FMAP_HEADER.size
    have = len(buf) - start
    if have < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, found {have}", start + have)
    data = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=start).reshape(h, w, c)
    return data.astype(np.float32), start + nbytes


def write_fmap(path, grid) -> None:
    Path(path).write_bytes(_fmap_bytes(grid))


def read_fmap(path, max_bytes: int = DEFAULT_MAX_BYTES) -> np.ndarray:
    """Read one FMAP grid as a float32 (H, W, C) array; trailing bytes are an error."""
    buf = Path(path).read_bytes()
    grid, end = _parse_fmap(buf, 0, max_bytes)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", end)
    return grid


def read_fmap_header(path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(FMAP_HEADER.size)
    if len(head) < FMAP_HEADER.size:
        raise FormatError("truncated header", 0)
    magic, version, h, w, c, dtype = FMAP_HEADER.unpack(head)
    if magic != FMAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    return h, w, c


def write_fmap_records(path, grids: Sequence) -> None:
    Path(path).write_bytes(b"".join(_fmap_bytes(g) for g in grids))


def read_fmap_records(path, max_bytes: int = DEFAULT_MAX_BYTES) -> list:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        grid, pos = _parse_fmap(buf, pos, max_bytes)
        out.append(grid)
    return out


def _kernel_grid(w: np.ndarray) -> np.ndarray:
    out_c, in_c, kh, kw = w.shape
    return w.reshape(out_c, in_c, kh * kw)


def write_adapters(path, adapters: Sequence[FusionAdapterParams]) -> None:
    """Seven records per adapter: meta [level, pool_window, 0, 0], then weights/biases.

    Kernels [out, in, kh, kw] are stored as grids (out, in, kh*kw); biases as (1, out, 1).
    """
    records = []
    for a in adapters:
        records.append(np.array([[[a.level, a.pool_window or 0, 0, 0]]], dtype=np.float64))
        for w, b in ((a.channel_w, a.channel_b), (a.spatial_w, a.spatial_b), (a.zero_w, a.zero_b)):
            records.append(_kernel_grid(w))
            records.append(b.reshape(1, -1, 1))
    write_fmap_records(path, records)


def read_adapters(path) -> list:
    recs = read_fmap_records(path)
    if len(recs) % 7:
        raise FormatError(f"adapter container holds {len(recs)} records, not a multiple of 7")
    out = []
    for i in range(0, len(recs), 7):
        meta = recs[i].reshape(-1)
        kernels = []
        for j, k in ((1, 1), (3, 3), (5, 1)):
            g = recs[i + j].astype(np.float64)
            kernels.append(g.reshape(g.shape[0], g.shape[1], k, k))
            kernels.append(recs[i + j + 1].astype(np.float64).reshape(-1))
        out.append(FusionAdapterParams(*kernels, level=int(meta[0]), pool_window=int(meta[1]) or None))
    return out


_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _ppm_header(buf: bytes) -> tuple[int, int, int, int]:
    pos = 0
    vals = []
    for _ in range(4):
        m = _PPM_TOKEN.match(buf, pos)
        if not m:
            raise FormatError("truncated PPM header", pos)
        vals.append(m.group(1))
        pos = m.end()
    if vals[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {vals[0]!r})", 0)
    try:
        w, h, maxval = (int(v) for v in vals[1:])
    except ValueError:
        raise FormatError("non-integer PPM header field", pos)
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported, expected 255", pos)
    if w <= 0 or h <= 0:
        raise FormatError(f"bad PPM dimensions {w}x{h}", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError("missing whitespace after PPM header", pos)
    return w, h, maxval, pos + 1


def read_ppm(path, max_bytes: int = DEFAULT_MAX_BYTES) -> np.ndarray:
    """Read a P6 image as float32 (H, W, 3) in [0, 1]."""
    buf = Path(path).read_bytes()
    w, h, _, start = _ppm_header(buf)
    n = w * h * 3
    if n > max_bytes:
        raise FormatError(f"image of {n} bytes exceeds limit {max_bytes}", 0)
    if len(buf) - start < n:
        raise FormatError(f"truncated PPM payload: expected {n} bytes, found {len(buf) - start}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start).reshape(h, w, 3)
    return data.astype(np.float32) / np.float32(255.0)


def read_ppm_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(256)
    w, h, _, _ = _ppm_header(head)
    return h, w


def write_ppm(path, image) -> None:
    """Write [0, 1] values as 8-bit P6, clamping and rounding half up."""
    g = np.asarray(image, dtype=np.float64)
    if g.ndim == 2:
        g = np.repeat(g[:, :, None], 3, axis=2)
    if g.ndim != 3 or g.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3) data, got {g.shape}")
    q = np.floor(np.clip(g, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def write_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text(json.dumps(K.to_dict(), sort_keys=True) + "\n")


def read_intrinsics(path) -> Intrinsics:
    d = json.loads(Path(path).read_text())
    missing = [k for k in ("focal", "cx", "cy", "width", "height") if k not in d]
    if missing:
        raise FormatError(f"intrinsics.json lacks {missing}")
    return Intrinsics.from_dict(d)


def load_json_config(path) -> dict:
    d = json.loads(Path(path).read_text())
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return d


def _frame_path(root: Path, t: int, name: str) -> Path:
    return root / "frames" / f"{t:06d}.{name}"


def write_dataset(root, packets: Sequence, K: Intrinsics, trajectory: Trajectory) -> None:
    """Write rendered frame packets in the dataset directory layout."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    n = len(packets)
    for t, p in enumerate(packets):
        write_ppm(_frame_path(root, t, "image.ppm"), p.image)
        write_fmap(_frame_path(root, t, "depth.fmap"), p.depth)
        write_fmap(_frame_path(root, t, "pm_self.fmap"), p.pointmap.xyz)
        write_fmap(_frame_path(root, t, "conf.fmap"), p.confidence)
        for r, files in ((t - 1, PREV_FILES), (t + 1, NEXT_FILES)):
            if 0 <= r < n:
                write_fmap(_frame_path(root, t, files[0]), p.pointmaps_in[r].xyz)
                write_fmap(_frame_path(root, t, files[1]), p.flows[r].uv)
                write_fmap(_frame_path(root, t, files[2]), p.occlusion[r])
    write_trajectory(root / "trajectory.txt", trajectory)
    write_intrinsics(root / "intrinsics.json", K)


def _required_files(t: int, n: int) -> list:
    names = list(FRAME_FILES)
    if t > 0:
        names += PREV_FILES
    if t < n - 1:
        names += NEXT_FILES
    return names


@dataclass
class Frame:
    """One frame loaded from disk, with the same field names as a rendered packet."""

    index: int
    image: np.ndarray
    depth: np.ndarray
    pointmap: PointMap
    pose: object
    confidence: np.ndarray
    pointmaps_in: dict
    flows: dict
    occlusion: dict


_EXPECTED_CHANNELS = {"depth.fmap": 1, "pm_self.fmap": 3, "conf.fmap": 1,
                      "pm_in_prev.fmap": 3, "flow_prev.fmap": 2, "occ_prev.fmap": 1,
                      "pm_in_next.fmap": 3, "flow_next.fmap": 2, "occ_next.fmap": 1}


class Dataset:
    """Validated dataset directory; frames are read on demand."""

    def __init__(self, root):
        self.root = Path(root)
        problems = []
        traj_path = self.root / "trajectory.txt"
        intr_path = self.root / "intrinsics.json"
        self.trajectory = None
        self.intrinsics = None
        if not traj_path.is_file():
            problems.append(f"missing {traj_path}")
        else:
            try:
                self.trajectory = read_trajectory(traj_path)
            except ValueError as exc:
                problems.append(f"bad trajectory: {exc}")
        if not intr_path.is_file():
            problems.append(f"missing {intr_path}")
        else:
            try:
                self.intrinsics = read_intrinsics(intr_path)
            except (ValueError, KeyError) as exc:
                problems.append(f"bad intrinsics: {exc}")
        n = len(self.trajectory) if self.trajectory is not None else 0
        expected_hw = (self.intrinsics.height, self.intrinsics.width) if self.intrinsics else None
        for t in range(n):
            for name in _required_files(t, n):
                path = _frame_path(self.root, t, name)
                if not path.is_file():
                    problems.append(f"missing {path}")
                    continue
                try:
                    if name.endswith(".ppm"):
                        hw, c = read_ppm_header(path), 3
                    else:
                        h, w, c = read_fmap_header(path)
                        hw = (h, w)
                except FormatError as exc:
                    problems.append(f"{path}: {exc}")
                    continue
                if expected_hw is None:
                    expected_hw = hw
                if hw != expected_hw:
                    problems.append(f"{path}: dimensions {hw[0]}x{hw[1]} differ from {expected_hw[0]}x{expected_hw[1]}")
                want = _EXPECTED_CHANNELS.get(name)
                if want is not None and c != want:
                    problems.append(f"{path}: {c} channels, expected {want}")
        extra = sorted(p.name for p in (self.root / "frames").glob("*")
                       if p.name[:6].isdigit() and int(p.name[:6]) >= n) if (self.root / "frames").is_dir() else []
        if extra:
            problems.append(f"frame files beyond trajectory length {n}: {extra[:3]}")
        if problems:
            raise LayoutError(problems)
        self._n = n

    def __len__(self) -> int:
        return self._n

    def frame(self, t: int) -> Frame:
        if not 0 <= t < self._n:
            raise IndexError(f"frame {t} out of range [0, {self._n})")
        rd = lambda name: read_fmap(_frame_path(self.root, t, name)).astype(np.float64)
        pm_in, flows, occ = {}, {}, {}
        for r, files in ((t - 1, PREV_FILES), (t + 1, NEXT_FILES)):
            if 0 <= r < self._n:
                pm_in[r] = PointMap(rd(files[0]), t, r)
                flows[r] = FlowField(rd(files[1]), t, r)
                occ[r] = rd(files[2])[..., 0]
        return Frame(
            index=t,
            image=read_ppm(_frame_path(self.root, t, "image.ppm")).astype(np.float64),
            depth=rd("depth.fmap")[..., 0],
            pointmap=PointMap(rd("pm_self.fmap"), t, t),
            pose=self.trajectory[t],
            confidence=rd("conf.fmap")[..., 0],
            pointmaps_in=pm_in,
            flows=flows,
            occlusion=occ,
        )

    __getitem__ = frame


def load_dataset(root) -> Dataset:
    return Dataset(root)
