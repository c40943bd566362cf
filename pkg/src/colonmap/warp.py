"""Inverse warping: image reconstruction by reprojection and point-map warping by flow.

Flow convention: ``F^{a<-b}`` lives on frame ``a``'s pixel grid and
``p + F(p)`` is where pixel ``p`` of ``a`` lands in frame ``b``. Warping a
map of frame ``b`` by ``F^{a<-b}`` therefore yields a map aligned with ``a``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .arraycore import ShapeError, as_grid, bilinear_sample, pixel_grid
from .camera import Intrinsics, project_points
from .geometry import FlowField, PointMap, PoseSE3

__all__ = ["FlowField", "PointMap", "reconstruct_image", "warp_pointmap_by_flow", "warp_grid_by_flow"]


def reconstruct_image(K: Intrinsics, T: PoseSE3, X_tt: PointMap, I_src,
                      occlusion=None) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild the target image by sampling ``I_src`` where target points reproject.

    ``X_tt`` holds the target frame's points in its own coordinates and ``T``
    maps them into the source camera. The mask is positive depth in the
    source camera, in-bounds sampling and, when given, the soft
    ``occlusion`` weight, combined multiplicatively.
    """
    I_src = as_grid(I_src, name="source image")
    pts = T.apply(X_tt.xyz)
    uv, depth_ok = project_points(K, pts)
    sampled, inb = bilinear_sample(I_src, uv)
    mask = depth_ok * inb
    if occlusion is not None:
        occ = np.asarray(occlusion, dtype=np.float64).reshape(mask.shape)
        mask = mask * occ
    sampled = np.where(mask[..., None] > 0, sampled, 0.0)
    return sampled, mask


def warp_grid_by_flow(values, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    values = as_grid(values, name="values")
    h, w = flow.uv.shape[:2]
    coords = pixel_grid(h, w) + flow.uv
    return bilinear_sample(values, coords)


def warp_pointmap_by_flow(X: PointMap, F: FlowField) -> tuple[PointMap, np.ndarray]:
    """Pull ``X`` (a map of frame ``F.from_frame``) onto ``F.to_frame``'s grid.

    The result holds, for each pixel of ``F.to_frame``, the point of ``X``
    found at the flowed location, still in ``X``'s coordinate frame.
    """
    if F.from_frame is not None and X.source_frame is not None and F.from_frame != X.source_frame:
        raise ShapeError(f"flow samples frame {F.from_frame!r} but point map belongs to {X.source_frame!r}")
    warped, mask = warp_grid_by_flow(X.xyz, F)
    return PointMap(warped, F.to_frame, X.coord_frame), mask
