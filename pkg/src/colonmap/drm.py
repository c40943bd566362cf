"""Forward arithmetic of the detail-restoration fusion adapters.

Each adapter maps a CNN feature grid onto a ViT token grid: a 1x1 channel
projection, a 3x3 convolution followed by average pooling down to the token
resolution, and a zero-initialized 1x1 convolution whose output is added to
the decoder features. Five adapters feed the first five decoder layers;
deeper layers are passed through untouched.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .arraycore import ShapeError, as_grid, avg_pool, avg_pool_backward, conv2d, conv2d_backward_input

N_INJECTED = 5


@dataclass
class FusionAdapterParams:
    channel_w: np.ndarray   # [vit_c, cnn_c, 1, 1]
    channel_b: np.ndarray
    spatial_w: np.ndarray   # [vit_c, vit_c, 3, 3]
    spatial_b: np.ndarray
    zero_w: np.ndarray      # [vit_c, vit_c, 1, 1]
    zero_b: np.ndarray
    level: int = 0
    pool_window: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.level < N_INJECTED:
            raise ValueError(f"adapter level must lie in [0, {N_INJECTED}), got {self.level}")
        for name in ("channel_w", "channel_b", "spatial_w", "spatial_b", "zero_w", "zero_b"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.channel_w.shape[2:] != (1, 1) or self.zero_w.shape[2:] != (1, 1):
            raise ShapeError("channel and zero projections must be 1x1 convolutions")
        if self.spatial_w.shape[2:] != (3, 3):
            raise ShapeError("spatial projection must be a 3x3 convolution")

    @property
    def cnn_channels(self) -> int:
        return self.channel_w.shape[1]

    @property
    def vit_channels(self) -> int:
        return self.zero_w.shape[0]

    @classmethod
    def zero_init(cls, cnn_channels: int, vit_channels: int, level: int = 0,
                  rng: Optional[np.random.Generator] = None, pool_window: Optional[int] = None):
        """Random projections with an exactly-zero output convolution."""
        rng = np.random.default_rng(0) if rng is None else rng
        cw = rng.normal(0.0, np.sqrt(2.0 / cnn_channels), (vit_channels, cnn_channels, 1, 1))
        sw = rng.normal(0.0, np.sqrt(2.0 / (9 * vit_channels)), (vit_channels, vit_channels, 3, 3))
        return cls(cw.astype(np.float32), np.zeros(vit_channels),
                   sw.astype(np.float32), np.zeros(vit_channels),
                   np.zeros((vit_channels, vit_channels, 1, 1)), np.zeros(vit_channels),
                   level, pool_window)

    @classmethod
    def random(cls, cnn_channels: int, vit_channels: int, level: int = 0,
               rng: Optional[np.random.Generator] = None, scale: float = 0.1,
               pool_window: Optional[int] = None):
        """All parameters random (float32-representable), e.g. for a trained adapter."""
        rng = np.random.default_rng(0) if rng is None else rng
        r = lambda *shape: rng.normal(0.0, scale, shape).astype(np.float32)
        return cls(r(vit_channels, cnn_channels, 1, 1), r(vit_channels),
                   r(vit_channels, vit_channels, 3, 3), r(vit_channels),
                   r(vit_channels, vit_channels, 1, 1), r(vit_channels),
                   level, pool_window)

    def is_inert(self) -> bool:
        return not np.any(self.zero_w) and not np.any(self.zero_b)


@dataclass
class FeaturePyramid:
    levels: list

    def __post_init__(self):
        if len(self.levels) != N_INJECTED:
            raise ShapeError(f"pyramid must have {N_INJECTED} levels, got {len(self.levels)}")
        self.levels = [as_grid(g, name=f"pyramid level {i}") for i, g in enumerate(self.levels)]

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


def pool_window_for(src_hw: Sequence[int], dst_hw: Sequence[int]) -> int:
    (sh, sw), (dh, dw) = src_hw[:2], dst_hw[:2]
    if sh % dh or sw % dw or sh // dh != sw // dw:
        raise ShapeError(f"cannot pool {sh}x{sw} onto {dh}x{dw}: ratio is not a common integer")
    return sh // dh


def align_features(cnn_feat, vit_shape: Sequence[int], params: FusionAdapterParams) -> np.ndarray:
    """Channel then spatial projection of ``cnn_feat`` onto the ViT grid shape."""
    x = as_grid(cnn_feat, name="cnn features")
    if x.shape[2] != params.cnn_channels:
        raise ShapeError(f"adapter expects {params.cnn_channels} CNN channels, got {x.shape[2]}")
    x = conv2d(x, params.channel_w, params.channel_b)
    x = conv2d(x, params.spatial_w, params.spatial_b, padding=1)
    window = params.pool_window or pool_window_for(x.shape, vit_shape)
    x = avg_pool(x, window, window)
    if x.shape[:2] != tuple(vit_shape[:2]):
        raise ShapeError(f"aligned CNN grid {x.shape[:2]} does not match ViT grid {tuple(vit_shape[:2])}")
    return x


def fusion_adapter_forward(cnn_feat, vit_feat, params: FusionAdapterParams) -> np.ndarray:
    """``vit_feat + zero_conv(align(cnn_feat))``.

    Shapes are validated even for an inert adapter, whose output is then the
    decoder grid itself (adding an exact zero would flip the sign of -0.0).
    """
    vit = as_grid(vit_feat, name="vit features")
    if vit.shape[2] != params.vit_channels:
        raise ShapeError(f"adapter emits {params.vit_channels} channels, ViT grid has {vit.shape[2]}")
    aligned = align_features(cnn_feat, vit.shape, params)
    if params.is_inert():
        return vit.copy()
    return vit + conv2d(aligned, params.zero_w, params.zero_b)


def fusion_adapter_backward_cnn(grad_out, cnn_feat, vit_shape, params: FusionAdapterParams) -> np.ndarray:
    """Gradient of ``sum(grad_out * fusion_adapter_forward(...))`` w.r.t. ``cnn_feat``."""
    x0 = as_grid(cnn_feat)
    x1_shape = x0.shape[:2] + (params.vit_channels,)
    window = params.pool_window or pool_window_for(x1_shape, vit_shape)
    g = conv2d_backward_input(grad_out, params.zero_w, vit_shape)
    g = avg_pool_backward(g, x1_shape, window, window)
    g = conv2d_backward_input(g, params.spatial_w, x1_shape, padding=1)
    return conv2d_backward_input(g, params.channel_w, x0.shape)


def drm_forward(pyramid: FeaturePyramid, vit_decoder_feats: Sequence, adapters: Sequence[FusionAdapterParams]) -> list:
    """Inject adapter outputs into decoder layers 0-4; deeper layers pass through."""
    if not isinstance(pyramid, FeaturePyramid):
        pyramid = FeaturePyramid(list(pyramid))
    if len(adapters) != N_INJECTED:
        raise ShapeError(f"expected {N_INJECTED} adapters, got {len(adapters)}")
    if len(vit_decoder_feats) < N_INJECTED:
        raise ShapeError(f"need at least {N_INJECTED} decoder layers, got {len(vit_decoder_feats)}")
    out = []
    for i, feat in enumerate(vit_decoder_feats):
        if i < N_INJECTED:
            a = adapters[i]
            out.append(fusion_adapter_forward(pyramid[a.level], feat, a))
        else:
            out.append(feat)
    return out
