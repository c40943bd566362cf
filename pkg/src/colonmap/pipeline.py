"""Assemble the loss inputs of a consecutive frame pair and evaluate every term."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .camera import Intrinsics
from .geometry import PoseSE3
from .losses import (GeometryInputs, LossConfig, confidence_weighted_loss, geometry_consistency_loss,
                     photometric_loss, photometric_map)
from .warp import reconstruct_image


class MissingFieldError(KeyError):
    pass


def _need(frame, field: str, r: int):
    table = getattr(frame, field)
    if r not in table:
        raise MissingFieldError(f"frame {frame.index} lacks {field}[{r}]")
    return table[r]


def pair_geometry(prev, cur, T_t_to_tm1: Optional[PoseSE3] = None,
                  T_tm1_to_t: Optional[PoseSE3] = None) -> GeometryInputs:
    """Geometry-loss inputs for frames ``prev`` = t-1 and ``cur`` = t.

    The two relative poses are independent inputs (as two network predictions
    would be); each defaults to the motion between the stored camera poses.
    """
    t, s = cur.index, prev.index
    if T_t_to_tm1 is None:
        T_t_to_tm1 = prev.pose.inverse() @ cur.pose
    if T_tm1_to_t is None:
        T_tm1_to_t = cur.pose.inverse() @ prev.pose
    return GeometryInputs(
        X_t_t=cur.pointmap,
        X_tm1_tm1=prev.pointmap,
        X_tm1_t=_need(prev, "pointmaps_in", t),
        X_t_tm1=_need(cur, "pointmaps_in", s),
        F_t_from_tm1=_need(cur, "flows", s),
        F_tm1_from_t=_need(prev, "flows", t),
        M_t_from_tm1=_need(cur, "occlusion", s),
        M_tm1_from_t=_need(prev, "occlusion", t),
        T_t_to_tm1=T_t_to_tm1,
        T_tm1_to_t=T_tm1_to_t,
    )


def pair_losses(K: Intrinsics, prev, cur, cfg: LossConfig = LossConfig(),
                T_t_to_tm1: Optional[PoseSE3] = None, T_tm1_to_t: Optional[PoseSE3] = None) -> dict:
    """Photometric, confidence-weighted and geometry terms for the pair (t, t-1).

    Frame t is reconstructed from t-1 through X^{t;t} and T^{t->t-1}; frame
    t-1 from t through X^{t-1;t-1} and T^{t-1->t}. The frame-t photometric map
    carries the confidence weighting.
    """
    geo = pair_geometry(prev, cur, T_t_to_tm1, T_tm1_to_t)
    rec_t, m_t = reconstruct_image(K, geo.T_t_to_tm1, cur.pointmap, prev.image,
                                   occlusion=geo.M_t_from_tm1)
    rec_tm1, m_tm1 = reconstruct_image(K, geo.T_tm1_to_t, prev.pointmap, cur.image,
                                       occlusion=geo.M_tm1_from_t)
    photo_t = photometric_loss(cur.image, rec_t, m_t, cfg)
    photo_tm1 = photometric_loss(prev.image, rec_tm1, m_tm1, cfg)
    l_t = sum(photometric_map(cur.image, rec_t, m_t, cfg)[:2])
    l_tm1 = sum(photometric_map(prev.image, rec_tm1, m_tm1, cfg)[:2])
    conf = confidence_weighted_loss(l_t, cur.confidence, l_tm1, (m_t, m_tm1), cfg)
    geom = geometry_consistency_loss(geo, cfg)
    return {
        "photometric_t": photo_t.total,
        "photometric_tm1": photo_tm1.total,
        "confidence_weighted": conf.total,
        "conf_aware": conf.terms["conf_aware"],
        "t_flow": geom.terms["t_flow"],
        "t_pose": geom.terms["t_pose"],
        "geometry": geom.total,
        "total": conf.total + geom.total,
        "valid_counts": {"photo_t": photo_t.valid_counts["N"], "photo_tm1": photo_tm1.valid_counts["N"],
                         **geom.valid_counts},
    }


def translation_perturbation(sigma: float, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, sigma, 3)
