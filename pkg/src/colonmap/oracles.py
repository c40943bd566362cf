"""Independent slow reference implementations used to cross-check the fast paths.

Everything here is written as plain loops or via a different algorithm than
the production code (Horn's quaternion method instead of the SVD, golden
section instead of Weiszfeld, an O(n^2) scan instead of the KD-tree) so that
agreement between the two is meaningful.
"""
from __future__ import annotations

import math

import numpy as np


def loop_conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w, cin = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
    xp[padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for o in range(cout):
                acc = 0.0 if bias is None else float(bias[o])
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += kernel[o, c, a, b] * xp[i * stride + a, j * stride + b, c]
                out[i, j, o] = acc
    return out


def loop_avg_pool(x, window: int, stride: int = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    stride = window if stride is None else stride
    h, w, c = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            for k in range(c):
                acc = 0.0
                for a in range(window):
                    for b in range(window):
                        acc += x[i * stride + a, j * stride + b, k]
                out[i, j, k] = acc / (window * window)
    return out


def loop_fusion_forward(cnn_feat, vit_feat, params) -> np.ndarray:
    x = loop_conv2d(cnn_feat, params.channel_w, params.channel_b)
    x = loop_conv2d(x, params.spatial_w, params.spatial_b, padding=1)
    window = x.shape[0] // np.asarray(vit_feat).shape[0]
    x = loop_avg_pool(x, window)
    return np.asarray(vit_feat, dtype=np.float64) + loop_conv2d(x, params.zero_w, params.zero_b)


def brute_nearest(queries, points) -> tuple[np.ndarray, np.ndarray]:
    """O(n*m) nearest neighbour; lowest index wins ties."""
    qs = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    ps = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist = np.empty(qs.shape[0])
    index = np.empty(qs.shape[0], dtype=np.intp)
    for n, q in enumerate(qs):
        dx = q[0] - ps[:, 0]
        dy = q[1] - ps[:, 1]
        dz = q[2] - ps[:, 2]
        d2 = dx * dx + dy * dy + dz * dz
        k = int(np.argmin(d2))
        dist[n] = math.sqrt(d2[k])
        index[n] = k
    return dist, index


def golden_section_min(f, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 500) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def grid_argmin(f, lo: float, hi: float, n: int) -> float:
    """Minimizer of a vectorized ``f`` over ``n`` evenly spaced points of [lo, hi]."""
    xs = np.linspace(lo, hi, n)
    return float(xs[int(np.argmin(f(xs)))])


def horn_align(source, target, with_scale: bool = True, weights=None):
    """Closed-form absolute orientation via the quaternion eigenproblem (Horn 1987).

    Returns ``(s, R, t)`` minimizing ``sum w |target - (s R source + t)|^2``.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = np.zeros(3)
    mu_d = np.zeros(3)
    for i in range(len(src)):
        mu_s += w[i] * src[i]
        mu_d += w[i] * dst[i]
    M = np.zeros((3, 3))
    for i in range(len(src)):
        M += w[i] * np.outer(src[i] - mu_s, dst[i] - mu_d)
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = M
    N = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(N)
    qw, qx, qy, qz = vecs[:, -1]
    R = np.array([
        [qw * qw + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
        [2 * (qx * qy + qw * qz), qw * qw - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - qw * qx)],
        [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), qw * qw - qx * qx - qy * qy + qz * qz],
    ])
    if with_scale:
        num = 0.0
        den = 0.0
        for i in range(len(src)):
            a = src[i] - mu_s
            num += w[i] * float((dst[i] - mu_d) @ (R @ a))
            den += w[i] * float(a @ a)
        s = num / den
    else:
        s = 1.0
    return s, R, mu_d - s * R @ mu_s


def _mat(pose) -> np.ndarray:
    return pose.matrix()


def ate_reference(pred, gt, alignment: str = "sim3") -> float:
    P = pred.positions()
    G = gt.positions()
    if alignment == "none":
        s, R, t = 1.0, np.eye(3), np.zeros(3)
    else:
        s, R, t = horn_align(P, G, with_scale=alignment == "sim3")
    acc = 0.0
    for p, g in zip(P, G):
        e = g - (s * R @ p + t)
        acc += float(e @ e)
    return math.sqrt(acc / len(P))


def rpe_reference(pred, gt, delta: int = 1) -> tuple[float, float]:
    ts, rs = 0.0, 0.0
    n = len(gt) - delta
    for i in range(n):
        Eg = np.linalg.inv(_mat(gt[i])) @ _mat(gt[i + delta])
        Ep = np.linalg.inv(_mat(pred[i])) @ _mat(pred[i + delta])
        E = np.linalg.inv(Eg) @ Ep
        ts += float(E[:3, 3] @ E[:3, 3])
        R = E[:3, :3]
        sin_part = 0.5 * math.sqrt((R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2)
        cos_part = (np.trace(R) - 1.0) / 2.0
        rs += math.degrees(math.atan2(sin_part, cos_part)) ** 2
    return math.sqrt(ts / n), math.sqrt(rs / n)


def snippet_ate_reference(pred, gt, snippet_len: int = 5) -> float:
    errs = []
    for s in range(len(gt) - snippet_len + 1):
        g0 = np.linalg.inv(_mat(gt[s]))
        p0 = np.linalg.inv(_mat(pred[s]))
        g = [(g0 @ _mat(gt[s + k]))[:3, 3] for k in range(snippet_len)]
        p = [(p0 @ _mat(pred[s + k]))[:3, 3] for k in range(snippet_len)]
        num = sum(float(a @ b) for a, b in zip(g, p))
        den = sum(float(b @ b) for b in p)
        scale = num / den if den > 0 else 1.0
        errs.append(math.sqrt(sum(float((scale * b - a) @ (scale * b - a)) for a, b in zip(g, p)) / snippet_len))
    return sum(errs) / len(errs)


def _lower_median(values) -> float:
    v = sorted(values)
    return v[(len(v) - 1) // 2]


def depth_metrics_reference(pred, gt, mask=None, apply_median_scaling: bool = True) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pairs = [(float(p), float(g)) for p, g, m in zip(pred.ravel(), gt.ravel(),
             (np.ones(pred.size) if mask is None else np.asarray(mask).ravel())) if m > 0]
    s = _lower_median([g for _, g in pairs]) / _lower_median([p for p, _ in pairs]) if apply_median_scaling else 1.0
    n = len(pairs)
    abs_rel = sq_rel = sq = sq_log = good = 0.0
    for p, g in pairs:
        d = p * s
        abs_rel += abs(d - g) / g
        sq_rel += (d - g) ** 2 / g
        sq += (d - g) ** 2
        sq_log += (math.log(d) - math.log(g)) ** 2
        good += 1.0 if max(d / g, g / d) < 1.25 else 0.0
    return {"abs_rel": abs_rel / n, "sq_rel": sq_rel / n, "rmse": math.sqrt(sq / n),
            "rmse_log": math.sqrt(sq_log / n), "delta": good / n, "scale_used": s}


def pointmap_metrics_reference(pred, gt, mask=None) -> dict:
    """Unaligned point-map metrics with median z-scaling, via brute-force neighbours."""
    P = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    G = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    m = np.ones(len(P), bool) if mask is None else np.asarray(mask).reshape(-1) > 0
    m &= (P[:, 2] > 0) & (G[:, 2] > 0)
    P, G = P[m], G[m]
    s = _lower_median(G[:, 2].tolist()) / _lower_median(P[:, 2].tolist())
    P = P * s
    acc = float(np.mean(brute_nearest(P, G)[0]))
    comp = float(np.mean(brute_nearest(G, P)[0]))
    sq_rel = 0.0
    sq_log = 0.0
    for p, g in zip(P, G):
        gn = math.sqrt(float(g @ g))
        pn = math.sqrt(float(p @ p))
        sq_rel += float((p - g) @ (p - g)) / gn
        sq_log += (math.log(pn) - math.log(gn)) ** 2
    return {"accuracy": acc, "completeness": comp, "sq_rel": sq_rel / len(P),
            "rmse_log": math.sqrt(sq_log / len(P)), "scale_used": s}
