"""Shape-preserving piecewise cubic Hermite interpolation (Fritsch-Carlson)."""

from __future__ import annotations

import numpy as np


class PchipRangeError(ValueError):
    pass


def pchip_slopes(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Node derivatives along the last axis of ``y``.

    Interior slopes are the weighted harmonic mean of the adjacent secants
    (zero at local extrema); end slopes use the one-sided three-point
    formula, clipped so the interpolant stays monotone.
    """
    h = np.diff(t)
    delta = np.diff(y, axis=-1) / h
    n = t.size
    d = np.zeros_like(y, dtype=np.float64)
    if n == 2:
        d[..., 0] = delta[..., 0]
        d[..., 1] = delta[..., 0]
        return d

    d0, d1 = delta[..., :-1], delta[..., 1:]
    h0, h1 = h[:-1], h[1:]
    w1 = 2 * h1 + h0
    w2 = h1 + 2 * h0
    same_sign = (np.sign(d0) * np.sign(d1)) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        hm = (w1 + w2) / (w1 / d0 + w2 / d1)
    d[..., 1:-1] = np.where(same_sign, hm, 0.0)

    d[..., 0] = _edge_slope(h[0], h[1], delta[..., 0], delta[..., 1])
    d[..., -1] = _edge_slope(h[-1], h[-2], delta[..., -1], delta[..., -2])
    return d


def _edge_slope(h0, h1, m0, m1):
    d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    d = np.where(np.sign(d) != np.sign(m0), 0.0, d)
    flip = (np.sign(m0) != np.sign(m1)) & (np.abs(d) > np.abs(3 * m0))
    return np.where(flip, 3 * m0, d)


def pchip_interpolate(values, t_src, t_dst) -> np.ndarray:
    """Evaluate the PCHIP interpolant of ``values`` (last axis on ``t_src``) at ``t_dst``."""
    y = np.asarray(values, dtype=np.float64)
    t = np.asarray(t_src, dtype=np.float64)
    q = np.asarray(t_dst, dtype=np.float64)
    if t.ndim != 1 or t.size < 2 or y.shape[-1] != t.size:
        raise ValueError("t_src must be 1-D, length >= 2, matching values' last axis")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_src must be strictly increasing")
    if q.size and (q.min() < t[0] or q.max() > t[-1]):
        raise PchipRangeError(
            f"t_dst spans [{q.min()}, {q.max()}], outside [{t[0]}, {t[-1]}]"
        )
    d = pchip_slopes(t, y)
    k = np.clip(np.searchsorted(t, q, side="right") - 1, 0, t.size - 2)
    h = t[k + 1] - t[k]
    s = (q - t[k]) / h
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    y0, y1 = y[..., k], y[..., k + 1]
    return h00 * y0 + h10 * h * d[..., k] + h01 * y1 + h11 * h * d[..., k + 1]
