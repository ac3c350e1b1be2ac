"""Persistence and optical-flow extrapolation baselines.

Flow vectors are in pixels per frame interval, ``u`` along columns and ``v``
along rows, with the convention ``f1(p) ~= f0(p - flow(p))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

MIN_EIGENVALUE = 1e-6


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError(f"flow components differ in shape: {self.u.shape} vs {self.v.shape}")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def uniform(cls, shape, u: float, v: float) -> "FlowField":
        return cls(np.full(shape, u, dtype=np.float64), np.full(shape, v, dtype=np.float64))

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls.uniform(shape, 0.0, 0.0)


def persistence_forecast(last_frame: np.ndarray, lead: int = 0) -> np.ndarray:
    """The latest observation, unchanged, for any lead."""
    return np.array(last_frame, copy=True)


def _sample(field: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # Bilinear, zero outside the grid.
    return ndimage.map_coordinates(field, [rows, cols], order=1, mode="constant", cval=0.0)


def _warp_back(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``image`` at ``p + flow(p)`` (nearest border) for Lucas-Kanade registration."""
    rows, cols = np.mgrid[0 : image.shape[0], 0 : image.shape[1]].astype(np.float64)
    return ndimage.map_coordinates(image, [rows + v, cols + u], order=1, mode="nearest")


def _lk_increment(f0: np.ndarray, f1w: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    avg = 0.5 * (f0 + f1w)
    iy, ix = np.gradient(avg)
    it = f1w - f0
    box = lambda a: ndimage.uniform_filter(a, size=window, mode="nearest")  # noqa: E731
    sxx, syy, sxy = box(ix * ix), box(iy * iy), box(ix * iy)
    sxt, syt = box(ix * it), box(iy * it)
    trace = sxx + syy
    det = sxx * syy - sxy * sxy
    disc = np.sqrt(np.maximum(0.25 * trace * trace - det, 0.0))
    min_eig = 0.5 * trace - disc
    ok = min_eig >= MIN_EIGENVALUE
    safe_det = np.where(ok, det, 1.0)
    # Solve [sxx sxy; sxy syy] d = -[sxt; syt]; f1(p + d) ~= f0(p) means the content moved by d.
    du = np.where(ok, -(syy * sxt - sxy * syt) / safe_det, 0.0)
    dv = np.where(ok, -(sxx * syt - sxy * sxt) / safe_det, 0.0)
    return du, dv


def lucas_kanade_flow(
    f0: np.ndarray,
    f1: np.ndarray,
    window: int = 7,
    pyramid_levels: int = 3,
    iterations: int = 4,
) -> FlowField:
    """Coarse-to-fine dense Lucas-Kanade flow from ``f0`` to ``f1``.

    Level ``l`` blurs both frames with sigma ``2**l - 1`` and widens the
    window by ``2**l``, at full resolution. Keeping every level on the
    original grid (no decimation) makes the estimate equivariant to integer
    shifts. Windows whose structure tensor has minimum eigenvalue below 1e-6
    get no update at that level.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    if f0.shape != f1.shape:
        raise ValueError(f"frames differ in shape: {f0.shape} vs {f1.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if pyramid_levels < 1:
        raise ValueError("pyramid_levels must be >= 1")
    u = np.zeros(f0.shape)
    v = np.zeros(f0.shape)
    for level in range(pyramid_levels - 1, -1, -1):
        scale = 2**level
        sigma = scale - 1.0
        a = ndimage.gaussian_filter(f0, sigma, mode="nearest") if sigma else f0
        b = ndimage.gaussian_filter(f1, sigma, mode="nearest") if sigma else f1
        size = window * scale + (0 if scale == 1 else 1)
        for _ in range(iterations):
            du, dv = _lk_increment(a, _warp_back(b, u, v), size)
            u = u + du
            v = v + dv
    return FlowField(u, v)


def densify_flow(flow: FlowField, weight: np.ndarray, sigma: float) -> FlowField:
    """Fill low-confidence pixels with the confidence-weighted local mean flow.

    Backward extrapolation reads the flow at the destination pixel, which is
    often rain-free and textureless; without filling, rain would not move
    into it.
    """
    wsum = ndimage.gaussian_filter(weight, sigma, mode="constant")
    if wsum.max() <= 0:
        return FlowField.zeros(flow.shape)
    safe = np.where(wsum > 1e-12, wsum, 1.0)
    u_fill = np.where(wsum > 1e-12, ndimage.gaussian_filter(flow.u * weight, sigma, mode="constant") / safe, 0.0)
    v_fill = np.where(wsum > 1e-12, ndimage.gaussian_filter(flow.v * weight, sigma, mode="constant") / safe, 0.0)
    # Far from any support, fall back to the global weighted mean.
    total = weight.sum()
    gu = (flow.u * weight).sum() / total
    gv = (flow.v * weight).sum() / total
    blend = np.clip(wsum / (wsum.max() * 0.05), 0.0, 1.0)
    return FlowField(blend * u_fill + (1 - blend) * gu, blend * v_fill + (1 - blend) * gv)


def extrapolate(field: np.ndarray, flow: FlowField, steps: int, scheme: str = "constant_vector") -> np.ndarray:
    """Backward-warp ``field`` forward by ``steps`` frame intervals.

    ``constant_vector`` samples once at ``p - steps * flow(p)``;
    ``semi_lagrangian`` traces the departure point back one step at a time,
    re-reading the flow where it lands. Out-of-grid samples are 0.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    field = np.asarray(field, dtype=np.float64)
    if steps == 0:
        return field.copy()
    rows, cols = np.mgrid[0 : field.shape[0], 0 : field.shape[1]].astype(np.float64)
    if scheme == "constant_vector":
        r = rows - steps * flow.v
        c = cols - steps * flow.u
    elif scheme == "semi_lagrangian":
        r, c = rows.copy(), cols.copy()
        for _ in range(steps):
            du = ndimage.map_coordinates(flow.u, [r, c], order=1, mode="nearest")
            dv = ndimage.map_coordinates(flow.v, [r, c], order=1, mode="nearest")
            r, c = r - dv, c - du
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return np.maximum(_sample(field, r, c), 0.0)


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[:2]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than field {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return x[top : top + size, left : left + size]


SCHEMES = {"of-cv": "constant_vector", "of-sl": "semi_lagrangian"}


def optical_flow_forecast(
    history: Sequence[np.ndarray],
    lead: int,
    frame_minutes: int = 2,
    scheme: str = "constant_vector",
    context_crop: int | None = None,
    target_size: int | None = None,
    pixel_km: float = 1.0,
    window: int = 7,
    pyramid_levels: int = 3,
) -> np.ndarray:
    """Fit flow on the last two frames of ``history`` and extrapolate ``lead`` minutes.

    ``context_crop`` (km) restricts both fitting and extrapolation to a
    centred square; everything outside it is treated as unobserved (zero).
    Returns the centred ``target_size`` crop, or the full field.
    """
    if len(history) < 2:
        raise ValueError("optical flow needs at least two history frames")
    f0 = np.asarray(history[-2], dtype=np.float64)
    f1 = np.asarray(history[-1], dtype=np.float64)
    if context_crop is not None:
        size = int(round(context_crop / pixel_km))
        f0 = center_crop(f0, size)
        f1 = center_crop(f1, size)
    flow = lucas_kanade_flow(f0, f1, window=window, pyramid_levels=pyramid_levels)
    support = ((f0 > 0.05) | (f1 > 0.05)).astype(np.float64)
    moving = (np.abs(flow.u) + np.abs(flow.v)) > 0
    flow = densify_flow(flow, support * moving, sigma=max(f1.shape) / 8.0)
    steps = int(round(lead / frame_minutes))
    out = extrapolate(f1, flow, steps, scheme)
    if target_size is not None:
        out = center_crop(out, target_size)
    return out
