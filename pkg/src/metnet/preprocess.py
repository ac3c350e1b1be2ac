"""Input normalization, static features, packing, lead encoding and rate binning."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .profile import ModelProfile

PRECIP_OFFSET = 0.01
PRECIP_SCALE = 4.0
IQR_FLOOR = 1e-6


# --- normalization -----------------------------------------------------------

def normalize_robust(channel: np.ndarray, median: float, iqr: float) -> np.ndarray:
    """``(x - median) / iqr``; all zeros when the IQR is degenerate."""
    channel = np.asarray(channel, dtype=np.float32)
    if iqr < IQR_FLOOR:
        return np.zeros_like(channel)
    return ((channel - median) / iqr).astype(np.float32)


def robust_stats(values: np.ndarray) -> tuple[float, float]:
    """Median and q75 - q25 with linear-interpolation quantiles."""
    q25, q50, q75 = np.quantile(np.asarray(values, dtype=np.float64).ravel(), [0.25, 0.5, 0.75], method="linear")
    return float(q50), float(q75 - q25)


def normalize_precip(rate: np.ndarray) -> np.ndarray:
    """``ln(rate + 0.01) / 4`` elementwise. NaNs pass through for :func:`squash`."""
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate < 0):
        raise ValueError("precipitation rate must be non-negative")
    return (np.log(rate + PRECIP_OFFSET) / PRECIP_SCALE).astype(np.float32)


def squash(x: np.ndarray) -> np.ndarray:
    """Replace NaNs with 0, then tanh into (-1, 1)."""
    x = np.nan_to_num(np.asarray(x, dtype=np.float32), nan=0.0)
    return np.tanh(x)


# --- static features -------------------------------------------------------

@dataclass(frozen=True)
class GeoMaps:
    lon: np.ndarray
    lat: np.ndarray
    elevation: np.ndarray


def _to_unit_range(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.zeros_like(x, dtype=np.float32)
    return (2.0 * (x - lo) / (hi - lo) - 1.0).astype(np.float32)


def time_features(anchor: dt.datetime) -> np.ndarray:
    return np.array([anchor.hour / 24.0, anchor.day / 31.0, anchor.month / 12.0], dtype=np.float32)


def static_features(geo: GeoMaps, anchor: dt.datetime) -> np.ndarray:
    """``[H, W, 6]``: lon, lat, elevation scaled to [-1, 1] over the grid, then hour/24, day/31, month/12."""
    shape = geo.lon.shape
    if geo.lat.shape != shape or geo.elevation.shape != shape:
        raise ValueError("geo maps must share one shape")
    out = np.empty(shape + (6,), dtype=np.float32)
    out[..., 0] = _to_unit_range(geo.lon)
    out[..., 1] = _to_unit_range(geo.lat)
    out[..., 2] = _to_unit_range(geo.elevation)
    out[..., 3:] = time_features(anchor)
    return out


# --- packing ---------------------------------------------------------------

def space_to_depth(x: np.ndarray, block: int) -> np.ndarray:
    """``[H, W, C] -> [H/b, W/b, C*b*b]``; tile offsets (row-major) are the slow channel index."""
    h, w, c = x.shape[-3:]
    if h % block or w % block:
        raise ValueError(f"space_to_depth: {h}x{w} not divisible by block {block}")
    lead = x.shape[:-3]
    y = x.reshape(lead + (h // block, block, w // block, block, c))
    n = len(lead)
    y = np.moveaxis(y, n + 2, n + 1)
    return y.reshape(lead + (h // block, w // block, block * block * c))


def depth_to_space(x: np.ndarray, block: int) -> np.ndarray:
    h, w, cb = x.shape[-3:]
    if cb % (block * block):
        raise ValueError(f"depth_to_space: {cb} channels not divisible by {block * block}")
    c = cb // (block * block)
    lead = x.shape[:-3]
    n = len(lead)
    y = x.reshape(lead + (h, w, block, block, c))
    y = np.moveaxis(y, n + 2, n + 1)
    return y.reshape(lead + (h * block, w * block, c))


# --- lead time -------------------------------------------------------------

@dataclass(frozen=True)
class LeadTimeIndex:
    minutes: int
    index: int
    one_hot: np.ndarray


def encode_lead_time(minutes: int, leads: int) -> LeadTimeIndex:
    """Lead ``minutes`` (even, 2..2L) -> index ``minutes/2 - 1`` and its one-hot."""
    if int(minutes) != minutes or minutes % 2:
        raise ValueError(f"lead time must be an even number of minutes, got {minutes}")
    minutes = int(minutes)
    if not 2 <= minutes <= 2 * leads:
        raise ValueError(f"lead time {minutes} min outside [2, {2 * leads}]")
    i = minutes // 2 - 1
    one_hot = np.zeros(leads, dtype=np.float32)
    one_hot[i] = 1.0
    return LeadTimeIndex(minutes, i, one_hot)


def decode_lead_time(index: int) -> int:
    return 2 * (int(index) + 1)


# --- binning ---------------------------------------------------------------

def bin_edge(k, width: float = 0.2):
    return np.asarray(k, dtype=np.float64) * width


def rate_to_bin(rate, bins: int = 512, width: float = 0.2):
    """Bin index with ``k*width <= rate < (k+1)*width``; rates past the range go to the last bin."""
    r = np.asarray(rate, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("precipitation rate must be non-negative")
    k = np.floor(r / width)
    # Float division can land one bin off the k*width edges; snap back.
    k = np.where(bin_edge(k + 1, width) <= r, k + 1, k)
    k = np.where(bin_edge(k, width) > r, k - 1, k)
    k = np.minimum(k, bins - 1).astype(np.int64)
    return int(k) if k.ndim == 0 else k


def threshold_bin(threshold: float, bins: int = 512, width: float = 0.2) -> int:
    """First bin counted as ">= threshold": bins whose lower edge is >= threshold.

    Thresholds that are not bin multiples round down to the containing bin.
    """
    return rate_to_bin(threshold, bins, width)


def prob_above_threshold(probs: np.ndarray, threshold: float, width: float = 0.2) -> np.ndarray:
    """Sum of probabilities for bins at or above ``threshold`` (last axis is bins)."""
    probs = np.asarray(probs)
    start = threshold_bin(threshold, probs.shape[-1], width)
    return probs[..., start:].sum(axis=-1)


# --- quality mask ----------------------------------------------------------

def radar_quality_mask(shape: tuple[int, int], sites: Sequence[tuple[float, float]], radius: float) -> np.ndarray:
    """Union of discs of ``radius`` pixels around radar ``sites`` (row, col)."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    mask = np.zeros(shape, dtype=bool)
    for r, c in sites:
        mask |= (yy - r) ** 2 + (xx - c) ** 2 <= radius**2
    return mask.astype(np.float32)


# --- assembly --------------------------------------------------------------

@dataclass
class InputPatch:
    """``tensor`` is ``[t, H, W, c]`` with channels [precip, aux..., geo(3), time(3), lead(L)]."""

    tensor: np.ndarray
    anchor: dt.datetime
    lead: LeadTimeIndex

    @property
    def shape(self):
        return self.tensor.shape


def normalize_slice(precip: np.ndarray, aux: np.ndarray, stats: Sequence[tuple[float, float]]) -> np.ndarray:
    """One squashed ``[H, W, 1 + Cg]`` slice: precip log-transform, aux robust-normalized."""
    if aux.shape[-1] != len(stats):
        raise ValueError(f"{aux.shape[-1]} aux channels but {len(stats)} normalization entries")
    out = np.empty(precip.shape + (1 + aux.shape[-1],), dtype=np.float32)
    out[..., 0] = normalize_precip(precip)
    for k, (med, iqr) in enumerate(stats):
        out[..., 1 + k] = normalize_robust(aux[..., k], med, iqr)
    return squash(out)


def assemble_input(
    slices: Sequence[np.ndarray],
    statics: np.ndarray,
    lead: LeadTimeIndex,
    profile: ModelProfile,
    anchor: dt.datetime,
) -> InputPatch:
    """Stack normalized slices with static features and the tiled lead one-hot."""
    if len(slices) != profile.slices:
        raise ValueError(f"expected {profile.slices} slices, got {len(slices)}")
    h, w = statics.shape[:2]
    if statics.shape[-1] != 6:
        raise ValueError(f"statics must have 6 channels, got {statics.shape[-1]}")
    if lead.one_hot.shape != (profile.leads,):
        raise ValueError(f"lead one-hot length {lead.one_hot.shape[0]} != profile leads {profile.leads}")
    nb = 1 + profile.aux_channels
    out = np.empty((profile.slices, h, w, profile.input_channels), dtype=np.float32)
    for k, s in enumerate(slices):
        if s.shape != (h, w, nb):
            raise ValueError(f"slice {k} has shape {s.shape}, expected {(h, w, nb)}")
        out[k, ..., :nb] = s
    out[..., nb : nb + 6] = statics
    out[..., nb + 6 :] = lead.one_hot
    return InputPatch(out, anchor, lead)
