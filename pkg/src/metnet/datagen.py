"""Synthetic weather episodes standing in for radar (precip) and satellite (aux) data.

Precipitation is a sum of isotropic Gaussian blobs. Blob centres move with a
steady smooth flow, amplitudes grow or decay exponentially, and new blobs are
born at a Poisson rate anywhere in a margin-extended domain so rain can enter
from the boundary. Fields are rendered analytically, so pure advection on a
uniform flow shifts a frame exactly.

Aux channels are blurred, shifted or thresholded functions of precipitation
plus independent smooth texture; no aux channel sees precipitation at full
resolution.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .baselines import FlowField
from .preprocess import GeoMaps, radar_quality_mask
from .profile import ModelProfile

MISMATCH_TOLERANCE_MIN = 5
EPOCH = dt.datetime(2018, 1, 1)
MIN_AMPLITUDE = 0.05


class SampleUnavailable(LookupError):
    """The episode cannot supply the requested input window or target."""


@dataclass(frozen=True)
class DynamicsConfig:
    height: int = 64
    width: int = 64
    pixel_km: float = 1.0
    frame_minutes: int = 2
    frames: int = 100
    aux_channels: int = 4
    # Flow: km/min, direction in degrees (0 = +column, 90 = +row).
    flow_speed: float = 0.3
    flow_direction_deg: float = 0.0
    direction_spread_deg: float = 0.0
    speed_spread: float = 0.0
    flow_perturbation: float = 0.0
    # Blob population.
    initial_blobs: int = 12
    birth_rate: float = 0.0
    growth_rate: float = 0.0
    sigma_km: tuple[float, float] = (2.0, 5.0)
    peak_mmh: tuple[float, float] = (1.0, 20.0)
    margin_km: float = 24.0
    # Radar coverage for the quality mask.
    radar_sites: int = 4
    radar_radius_km: float = 28.0

    def __post_init__(self):
        for key in ("height", "width", "frames", "frame_minutes"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if self.pixel_km <= 0:
            raise ValueError("pixel_km must be positive")
        if self.aux_channels < 0 or self.initial_blobs < 0 or self.birth_rate < 0 or self.growth_rate < 0:
            raise ValueError("aux_channels, initial_blobs, birth_rate and growth_rate must be non-negative")
        object.__setattr__(self, "sigma_km", tuple(self.sigma_km))
        object.__setattr__(self, "peak_mmh", tuple(self.peak_mmh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sigma_km"] = list(self.sigma_km)
        d["peak_mmh"] = list(self.peak_mmh)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown dynamics keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Episode:
    timestamps: np.ndarray  # int minutes from start, uniform spacing
    precip: np.ndarray  # [F, H, W] mm/h
    aux: np.ndarray  # [F, H, W, Cg]
    flow_truth: FlowField  # pixels per frame
    seed: int
    params: DynamicsConfig
    geo: GeoMaps
    start: dt.datetime
    quality_mask: np.ndarray  # [H, W] in {0, 1}
    episode_id: int = 0

    @property
    def frames(self):
        return [(int(t), self.precip[k], self.aux[k]) for k, t in enumerate(self.timestamps)]

    @property
    def frame_minutes(self) -> int:
        return self.params.frame_minutes

    @property
    def duration_min(self) -> int:
        return int(self.timestamps[-1])

    def datetime_at(self, minutes: int) -> dt.datetime:
        return self.start + dt.timedelta(minutes=int(minutes))


@dataclass
class _Blobs:
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    amp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rate: np.ndarray = field(default_factory=lambda: np.zeros(0))
    peak: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def extend(self, other: "_Blobs") -> None:
        for f in dataclasses.fields(self):
            setattr(self, f.name, np.concatenate([getattr(self, f.name), getattr(other, f.name)]))

    def keep(self, mask: np.ndarray) -> None:
        for f in dataclasses.fields(self):
            setattr(self, f.name, getattr(self, f.name)[mask])


class _Flow:
    """Steady divergence-free flow in pixels/minute: uniform drift plus a sinusoidal shear."""

    def __init__(self, cfg: DynamicsConfig, rng: np.random.Generator):
        direction = np.deg2rad(cfg.flow_direction_deg + rng.uniform(-1, 1) * cfg.direction_spread_deg)
        speed = cfg.flow_speed * (1.0 + rng.uniform(-1, 1) * cfg.speed_spread)
        to_px = 1.0 / cfg.pixel_km
        self.u0 = speed * np.cos(direction) * to_px
        self.v0 = speed * np.sin(direction) * to_px
        self.amp = cfg.flow_perturbation * to_px
        self.phase = rng.uniform(0, 2 * np.pi, size=2)
        self.ky = 2 * np.pi / max(cfg.height, 1)
        self.kx = 2 * np.pi / max(cfg.width, 1)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.amp == 0.0:
            return np.full_like(x, self.u0, dtype=np.float64), np.full_like(y, self.v0, dtype=np.float64)
        u = self.u0 + self.amp * np.sin(self.ky * y + self.phase[0])
        v = self.v0 + self.amp * np.sin(self.kx * x + self.phase[1])
        return u, v


def _spawn(rng: np.random.Generator, n: int, cfg: DynamicsConfig, newborn: bool) -> _Blobs:
    m = cfg.margin_km / cfg.pixel_km
    peak = rng.uniform(*cfg.peak_mmh, size=n)
    if cfg.growth_rate > 0:
        if newborn:
            amp = np.full(n, 2 * MIN_AMPLITUDE)
            rate = rng.uniform(0.5, 1.0, size=n) * cfg.growth_rate
        else:
            amp = rng.uniform(0.1, 1.0, size=n) * peak
            rate = rng.uniform(-1.0, 1.0, size=n) * cfg.growth_rate
    else:
        amp = peak.copy()
        rate = np.zeros(n)
    return _Blobs(
        x=rng.uniform(-m, cfg.width + m, size=n),
        y=rng.uniform(-m, cfg.height + m, size=n),
        sigma=rng.uniform(*cfg.sigma_km, size=n) / cfg.pixel_km,
        amp=amp,
        rate=rate,
        peak=peak,
    )


def _render(blobs: _Blobs, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if blobs.x.size == 0:
        return np.zeros(yy.shape, dtype=np.float32)
    out = np.zeros(yy.shape, dtype=np.float64)
    for x, y, s, a in zip(blobs.x, blobs.y, blobs.sigma, blobs.amp):
        out += a * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * s * s))
    return out.astype(np.float32)


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f / (f.std() + 1e-12)).astype(np.float32)


def _aux_channels(precip: np.ndarray, textures: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Satellite-like proxies. Channel kinds cycle: blurred, blurred+shifted, cloud mask, texture."""
    h, w = precip.shape
    cg = textures.shape[-1]
    out = np.empty((h, w, cg), dtype=np.float32)
    blur2 = ndimage.gaussian_filter(precip, 2.0)
    for k in range(cg):
        kind = k % 4
        noise = 0.1 * _smooth_noise(rng, (h, w), 1.5)
        if kind == 0:
            base = np.log1p(blur2)
        elif kind == 1:
            base = np.log1p(ndimage.shift(ndimage.gaussian_filter(precip, 3.0), (2.0, 2.0), order=1, mode="nearest"))
        elif kind == 2:
            base = (ndimage.gaussian_filter(precip, 3.0) > 0.5).astype(np.float32)
        else:
            base = 0.2 * np.log1p(ndimage.gaussian_filter(precip, 5.0))
        out[..., k] = base + 0.3 * textures[..., k] + noise
    return out


def generate_episode(params: DynamicsConfig, seed: int, start: Optional[dt.datetime] = None, episode_id: int = 0) -> Episode:
    """Simulate one episode; identical (params, seed, start) give identical arrays."""
    rng = np.random.default_rng(seed)
    cfg = params
    h, w = cfg.height, cfg.width
    if start is None:
        start = EPOCH + dt.timedelta(days=int(rng.integers(0, 570)), hours=int(rng.integers(0, 24)))
    flow = _Flow(cfg, rng)
    blobs = _spawn(rng, cfg.initial_blobs, cfg, newborn=False)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    textures = np.stack([_smooth_noise(rng, (h, w), 3.0) for _ in range(cfg.aux_channels)], axis=-1) if cfg.aux_channels else np.zeros((h, w, 0), np.float32)
    m = cfg.margin_km / cfg.pixel_km
    dt_min = float(cfg.frame_minutes)

    precip = np.empty((cfg.frames, h, w), dtype=np.float32)
    aux = np.empty((cfg.frames, h, w, cfg.aux_channels), dtype=np.float32)
    for k in range(cfg.frames):
        precip[k] = _render(blobs, yy, xx)
        aux[k] = _aux_channels(precip[k], textures, rng)
        # Midpoint step; exact for uniform flow.
        u, v = flow(blobs.x, blobs.y)
        um, vm = flow(blobs.x + 0.5 * dt_min * u, blobs.y + 0.5 * dt_min * v)
        blobs.x = blobs.x + dt_min * um
        blobs.y = blobs.y + dt_min * vm
        if cfg.growth_rate > 0:
            blobs.amp = blobs.amp * np.exp(blobs.rate * dt_min)
            over = blobs.amp > blobs.peak
            blobs.rate = np.where(over, -np.abs(blobs.rate), blobs.rate)
            blobs.amp = np.minimum(blobs.amp, blobs.peak)
            blobs.keep(blobs.amp >= MIN_AMPLITUDE)
        inside = (
            (blobs.x > -m - 3 * blobs.sigma) & (blobs.x < w + m + 3 * blobs.sigma)
            & (blobs.y > -m - 3 * blobs.sigma) & (blobs.y < h + m + 3 * blobs.sigma)
        )
        blobs.keep(inside)
        if cfg.birth_rate > 0:
            blobs.extend(_spawn(rng, int(rng.poisson(cfg.birth_rate)), cfg, newborn=True))

    u_grid, v_grid = flow(xx, yy)
    flow_truth = FlowField((u_grid * dt_min).astype(np.float32), (v_grid * dt_min).astype(np.float32))

    lon0 = rng.uniform(-125.0, -75.0)
    lat0 = rng.uniform(30.0, 48.0)
    elevation = ndimage.gaussian_filter(rng.standard_normal((h, w)), 8.0, mode="reflect")
    elevation = 3000.0 * (elevation - elevation.min()) / (np.ptp(elevation) + 1e-12)
    geo = GeoMaps(
        lon=(lon0 + 0.01 * cfg.pixel_km * xx).astype(np.float32),
        lat=(lat0 - 0.01 * cfg.pixel_km * yy).astype(np.float32),
        elevation=elevation.astype(np.float32),
    )
    # First site near the centre so the target patch is always observed.
    sites = [(rng.uniform(3 * h / 8, 5 * h / 8), rng.uniform(3 * w / 8, 5 * w / 8))]
    sites += [(rng.uniform(0, h), rng.uniform(0, w)) for _ in range(cfg.radar_sites - 1)]
    quality = radar_quality_mask((h, w), sites, cfg.radar_radius_km / cfg.pixel_km)

    return Episode(
        timestamps=np.arange(cfg.frames, dtype=np.int64) * cfg.frame_minutes,
        precip=precip,
        aux=aux,
        flow_truth=flow_truth,
        seed=seed,
        params=cfg,
        geo=geo,
        start=start,
        quality_mask=quality,
        episode_id=episode_id,
    )


@dataclass
class RawSample:
    anchor_min: int
    lead_min: int
    slice_times: list[int]
    precip: np.ndarray  # [t, H, W]
    aux: np.ndarray  # [t, H, W, Cg]
    target: np.ndarray  # [H, W]
    target_time: int


def _frame_at_or_before(ts: np.ndarray, nominal: int) -> int:
    k = int(np.searchsorted(ts, nominal, side="right")) - 1
    if k < 0 or nominal - ts[k] > MISMATCH_TOLERANCE_MIN:
        raise SampleUnavailable(f"no frame within {MISMATCH_TOLERANCE_MIN} min before t={nominal}")
    return k


def _frame_at_or_after(ts: np.ndarray, nominal: int) -> int:
    k = int(np.searchsorted(ts, nominal, side="left"))
    if k >= len(ts) or ts[k] - nominal > MISMATCH_TOLERANCE_MIN:
        raise SampleUnavailable(f"no frame within {MISMATCH_TOLERANCE_MIN} min after t={nominal}")
    return k


def check_lead(lead: int, profile: ModelProfile) -> None:
    if lead % 2 or not 2 <= lead <= profile.max_lead_min:
        raise SampleUnavailable(f"lead {lead} min not an even value in [2, {profile.max_lead_min}]")


def make_sample(episode: Episode, anchor_min: int, lead: int, profile: ModelProfile) -> RawSample:
    """Input slices (oldest first) ending at ``anchor_min`` plus the target frame at ``anchor_min + lead``."""
    check_lead(lead, profile)
    ts = episode.timestamps
    times = [anchor_min - (profile.slices - 1 - k) * profile.slice_spacing_min for k in range(profile.slices)]
    idx = [_frame_at_or_before(ts, t) for t in times]
    tk = _frame_at_or_after(ts, anchor_min + lead)
    return RawSample(
        anchor_min=anchor_min,
        lead_min=lead,
        slice_times=[int(ts[k]) for k in idx],
        precip=episode.precip[idx],
        aux=episode.aux[idx],
        target=episode.precip[tk],
        target_time=int(ts[tk]),
    )


def valid_anchors(episode: Episode, profile: ModelProfile, stride_min: int, max_lead: Optional[int] = None) -> list[int]:
    """Anchor times whose full input window and longest lead fit inside the episode."""
    max_lead = profile.max_lead_min if max_lead is None else max_lead
    lo = profile.input_window_min
    hi = episode.duration_min - max_lead
    lo = int(np.ceil(lo / episode.frame_minutes) * episode.frame_minutes)
    return list(range(lo, hi + 1, stride_min))


def temporal_split(episodes: Sequence, pattern: tuple[int, int, int] = (16, 2, 2)) -> tuple[list, list, list]:
    """Assign contiguous runs of episodes to train/val/test, repeating ``pattern``."""
    if len(pattern) != 3 or min(pattern) <= 0:
        raise ValueError(f"pattern must be three positive block lengths, got {pattern}")
    cycle = sum(pattern)
    if len(episodes) < cycle:
        raise ValueError(f"{len(episodes)} episodes is fewer than one pattern cycle ({cycle})")
    train, val, test = [], [], []
    for i, ep in enumerate(episodes):
        pos = i % cycle
        if pos < pattern[0]:
            train.append(ep)
        elif pos < pattern[0] + pattern[1]:
            val.append(ep)
        else:
            test.append(ep)
    return train, val, test
