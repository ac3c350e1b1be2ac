"""Dataset directories and model-ready sample construction.

Layout::

    <root>/manifest.json
    <root>/episode_000/{precip,aux,flow_u,flow_v,lon,lat,elevation,quality_mask}.f32

Blobs are raw little-endian float32, row-major. Normalization statistics
(per aux channel median/IQR over the training split) live in the manifest.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import FlowField, center_crop
from .datagen import DynamicsConfig, EPOCH, Episode, generate_episode, make_sample, temporal_split
from .preprocess import (
    GeoMaps,
    assemble_input,
    encode_lead_time,
    normalize_slice,
    rate_to_bin,
    robust_stats,
    static_features,
)
from .profile import ModelProfile

DATASET_FORMAT = "metnet-dataset-v1"
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Dataset missing, malformed, or unable to supply a sample."""


@dataclass
class Dataset:
    dynamics: DynamicsConfig
    episodes: list[Episode]
    seed: int
    pattern: tuple[int, int, int] = (16, 2, 2)
    stats: list[tuple[float, float]] = field(default_factory=list)
    root: Optional[Path] = None

    def split(self, name: str) -> list[Episode]:
        train, val, test = temporal_split(self.episodes, self.pattern)
        try:
            return {"train": train, "val": val, "test": test}[name]
        except KeyError:
            raise DataError(f"unknown split {name!r}") from None

    def split_of(self, episode_id: int) -> str:
        for name in SPLITS:
            if any(ep.episode_id == episode_id for ep in self.split(name)):
                return name
        raise DataError(f"episode {episode_id} not in dataset")

    def episode(self, episode_id: int) -> Episode:
        for ep in self.episodes:
            if ep.episode_id == episode_id:
                return ep
        raise DataError(f"no episode with id {episode_id}")


def compute_stats(episodes: Sequence[Episode]) -> list[tuple[float, float]]:
    if not episodes:
        raise DataError("no training episodes to compute normalization statistics from")
    cg = episodes[0].aux.shape[-1]
    return [robust_stats(np.concatenate([ep.aux[..., k].ravel() for ep in episodes])) for k in range(cg)]


def generate_dataset(
    dynamics: DynamicsConfig,
    episodes: int,
    seed: int,
    pattern: tuple[int, int, int] = (16, 2, 2),
) -> Dataset:
    """Episodes on consecutive simulated days; episode seeds derive from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(episodes)
    hours = np.random.default_rng(seed).integers(0, 24, size=episodes)
    eps = [
        generate_episode(dynamics, int(s), start=EPOCH + dt.timedelta(days=i, hours=int(h)), episode_id=i)
        for i, (s, h) in enumerate(zip(seeds, hours))
    ]
    ds = Dataset(dynamics, eps, seed, tuple(pattern))
    ds.stats = compute_stats(ds.split("train"))
    return ds


def _write(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing blob {path}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise DataError(f"{path} holds {raw.size} values, expected shape {tuple(shape)}")
    return raw.reshape(shape).astype(np.float32)


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = ds.dynamics
    entries = []
    for ep in ds.episodes:
        name = f"episode_{ep.episode_id:03d}"
        d = root / name
        d.mkdir(exist_ok=True)
        _write(d / "precip.f32", ep.precip)
        _write(d / "aux.f32", ep.aux)
        _write(d / "flow_u.f32", ep.flow_truth.u)
        _write(d / "flow_v.f32", ep.flow_truth.v)
        _write(d / "lon.f32", ep.geo.lon)
        _write(d / "lat.f32", ep.geo.lat)
        _write(d / "elevation.f32", ep.geo.elevation)
        _write(d / "quality_mask.f32", ep.quality_mask)
        entries.append({
            "id": ep.episode_id,
            "dir": name,
            "seed": ep.seed,
            "start": ep.start.isoformat(),
            "split": ds.split_of(ep.episode_id),
        })
    manifest = {
        "format": DATASET_FORMAT,
        "grid": {"height": cfg.height, "width": cfg.width, "pixel_km": cfg.pixel_km},
        "frame_minutes": cfg.frame_minutes,
        "frames": cfg.frames,
        "aux_channels": cfg.aux_channels,
        "dynamics": cfg.to_dict(),
        "seed": ds.seed,
        "split_pattern": list(ds.pattern),
        "normalization": {"aux": [{"median": m, "iqr": q} for m, q in ds.stats]},
        "episodes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds.root = root
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
        if manifest.get("format") != DATASET_FORMAT:
            raise DataError(f"{path}: unsupported format {manifest.get('format')!r}")
        cfg = DynamicsConfig.from_dict(manifest["dynamics"])
        f, h, w, cg = cfg.frames, cfg.height, cfg.width, cfg.aux_channels
        episodes = []
        for e in manifest["episodes"]:
            d = root / e["dir"]
            episodes.append(Episode(
                timestamps=np.arange(f, dtype=np.int64) * cfg.frame_minutes,
                precip=_read(d / "precip.f32", (f, h, w)),
                aux=_read(d / "aux.f32", (f, h, w, cg)),
                flow_truth=FlowField(_read(d / "flow_u.f32", (h, w)), _read(d / "flow_v.f32", (h, w))),
                seed=int(e["seed"]),
                params=cfg,
                geo=GeoMaps(_read(d / "lon.f32", (h, w)), _read(d / "lat.f32", (h, w)), _read(d / "elevation.f32", (h, w))),
                start=dt.datetime.fromisoformat(e["start"]),
                quality_mask=_read(d / "quality_mask.f32", (h, w)),
                episode_id=int(e["id"]),
            ))
        stats = [(float(s["median"]), float(s["iqr"])) for s in manifest["normalization"]["aux"]]
        return Dataset(cfg, episodes, int(manifest["seed"]), tuple(manifest["split_pattern"]), stats, root)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed manifest ({exc})") from exc


# --- samples for the model ---------------------------------------------------

@dataclass
class Sample:
    patch: np.ndarray  # [t, H, W, c]
    target_rate: np.ndarray  # [T, T] mm/h
    target_bins: np.ndarray  # [T, T] int
    mask: np.ndarray  # [T, T]
    episode_id: int
    anchor_min: int
    lead_min: int


def build_sample(ds: Dataset, episode: Episode, anchor_min: int, lead: int, profile: ModelProfile) -> Sample:
    """Normalize, add statics and lead, and crop the target patch for one (anchor, lead)."""
    raw = make_sample(episode, anchor_min, lead, profile)
    size = profile.input_size
    h, w = episode.precip.shape[1:]
    if size > min(h, w):
        raise DataError(f"profile input_size {size} exceeds grid {h}x{w}")
    if profile.aux_channels != episode.aux.shape[-1]:
        raise DataError(f"profile expects {profile.aux_channels} aux channels, dataset has {episode.aux.shape[-1]}")
    slices = [
        center_crop(normalize_slice(raw.precip[k], raw.aux[k], ds.stats), size)
        for k in range(profile.slices)
    ]
    geo = GeoMaps(*(center_crop(a, size) for a in (episode.geo.lon, episode.geo.lat, episode.geo.elevation)))
    anchor = episode.datetime_at(anchor_min)
    patch = assemble_input(slices, static_features(geo, anchor), encode_lead_time(lead, profile.leads), profile, anchor)
    target = center_crop(raw.target, profile.target_size)
    return Sample(
        patch=patch.tensor,
        target_rate=target,
        target_bins=rate_to_bin(target, profile.bins, profile.bin_width),
        mask=center_crop(episode.quality_mask, profile.target_size),
        episode_id=episode.episode_id,
        anchor_min=anchor_min,
        lead_min=lead,
    )


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.patch for s in samples]),
        np.stack([s.target_bins for s in samples]),
        np.stack([s.mask for s in samples]),
    )
