"""Model/data profiles: every architectural dimension in one frozen record."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Any


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelProfile:
    """Dimensions for one MetNet configuration.

    Spatial sizes are square. ``input_size`` is in source pixels (1 km each);
    ``s2d_block`` packs it down to ``input_size // s2d_block`` before the
    downsampler, whose two poolings reduce that by 4 to ``target_size``.
    """

    name: str
    slices: int
    slice_spacing_min: int
    input_size: int
    s2d_block: int
    aux_channels: int
    downsampler_channels: tuple[int, int]
    encoder_channels: int
    aggregator_channels: int
    heads: int
    blocks: int
    ffn_channels: int
    bins: int
    bin_width: float
    leads: int
    target_size: int
    first_conv: bool = True
    use_precip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "downsampler_channels", tuple(self.downsampler_channels))
        self.validate()

    def validate(self) -> None:
        positive = [
            "slices", "slice_spacing_min", "input_size", "s2d_block", "encoder_channels",
            "aggregator_channels", "heads", "ffn_channels", "bins", "leads", "target_size",
        ]
        for key in positive:
            if getattr(self, key) <= 0:
                raise ProfileError(f"{key} must be positive, got {getattr(self, key)}")
        if self.aux_channels < 0 or self.blocks < 0:
            raise ProfileError("aux_channels and blocks must be non-negative")
        if len(self.downsampler_channels) != 2 or min(self.downsampler_channels) <= 0:
            raise ProfileError(f"downsampler_channels must be two positive widths, got {self.downsampler_channels}")
        if self.bin_width <= 0:
            raise ProfileError("bin_width must be positive")
        if self.aggregator_channels % self.heads:
            raise ProfileError(f"heads ({self.heads}) must divide aggregator_channels ({self.aggregator_channels})")
        if self.blocks % 2:
            raise ProfileError(f"blocks must be even (equal width/height blocks), got {self.blocks}")
        if self.input_size % self.s2d_block:
            raise ProfileError(f"input_size {self.input_size} not divisible by s2d_block {self.s2d_block}")
        if self.packed_size % 4:
            raise ProfileError(f"packed size {self.packed_size} not divisible by 4")
        if self.packed_size // 4 != self.target_size:
            raise ProfileError(
                f"aggregated grid {self.packed_size // 4} must equal target_size {self.target_size}"
            )

    @property
    def packed_size(self) -> int:
        return self.input_size // self.s2d_block

    @property
    def base_channels(self) -> int:
        """Per-pixel channels before the lead one-hot: precip, aux, geo(3), time(3)."""
        return 1 + self.aux_channels + 6

    @property
    def input_channels(self) -> int:
        return self.base_channels + self.leads

    @property
    def packed_channels(self) -> int:
        return self.base_channels * self.s2d_block**2 + self.leads

    @property
    def max_lead_min(self) -> int:
        return 2 * self.leads

    @property
    def lead_minutes(self) -> list[int]:
        return list(range(2, self.max_lead_min + 1, 2))

    @property
    def input_window_min(self) -> int:
        return (self.slices - 1) * self.slice_spacing_min

    def replace(self, **changes) -> "ModelProfile":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["downsampler_channels"] = list(self.downsampler_channels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelProfile":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ProfileError(f"unknown profile keys: {sorted(unknown)}")
        missing = {f.name for f in dataclasses.fields(cls) if f.default is dataclasses.MISSING} - set(d)
        if missing:
            raise ProfileError(f"missing profile keys: {sorted(missing)}")
        return cls(**d)


REFERENCE = ModelProfile(
    name="reference",
    slices=7,
    slice_spacing_min=15,
    input_size=1024,
    s2d_block=4,
    aux_channels=16,
    downsampler_channels=(160, 256),
    encoder_channels=384,
    aggregator_channels=2048,
    heads=16,
    blocks=8,
    ffn_channels=2048,
    bins=512,
    bin_width=0.2,
    leads=240,
    target_size=64,
)

DESK = ModelProfile(
    name="desk",
    slices=7,
    slice_spacing_min=6,
    input_size=64,
    s2d_block=2,
    aux_channels=4,
    downsampler_channels=(10, 16),
    encoder_channels=32,
    aggregator_channels=32,
    heads=4,
    blocks=4,
    ffn_channels=64,
    bins=512,
    bin_width=0.2,
    leads=60,
    target_size=8,
)

MICRO = ModelProfile(
    name="micro",
    slices=2,
    slice_spacing_min=2,
    input_size=16,
    s2d_block=1,
    aux_channels=1,
    downsampler_channels=(4, 8),
    encoder_channels=8,
    aggregator_channels=8,
    heads=2,
    blocks=2,
    ffn_channels=8,
    bins=8,
    bin_width=0.2,
    leads=4,
    target_size=4,
)

PRESETS = {p.name: p for p in (REFERENCE, DESK, MICRO)}

ABLATIONS = ("full", "reduced_spatial", "reduced_temporal", "goes_only")


def get_profile(name: str) -> ModelProfile:
    try:
        return PRESETS[name]
    except KeyError:
        raise ProfileError(f"unknown profile {name!r}; choose from {sorted(PRESETS)}") from None


def ablation_profile(base: ModelProfile, ablation: str) -> ModelProfile:
    """Derive one ablation configuration from ``base``.

    reduced_spatial: half the input extent at twice the packing resolution,
    first downsampler conv removed, so the aggregated grid is unchanged.
    reduced_temporal: only the newest 3 slices. goes_only: precipitation
    channel zeroed.
    """
    if ablation == "full":
        return base
    if ablation == "reduced_spatial":
        if base.s2d_block % 2 or base.input_size % 2:
            raise ProfileError("reduced_spatial needs an even s2d_block and input_size")
        return base.replace(
            name=f"{base.name}-reduced_spatial",
            input_size=base.input_size // 2,
            s2d_block=base.s2d_block // 2,
            first_conv=False,
        )
    if ablation == "reduced_temporal":
        return base.replace(name=f"{base.name}-reduced_temporal", slices=min(3, base.slices))
    if ablation == "goes_only":
        return base.replace(name=f"{base.name}-goes_only", use_precip=False)
    raise ProfileError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
