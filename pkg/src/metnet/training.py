"""Training loop: sample (anchor, lead) pairs, masked cross-entropy, Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import model
from .dataset import Dataset, Sample, build_sample, stack
from .datagen import valid_anchors
from .ops import masked_cross_entropy
from .params import ParameterStore, adam_step, global_norm_clip
from .profile import ModelProfile
from .tensor import NumericalError, grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = 5.0
    anchor_stride_min: int = 2


def train_step(
    store: ParameterStore,
    profile: ModelProfile,
    patches: np.ndarray,
    target_bins: np.ndarray,
    mask: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> float:
    """One forward/backward/Adam update; returns the pre-update loss."""
    logits = model.forward(store, patches, profile)
    loss = masked_cross_entropy(logits, target_bins, mask)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {store.step}")
    grads = grad(loss, store.params)
    global_norm_clip(grads, cfg.clip_norm)
    adam_step(store, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return value


def anchor_pool(episodes, profile: ModelProfile, stride_min: int) -> list[tuple[object, int]]:
    return [(ep, a) for ep in episodes for a in valid_anchors(ep, profile, stride_min)]


def train(
    ds: Dataset,
    profile: ModelProfile,
    cfg: TrainConfig,
    seed: int,
    data_profile: Optional[ModelProfile] = None,
    store: Optional[ParameterStore] = None,
    fixed: Optional[Sequence[Sample]] = None,
    on_step: Optional[Callable[[int, float], bool]] = None,
) -> tuple[ParameterStore, list[float]]:
    """Train ``profile`` on the training split, drawing a fresh random batch every step.

    ``data_profile`` builds the samples (ablations train on full-size samples
    and crop/drop inside the model). With ``fixed``, every step uses that one
    batch instead. ``on_step(step, loss)`` may return True to stop early.
    """
    data_profile = data_profile or profile
    rng = np.random.default_rng(seed)
    if store is None:
        store = model.init_params(profile, seed)
    pool = [] if fixed is not None else anchor_pool(ds.split("train"), data_profile, cfg.anchor_stride_min)
    if fixed is None and not pool:
        raise ValueError("training split has no valid anchors for this profile")
    leads = np.array(data_profile.lead_minutes)
    if fixed is not None:
        fixed_batch = stack(fixed)
    losses: list[float] = []
    for step in range(cfg.steps):
        if fixed is not None:
            batch = fixed_batch
        else:
            picks = rng.integers(0, len(pool), size=cfg.batch)
            chosen = rng.choice(leads, size=cfg.batch)
            batch = stack([build_sample(ds, pool[i][0], pool[i][1], int(l), data_profile) for i, l in zip(picks, chosen)])
        loss = train_step(store, profile, *batch, cfg=cfg)
        losses.append(loss)
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, loss)
        if on_step is not None and on_step(step, loss):
            break
    return store, losses
