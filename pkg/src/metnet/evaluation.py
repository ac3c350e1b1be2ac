"""F1 verification with validation-calibrated probability cutoffs, reports, ablation sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import model
from .baselines import SCHEMES, center_crop, optical_flow_forecast, persistence_forecast
from .dataset import Dataset, build_sample
from .datagen import Episode, valid_anchors
from .params import ParameterStore
from .preprocess import prob_above_threshold
from .profile import ModelProfile

DEFAULT_GRID = tuple(round(0.01 * k, 2) for k in range(1, 100))
DEFAULT_THRESHOLDS = (0.2, 1.0, 2.0)
CSV_HEADER = ["model", "lead_min", "threshold_mmh", "cutoff", "precision", "recall", "f1", "n"]


class F1Result(NamedTuple):
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    degenerate: bool = False


def f1_from_counts(tp: int, fp: int, fn: int) -> F1Result:
    """Precision/recall/F1 from pooled counts.

    An undefined precision or recall is 0. With no predicted and no true
    positives the F1 is 1 and ``degenerate`` is set.
    """
    if tp + fp + fn == 0:
        return F1Result(0.0, 0.0, 1.0, 0, 0, 0, True)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Result(precision, recall, f1, int(tp), int(fp), int(fn))


def confusion_counts(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    m = np.asarray(mask) > 0
    tp = int(np.count_nonzero(pred & truth & m))
    fp = int(np.count_nonzero(pred & ~truth & m))
    fn = int(np.count_nonzero(~pred & truth & m))
    return tp, fp, fn


def f1_score(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> F1Result:
    """Micro F1 over all masked pixels of all samples."""
    pred, truth, mask = np.asarray(pred), np.asarray(truth), np.asarray(mask)
    if pred.shape != truth.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, mask {mask.shape}")
    if not np.any(mask > 0):
        raise ValueError("f1_score: empty mask")
    return f1_from_counts(*confusion_counts(pred, truth, mask))


class Calibration(NamedTuple):
    cutoff: float
    f1: float
    degenerate: bool


def calibrate_cutoff(
    prob_above: np.ndarray,
    truth: np.ndarray,
    mask: np.ndarray,
    grid: Sequence[float] = DEFAULT_GRID,
) -> Calibration:
    """Cutoff in ``grid`` maximizing validation F1 of ``prob_above >= cutoff``; ties go to the smallest.

    ``prob_above`` is P(rate >= threshold) per pixel and ``truth`` the
    matching binary observation. All-negative truth returns ``max(grid)``
    flagged as degenerate.
    """
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    if grid.size == 0:
        raise ValueError("cutoff grid is empty")
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("cutoffs must lie in (0, 1)")
    m = np.asarray(mask) > 0
    if not m.any():
        raise ValueError("calibrate_cutoff: empty validation set")
    p = np.asarray(prob_above, dtype=np.float64)[m]
    t = np.asarray(truth, dtype=bool)[m]
    if not t.any():
        return Calibration(float(grid[-1]), 1.0, True)
    pos = np.sort(p[t])
    neg = np.sort(p[~t])
    # count of values >= c is len - searchsorted(left)
    tp = pos.size - np.searchsorted(pos, grid, side="left")
    fp = neg.size - np.searchsorted(neg, grid, side="left")
    fn = pos.size - tp
    f1s = np.array([f1_from_counts(int(a), int(b), int(c)).f1 for a, b, c in zip(tp, fp, fn)])
    best = int(np.argmax(f1s))
    return Calibration(float(grid[best]), float(f1s[best]), False)


# --- reports ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    model: str
    lead_min: int
    threshold_mmh: float
    cutoff: Optional[float]
    precision: float
    recall: float
    f1: float
    n: int
    degenerate: bool = False

    def cells(self) -> list[str]:
        return [
            self.model,
            str(self.lead_min),
            f"{self.threshold_mmh:g}",
            "" if self.cutoff is None else f"{self.cutoff:.2f}",
            f"{self.precision:.6f}",
            f"{self.recall:.6f}",
            f"{self.f1:.6f}",
            str(self.n),
        ]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def f1(self, model_id: str, lead: int, threshold: float) -> float:
        for r in self.rows:
            if r.model == model_id and r.lead_min == lead and math.isclose(r.threshold_mmh, threshold):
                return r.f1
        raise KeyError((model_id, lead, threshold))

    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    def plot_data(self) -> dict[float, str]:
        """One CSV per threshold: ``lead_min`` then an F1 column per model."""
        out = {}
        models = self.models()
        for thr in sorted({r.threshold_mmh for r in self.rows}):
            leads = sorted({r.lead_min for r in self.rows if r.threshold_mmh == thr})
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["lead_min"] + models)
            for lead in leads:
                row = [str(lead)]
                for m in models:
                    try:
                        row.append(f"{self.f1(m, lead, thr):.6f}")
                    except KeyError:
                        row.append("")
                w.writerow(row)
            out[thr] = buf.getvalue()
        return out

    def write_plot_data(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for thr, text in self.plot_data().items():
            p = directory / f"f1_thr_{thr:g}.csv"
            p.write_text(text)
            paths.append(p)
        return paths


# --- forecasters -----------------------------------------------------------

@dataclass(frozen=True)
class Anchor:
    episode: Episode
    minutes: int


def anchors_for(episodes: Iterable[Episode], profile: ModelProfile, stride_min: int, max_lead: Optional[int] = None) -> list[Anchor]:
    return [Anchor(ep, a) for ep in episodes for a in valid_anchors(ep, profile, stride_min, max_lead)]


@dataclass
class ModelForecaster:
    """Probabilistic forecaster; thresholded through calibrated cutoffs."""

    name: str
    store: ParameterStore
    profile: ModelProfile
    data_profile: Optional[ModelProfile] = None
    batch_size: int = 16
    probabilistic = True

    def probabilities(self, ds: Dataset, anchors: Sequence[Anchor], lead: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(probs [n, T, T, K], target rates [n, T, T], masks [n, T, T])."""
        dp = self.data_profile or self.profile
        samples = [build_sample(ds, a.episode, a.minutes, lead, dp) for a in anchors]
        probs = model.predict(self.store, np.stack([s.patch for s in samples]), self.profile, self.batch_size).probs
        return probs, np.stack([s.target_rate for s in samples]), np.stack([s.mask for s in samples])


@dataclass
class BaselineForecaster:
    """Deterministic rate forecaster thresholded directly."""

    method: str  # persistence | of-cv | of-sl
    target_size: int
    context_km: Optional[float] = None
    name: Optional[str] = None
    probabilistic = False

    def __post_init__(self):
        if self.method not in ("persistence",) + tuple(SCHEMES):
            raise ValueError(f"unknown baseline method {self.method!r}")
        if self.name is None:
            self.name = self.method if self.context_km is None else f"{self.method}@{self.context_km:g}km"

    def forecast(self, episode: Episode, anchor_min: int, lead: int) -> np.ndarray:
        k = int(np.searchsorted(episode.timestamps, anchor_min, side="right")) - 1
        if k < 1:
            raise ValueError("need two frames of history at the anchor")
        if self.method == "persistence":
            return center_crop(persistence_forecast(episode.precip[k], lead), self.target_size)
        return optical_flow_forecast(
            [episode.precip[k - 1], episode.precip[k]],
            lead,
            frame_minutes=episode.frame_minutes,
            scheme=SCHEMES[self.method],
            context_crop=self.context_km,
            target_size=self.target_size,
            pixel_km=episode.params.pixel_km,
        )

    def rates(self, ds: Dataset, anchors: Sequence[Anchor], lead: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        preds, truths, masks = [], [], []
        for a in anchors:
            ep = a.episode
            preds.append(self.forecast(ep, a.minutes, lead))
            tk = int(np.searchsorted(ep.timestamps, a.minutes + lead, side="left"))
            truths.append(center_crop(ep.precip[tk], self.target_size))
            masks.append(center_crop(ep.quality_mask, self.target_size))
        return np.stack(preds), np.stack(truths), np.stack(masks)


def evaluate(
    forecaster,
    ds: Dataset,
    test_anchors: Sequence[Anchor],
    leads: Sequence[int],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    val_anchors: Optional[Sequence[Anchor]] = None,
    grid: Sequence[float] = DEFAULT_GRID,
) -> EvalReport:
    """One row per (lead, threshold), pooled over ``test_anchors``.

    Probabilistic forecasters get one cutoff per (lead, threshold) from the
    validation anchors; baselines compare the forecast rate to the threshold.
    """
    if not test_anchors:
        raise ValueError("evaluate: empty test split")
    report = EvalReport()
    for lead in leads:
        if forecaster.probabilistic:
            if not val_anchors:
                raise ValueError("evaluate: probabilistic model needs validation anchors for calibration")
            vprobs, vtruth, vmask = forecaster.probabilities(ds, val_anchors, lead)
            probs, truth, mask = forecaster.probabilities(ds, test_anchors, lead)
            width = forecaster.profile.bin_width
            for thr in thresholds:
                cal = calibrate_cutoff(prob_above_threshold(vprobs, thr, width), vtruth >= thr, vmask, grid)
                res = f1_score(prob_above_threshold(probs, thr, width) >= cal.cutoff, truth >= thr, mask)
                report.rows.append(EvalRow(forecaster.name, lead, thr, cal.cutoff, res.precision, res.recall, res.f1, len(test_anchors), res.degenerate))
        else:
            pred, truth, mask = forecaster.rates(ds, test_anchors, lead)
            for thr in thresholds:
                res = f1_score(pred >= thr, truth >= thr, mask)
                report.rows.append(EvalRow(forecaster.name, lead, thr, None, res.precision, res.recall, res.f1, len(test_anchors), res.degenerate))
    return report


ABLATION_THRESHOLD = 1.0


def ablation_sweep(
    checkpoints: Mapping[str, tuple[ParameterStore, ModelProfile]],
    ds: Dataset,
    data_profile: ModelProfile,
    test_anchors: Sequence[Anchor],
    val_anchors: Sequence[Anchor],
    leads: Sequence[int],
    threshold: float = ABLATION_THRESHOLD,
) -> dict[str, EvalReport]:
    """Evaluate each configuration's checkpoint at one threshold across leads."""
    out = {}
    for name, entry in checkpoints.items():
        if entry is None:
            raise ValueError(f"missing checkpoint for configuration {name!r}")
        store, profile = entry
        fc = ModelForecaster(name, store, profile, data_profile)
        out[name] = evaluate(fc, ds, test_anchors, leads, [threshold], val_anchors)
    return out
