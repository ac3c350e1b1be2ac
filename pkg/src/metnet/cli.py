"""``metnet`` command line: generate | train | eval | predict | baseline | params | export-pgm.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numerical failure.
Each failure prints a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model
from .config import ConfigError, RunConfig, load_config
from .dataset import DataError, generate_dataset, load_dataset, save_dataset
from .datagen import SampleUnavailable
from .evaluation import (
    DEFAULT_THRESHOLDS,
    Anchor,
    BaselineForecaster,
    EvalReport,
    ModelForecaster,
    anchors_for,
    evaluate,
)
from .preprocess import normalize_precip, prob_above_threshold
from .params import load_checkpoint, save_checkpoint
from .profile import ABLATIONS, ModelProfile, ProfileError, ablation_profile, get_profile
from .tensor import NumericalError
from .training import TrainConfig, train

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("metnet")


# --- argument helpers --------------------------------------------------------

def parse_leads(text: str) -> list[int]:
    """``"2:120:2"`` (inclusive start:stop:step) or ``"10,30,60"``."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) == 2:
                parts.append(1)
            start, stop, step = parts
            if step <= 0:
                raise ValueError
            leads = list(range(start, stop + 1, step))
        else:
            leads = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"--leads: cannot parse {text!r}; use start:stop:step or a comma list") from None
    if not leads or min(leads) <= 0:
        raise ConfigError(f"--leads: need positive lead minutes, got {text!r}")
    return leads


def parse_thresholds(text: str) -> list[float]:
    try:
        values = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"--thresholds: cannot parse {text!r}") from None
    if not values or min(values) <= 0:
        raise ConfigError(f"--thresholds: need positive rates, got {text!r}")
    return values


def write_pgm(path: Path, image: np.ndarray) -> Path:
    """Binary 8-bit PGM; ``image`` holds values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def _checkpoint_profile(manifest: dict, cfg: RunConfig) -> ModelProfile:
    if "profile" in manifest:
        return ModelProfile.from_dict(manifest["profile"])
    return cfg.model_profile


def _load_model(cfg: RunConfig):
    cfg.require("checkpoint")
    try:
        store, manifest = load_checkpoint(cfg.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {cfg.checkpoint}: {exc}") from exc
    profile = _checkpoint_profile(manifest, cfg)
    data_profile = ModelProfile.from_dict(manifest["data_profile"]) if "data_profile" in manifest else cfg.base_profile
    return store, profile, data_profile


def _max_lead_ok(leads: Sequence[int], profile: ModelProfile) -> None:
    bad = [l for l in leads if l > profile.max_lead_min or l % 2]
    if bad:
        raise ConfigError(f"--leads: {bad} not encodable (even minutes up to {profile.max_lead_min})")


# --- subcommands -------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> None:
    ds = generate_dataset(cfg.dynamics, cfg.generate.episodes, cfg.seed, cfg.generate.split_pattern)
    root = save_dataset(ds, args.out)
    print(f"wrote {len(ds.episodes)} episodes to {root}")


def cmd_train(cfg: RunConfig, args) -> None:
    cfg.require("dataset")
    ds = load_dataset(cfg.dataset)
    profile, data_profile = cfg.model_profile, cfg.base_profile
    t = cfg.train
    tc = TrainConfig(steps=t.steps, batch=t.batch, lr=t.lr, clip_norm=t.clip_norm, anchor_stride_min=t.anchor_stride_min)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []
    try:
        store, _ = train(ds, profile, tc, cfg.seed, data_profile=data_profile, on_step=lambda step, loss: losses.append(loss))
    finally:
        _write_losses(out / "loss.csv", losses)
    save_checkpoint(store, out, profile.hash(), {
        "profile": profile.to_dict(),
        "data_profile": data_profile.to_dict(),
        "ablation": cfg.ablation,
        "seed": cfg.seed,
    })
    print(f"trained {profile.name} for {len(losses)} steps, final loss {losses[-1]:.4f}, checkpoint {out} ({store.digest()[:16]})")


def _write_losses(path: Path, losses: Sequence[float]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.6f}"])


def _anchors(cfg: RunConfig, ds, profile: ModelProfile, split: str, max_lead: int):
    anchors = anchors_for(ds.split(split), profile, cfg.eval.anchor_stride_min, max_lead)
    if not anchors:
        raise DataError(f"{split} split has no valid anchors for leads up to {max_lead} min")
    return anchors


def _write_report(report: EvalReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_plot_data(out / "plot")


def cmd_eval(cfg: RunConfig, args) -> None:
    cfg.require("dataset")
    store, profile, data_profile = _load_model(cfg)
    leads = parse_leads(args.leads) if args.leads else data_profile.lead_minutes
    thresholds = parse_thresholds(args.thresholds)
    _max_lead_ok(leads, data_profile)
    ds = load_dataset(cfg.dataset)
    test = _anchors(cfg, ds, data_profile, "test", max(leads))
    val = _anchors(cfg, ds, data_profile, "val", max(leads))
    name = args.name or profile.name
    report = evaluate(ModelForecaster(name, store, profile, data_profile, cfg.eval.batch_size), ds, test, leads, thresholds, val)
    for method in args.baselines.split(",") if args.baselines else []:
        report.extend(evaluate(BaselineForecaster(method, data_profile.target_size), ds, test, leads, thresholds))
    _write_report(report, Path(args.out))
    print(f"wrote {len(report.rows)} rows to {Path(args.out) / 'report.csv'}")


def cmd_baseline(cfg: RunConfig, args) -> None:
    cfg.require("dataset")
    profile = cfg.base_profile
    leads = parse_leads(args.leads) if args.leads else profile.lead_minutes
    thresholds = parse_thresholds(args.thresholds)
    _max_lead_ok(leads, profile)
    ds = load_dataset(cfg.dataset)
    test = _anchors(cfg, ds, profile, "test", max(leads))
    try:
        fc = BaselineForecaster(args.method, profile.target_size, args.context_km)
    except ValueError as exc:
        raise ConfigError(f"--method: {exc}") from None
    report = evaluate(fc, ds, test, leads, thresholds)
    _write_report(report, Path(args.out))
    print(f"wrote {len(report.rows)} rows to {Path(args.out) / 'report.csv'}")


def cmd_predict(cfg: RunConfig, args) -> None:
    cfg.require("dataset")
    store, profile, data_profile = _load_model(cfg)
    leads = parse_leads(args.lead)
    _max_lead_ok(leads, data_profile)
    ds = load_dataset(cfg.dataset)
    episode = ds.episode(args.episode) if args.episode is not None else ds.split("test")[0]
    anchor = args.anchor
    if anchor is None:
        anchors = anchors_for([episode], data_profile, 2, max(leads))
        if not anchors:
            raise DataError(f"episode {episode.episode_id} has no anchor covering lead {max(leads)}")
        anchor = anchors[0].minutes
    fc = ModelForecaster(profile.name, store, profile, data_profile, cfg.eval.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for lead in leads:
        probs, _, _ = fc.probabilities(ds, [Anchor(episode, anchor)], lead)
        p = prob_above_threshold(probs, args.threshold, profile.bin_width)[0]
        path = write_pgm(out / f"prob_ep{episode.episode_id:03d}_t{anchor:04d}_lead{lead:03d}_thr{args.threshold:g}.pgm", p)
        print(f"{path.name}: max p={float(p.max()):.3f}")


def precip_to_unit(rate: np.ndarray) -> np.ndarray:
    """Log-scaled display value: 0 mm/h -> 0, about 54.6 mm/h and above -> 1."""
    lo = normalize_precip(0.0)
    return np.clip((normalize_precip(np.asarray(rate, dtype=np.float64)) - lo) / (1.0 - lo), 0.0, 1.0)


def cmd_export_pgm(cfg: RunConfig, args) -> None:
    cfg.require("dataset")
    ds = load_dataset(cfg.dataset)
    episodes = [ds.episode(args.episode)] if args.episode is not None else ds.episodes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for ep in episodes:
        for t, frame in zip(ep.timestamps, ep.precip):
            write_pgm(out / f"ep{ep.episode_id:03d}_t{int(t):04d}.pgm", precip_to_unit(frame))
            count += 1
    print(f"wrote {count} frames to {out}")


def cmd_params(cfg: Optional[RunConfig], args) -> None:
    try:
        base = get_profile(args.profile) if args.profile else cfg.base_profile
        profile = ablation_profile(base, args.ablation or (cfg.ablation if cfg else "full"))
    except ProfileError as exc:
        raise ConfigError(f"--profile: {exc}") from None
    if args.json:
        print(profile.to_json())
    print(f"{profile.name}: {model.count_parameters(profile):,} parameters")


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metnet", description="Desk-scale MetNet precipitation nowcasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--dataset", help="overrides the config dataset path")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    common(sub.add_parser("generate", help="write a synthetic dataset directory"))
    tr = common(sub.add_parser("train", help="train a model and write a checkpoint plus loss.csv"))
    tr.add_argument("--ablation", choices=ABLATIONS)
    ev = common(sub.add_parser("eval", help="F1 report for a checkpoint"))
    ev.add_argument("--checkpoint")
    ev.add_argument("--thresholds", default=",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS))
    ev.add_argument("--leads", help="start:stop:step or comma list (default: every lead)")
    ev.add_argument("--baselines", help="comma list of baselines to add to the report")
    ev.add_argument("--name", help="model column name")
    pr = common(sub.add_parser("predict", help="PGM maps of P(rate >= threshold)"))
    pr.add_argument("--checkpoint")
    pr.add_argument("--lead", required=True, help="minutes; start:stop:step or comma list")
    pr.add_argument("--threshold", type=float, default=1.0)
    pr.add_argument("--episode", type=int, help="episode id (default: first test episode)")
    pr.add_argument("--anchor", type=int, help="anchor minute (default: first valid)")
    bl = common(sub.add_parser("baseline", help="F1 report for persistence or optical flow"))
    bl.add_argument("--method", default="persistence", help="persistence | of-cv | of-sl")
    bl.add_argument("--context-km", type=float)
    bl.add_argument("--thresholds", default=",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS))
    bl.add_argument("--leads")
    ex = common(sub.add_parser("export-pgm", help="8-bit PGM image per precipitation frame"))
    ex.add_argument("--episode", type=int, help="episode id (default: all)")
    pa = sub.add_parser("params", help="parameter count for a profile")
    pa.add_argument("--profile", help="reference | desk | micro (default: from --config)")
    pa.add_argument("--config", type=Path)
    pa.add_argument("--ablation", choices=ABLATIONS)
    pa.add_argument("--json", action="store_true", help="also print the profile as JSON")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
    "params": cmd_params,
    "export-pgm": cmd_export_pgm,
}


def _thread_limit():
    value = os.environ.get("METNET_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n <= 0:
            raise ValueError
    except ValueError:
        raise ConfigError(f"METNET_THREADS: expected a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            if args.command == "params":
                cfg = load_config(args.config, seed=0) if args.config else None
                if cfg is None and not args.profile:
                    raise ConfigError("--profile: required when no --config is given")
            elif args.command == "export-pgm":
                # Reading a dataset involves no randomness.
                cfg = load_config(args.config, seed=0, dataset=args.dataset)
            else:
                overrides = {"seed": args.seed, "dataset": args.dataset}
                for key in ("checkpoint", "ablation"):
                    overrides[key] = getattr(args, key, None)
                cfg = load_config(args.config, **overrides)
            COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SampleUnavailable) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
