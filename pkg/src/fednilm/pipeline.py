"""End-to-end preprocessing: raw channel files to windowed dataset files.

Raw layout: <raw_dir>/house_<n>/<channel>.dat files of (unix-seconds, watts)
rows plus a manifest.ini mapping appliance channels to their thresholds.
Output: per household and split role, a binary window file plus one
provenance sidecar recording the constants the run actually used.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import data as D
from .metrics import ConfusionCounts, ScoreSet, confusion, scores
from .model import NilmModel, predict_states

log = logging.getLogger(__name__)

AGGREGATE_CHANNEL = "aggregate"


def discover_households(raw_dir) -> list[str]:
    raw_dir = Path(raw_dir)
    houses = sorted(p.name for p in raw_dir.iterdir() if p.is_dir() and p.name.startswith("house_"))
    if not houses:
        raise D.DataError(f"{raw_dir}: no house_<n> directories found")
    return houses


def _align_channels(channels: dict[str, D.RawSeries]) -> dict[str, np.ndarray]:
    """Crop all 6 s channels to their common time range; grids must agree."""
    t_start = max(int(s.timestamps[0]) for s in channels.values())
    t_end = min(int(s.timestamps[-1]) for s in channels.values())
    if t_end < t_start:
        raise D.DataError("channels share no common time range")
    out = {}
    for name, series in channels.items():
        t0 = int(series.timestamps[0])
        if (t_start - t0) % D.SAMPLE_PERIOD_S:
            raise D.DataError(f"channel {name}: 6 s grids are not alignable")
        lo = (t_start - t0) // D.SAMPLE_PERIOD_S
        hi = (t_end - t0) // D.SAMPLE_PERIOD_S + 1
        out[name] = series.watts[lo:hi]
    return out


def preprocess_household(
    raw_dir,
    house: str,
    specs: tuple[D.ApplianceSpec, ...],
    plan: D.SplitPlan,
    window_len: int = D.DEFAULT_WINDOW_LEN,
    train_stride: int = D.TRAIN_STRIDE,
    eval_stride: int = D.EVAL_STRIDE,
) -> tuple[dict[str, list[D.WindowSample]], dict]:
    """Run the full pipeline for one household; returns windows per role and
    the provenance record (normalization mean, clip and gap-fill counts)."""
    house_dir = Path(raw_dir) / house
    missing = [
        str(house_dir / f"{name}.dat")
        for name in [AGGREGATE_CHANNEL] + [s.name for s in specs]
        if not (house_dir / f"{name}.dat").exists()
    ]
    if missing:
        raise D.DataError(f"{house}: missing channel files: {', '.join(missing)}")

    provenance: dict = {"house": house, "clip_counts": {}, "gap_filled_bins": {}}
    aggregate = D.load_series(house_dir / f"{AGGREGATE_CHANNEL}.dat", AGGREGATE_CHANNEL, house)
    aggregate, gaps = D.downsample_6s(aggregate)
    provenance["gap_filled_bins"][AGGREGATE_CHANNEL] = gaps

    channels: dict[str, D.RawSeries] = {AGGREGATE_CHANNEL: aggregate}
    for spec in specs:
        series = D.load_series(house_dir / f"{spec.name}.dat", spec.name, house)
        series, clipped = D.clip_max_power(series, spec)
        series, gaps = D.downsample_6s(series)
        provenance["clip_counts"][spec.name] = clipped
        provenance["gap_filled_bins"][spec.name] = gaps
        channels[spec.name] = series

    watts = _align_channels(channels)
    n = watts[AGGREGATE_CHANNEL].size
    labels = np.stack(
        [D.threshold_states(watts[spec.name], spec) for spec in specs]
    )

    ranges = plan.ranges(house)
    train_range = ranges.get("train")
    if train_range is not None:
        sl = D.slice_fraction(n, *train_range)
        mean_w = float(watts[AGGREGATE_CHANNEL][sl].mean())
    else:
        # test-only household (unseen case): normalize with its own full-series
        # mean, an input-side statistic available at deployment time
        mean_w = float(watts[AGGREGATE_CHANNEL].mean())
    provenance["mean_w"] = mean_w
    normalized = (watts[AGGREGATE_CHANNEL] - mean_w) / D.NORMALIZE_SCALE_W

    windows: dict[str, list[D.WindowSample]] = {}
    counts: dict[str, int] = {}
    for role, (lo, hi) in ranges.items():
        sl = D.slice_fraction(n, lo, hi)
        stride = train_stride if role == "train" else eval_stride
        windows[role] = D.make_windows(
            normalized[sl], labels[:, sl], window_len, stride, household_id=house
        )
        counts[role] = len(windows[role])
    provenance["window_counts"] = counts
    return windows, provenance


def preprocess_dataset(
    raw_dir,
    out_dir,
    plan: D.SplitPlan,
    window_len: int = D.DEFAULT_WINDOW_LEN,
    train_stride: int = D.TRAIN_STRIDE,
    eval_stride: int = D.EVAL_STRIDE,
) -> dict:
    """Preprocess every household in the plan and write the window files."""
    raw_dir = Path(raw_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = D.read_manifest(raw_dir / "manifest.ini")
    names = [s.name for s in specs]
    provenance: dict = {
        "households": {},
        "split_mode": plan.mode,
        "split_case": plan.case,
        "window_len": window_len,
        "train_stride": train_stride,
        "eval_stride": eval_stride,
        "appliances": names,
    }
    for house in plan.households():
        windows, record = preprocess_household(
            raw_dir, house, specs, plan, window_len, train_stride, eval_stride
        )
        for role, samples in windows.items():
            D.write_windows(out_dir / f"{house}.{role}.fnlw", samples, names)
        provenance["households"][house] = record
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return provenance


def load_role_arrays(dataset_dir, role: str) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Read every household's windows for one role as (X, Y) arrays."""
    dataset_dir = Path(dataset_dir)
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for path in sorted(dataset_dir.glob(f"*.{role}.fnlw")):
        house = path.name.split(".")[0]
        samples, _ = D.read_windows(path, household_id=house)
        if samples:
            out[house] = D.samples_to_arrays(samples)
    return out


def dataset_appliances(dataset_dir) -> list[str]:
    dataset_dir = Path(dataset_dir)
    for path in sorted(dataset_dir.glob("*.fnlw")):
        _, names = D.read_windows(path)
        return names
    raise D.DataError(f"{dataset_dir}: no window files found")


def evaluate_model(
    model: NilmModel,
    x: np.ndarray,
    y: np.ndarray,
    names: list[str],
    batch: int = 256,
) -> dict[str, tuple[ScoreSet, ConfusionCounts]]:
    """Per-appliance scores of a model's predicted states against the labels."""
    preds = []
    for start in range(0, x.shape[0], batch):
        preds.append(predict_states(model, x[start : start + batch]))
    pred = np.concatenate(preds) if preds else np.zeros_like(y)
    out = {}
    for i, name in enumerate(names):
        c = confusion(pred[:, i], y[:, i])
        out[name] = (scores(c), c)
    return out
