"""Ingestion and preprocessing of household power series.

The pipeline turns per-channel (timestamp, watts) files into fixed-length
training windows: clip abnormal readings at each appliance's max power,
resample the aggregate to the 6-second submeter grid, normalize, derive
per-appliance ON/OFF state labels by activation-time thresholding, and cut
sliding windows.  A deterministic synthetic-household generator provides a
desk-scale stand-in for real submetered datasets.
"""

from __future__ import annotations

import configparser
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_PERIOD_S = 6
NORMALIZE_SCALE_W = 2000.0
DEFAULT_WINDOW_LEN = 126
TRAIN_STRIDE = 63
EVAL_STRIDE = 126


class DataError(Exception):
    """Base class for ingestion and preprocessing failures."""


class IngestError(DataError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


@dataclass
class RawSeries:
    """One channel of a household: strictly increasing timestamps and watts."""

    timestamps: np.ndarray
    watts: np.ndarray
    source_id: str
    channel: str

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.watts = np.asarray(self.watts, dtype=np.float64)
        if self.timestamps.shape != self.watts.shape:
            raise IngestError(
                f"channel {self.channel}: {self.timestamps.size} timestamps "
                f"vs {self.watts.size} readings"
            )
        if self.timestamps.size == 0:
            raise IngestError(f"channel {self.channel}: empty series")
        steps = np.diff(self.timestamps)
        bad = np.flatnonzero(steps <= 0)
        if bad.size:
            raise IngestError("timestamps not strictly increasing", row=int(bad[0]) + 1)

    def __len__(self) -> int:
        return int(self.timestamps.size)


@dataclass(frozen=True)
class ApplianceSpec:
    """Per-appliance constants used for clipping and state extraction."""

    name: str
    max_power_w: float
    power_threshold_w: float
    min_on_s: float
    min_off_s: float

    def __post_init__(self):
        for fname in ("max_power_w", "power_threshold_w", "min_on_s", "min_off_s"):
            if getattr(self, fname) < 0:
                raise ValueError(f"{self.name}: {fname} must be non-negative")
        if self.power_threshold_w >= self.max_power_w:
            raise ValueError(f"{self.name}: power threshold must be below max power")


# thresholds for the three studied appliance types
DEFAULT_APPLIANCES = (
    ApplianceSpec("fridge", 300.0, 50.0, 1.0, 0.0),
    ApplianceSpec("dishwasher", 2500.0, 20.0, 60.0, 60.0),
    ApplianceSpec("washing_machine", 2500.0, 20.0, 60.0, 5.0),
)


@dataclass
class WindowSample:
    """One normalized aggregate window with per-step, per-appliance labels."""

    aggregate: np.ndarray  # float32, shape (window_len,)
    labels: np.ndarray  # uint8, shape (I, window_len)
    household_id: str = ""
    start_time: int = -1

    def __post_init__(self):
        self.aggregate = np.asarray(self.aggregate, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if not np.isfinite(self.aggregate).all():
            raise DataError("window aggregate contains non-finite values")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("window labels must be binary")
        if self.labels.ndim != 2 or self.labels.shape[1] != self.aggregate.shape[0]:
            raise DataError(
                f"label shape {self.labels.shape} does not match window "
                f"length {self.aggregate.shape[0]}"
            )


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeriesSchema:
    """Row format of channel files: delimited (unix-seconds, watts) text."""

    delimiter: str | None = None  # None = any whitespace
    comment: str = "#"


def load_series(
    path, channel: str, source_id: str = "", schema: SeriesSchema = SeriesSchema()
) -> RawSeries:
    """Parse one channel file; negative readings are clamped to 0 and counted."""
    times: list[int] = []
    watts: list[float] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith(schema.comment):
                continue
            parts = line.split(schema.delimiter)
            if len(parts) != 2:
                raise IngestError(f"expected 2 columns, got {len(parts)}", row=lineno)
            try:
                t = int(float(parts[0]))
                w = float(parts[1])
            except ValueError as exc:
                raise IngestError(f"unparsable value: {exc}", row=lineno) from None
            times.append(t)
            watts.append(w)
    if not times:
        raise IngestError(f"{path}: empty series")
    ts = np.asarray(times, dtype=np.int64)
    ws = np.asarray(watts, dtype=np.float64)
    steps = np.diff(ts)
    bad = np.flatnonzero(steps <= 0)
    if bad.size:
        raise IngestError("timestamps not strictly increasing", row=int(bad[0]) + 2)
    negative = int((ws < 0).sum())
    if negative:
        log.warning("%s: clamped %d negative readings to 0", path, negative)
        ws = np.maximum(ws, 0.0)
    return RawSeries(ts, ws, source_id=source_id, channel=channel)


def clip_max_power(series: RawSeries, spec: ApplianceSpec) -> tuple[RawSeries, int]:
    """Replace readings above the appliance's max power; returns the count."""
    over = series.watts > spec.max_power_w
    count = int(over.sum())
    watts = np.where(over, spec.max_power_w, series.watts)
    return RawSeries(series.timestamps, watts, series.source_id, series.channel), count


def downsample_6s(series: RawSeries) -> tuple[RawSeries, int]:
    """Average into non-overlapping 6 s bins aligned to the first timestamp.

    Bins with no samples are forward-filled from the previous bin; the count
    of filled bins is returned alongside the resampled series.
    """
    t0 = int(series.timestamps[0])
    idx = (series.timestamps - t0) // SAMPLE_PERIOD_S
    n_bins = int(idx[-1]) + 1
    sums = np.bincount(idx, weights=series.watts, minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    filled = int((counts == 0).sum())
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    if filled:
        # forward fill: the first bin always has the first sample
        have = counts > 0
        last_seen = np.maximum.accumulate(np.where(have, np.arange(n_bins), 0))
        means = means[last_seen]
        log.debug("%s/%s: forward-filled %d empty bins", series.source_id, series.channel, filled)
    ts = t0 + SAMPLE_PERIOD_S * np.arange(n_bins, dtype=np.int64)
    return RawSeries(ts, means, series.source_id, series.channel), filled


def normalize(series: RawSeries, mean_w: float) -> RawSeries:
    """Shift by the training-portion mean and scale by the 2000 W constant."""
    values = (series.watts - mean_w) / NORMALIZE_SCALE_W
    return RawSeries(series.timestamps, values, series.source_id, series.channel)


def denormalize(values: np.ndarray, mean_w: float) -> np.ndarray:
    return values * NORMALIZE_SCALE_W + mean_w


# ---------------------------------------------------------------------------
# activation-time thresholding
# ---------------------------------------------------------------------------


def _runs(mask: np.ndarray) -> list[tuple[int, int, bool]]:
    """Maximal constant runs of a boolean array as (start, end, value)."""
    edges = np.flatnonzero(np.diff(mask.view(np.int8))) + 1
    bounds = np.concatenate(([0], edges, [mask.size]))
    return [(int(a), int(b), bool(mask[a])) for a, b in zip(bounds[:-1], bounds[1:])]


def threshold_states(
    watts: np.ndarray | RawSeries,
    spec: ApplianceSpec,
    sample_period_s: float = SAMPLE_PERIOD_S,
) -> np.ndarray:
    """Binary appliance state series from 6 s submetered power.

    Three passes, in order: binarize at the power threshold; set OFF gaps
    strictly shorter than the minimum OFF duration to ON (suppresses spikes
    that split one activation in two); zero ON runs strictly shorter than the
    minimum ON duration.  Runs touching the series ends follow the same rules.
    """
    if isinstance(watts, RawSeries):
        watts = watts.watts
    watts = np.asarray(watts, dtype=np.float64)
    state = watts >= spec.power_threshold_w
    if state.size == 0:
        return state.astype(np.uint8)
    if spec.min_off_s > 0:
        for a, b, val in _runs(state):
            if not val and (b - a) * sample_period_s < spec.min_off_s:
                state[a:b] = True
    if spec.min_on_s > 0:
        for a, b, val in _runs(state):
            if val and (b - a) * sample_period_s < spec.min_on_s:
                state[a:b] = False
    return state.astype(np.uint8)


# ---------------------------------------------------------------------------
# windows and splits
# ---------------------------------------------------------------------------


def make_windows(
    aggregate: np.ndarray,
    labels: np.ndarray,
    window_len: int = DEFAULT_WINDOW_LEN,
    stride: int = TRAIN_STRIDE,
    household_id: str = "",
    start_times: np.ndarray | None = None,
) -> list[WindowSample]:
    """Sliding windows over an aligned (aggregate, labels) pair.

    The trailing remainder shorter than one window is dropped.
    """
    aggregate = np.asarray(aggregate)
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != aggregate.shape[0]:
        raise DataError(
            f"labels shape {labels.shape} does not align with series "
            f"length {aggregate.shape[0]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = []
    for start in range(0, aggregate.shape[0] - window_len + 1, stride):
        t = int(start_times[start]) if start_times is not None else start
        out.append(
            WindowSample(
                aggregate[start : start + window_len],
                labels[:, start : start + window_len],
                household_id=household_id,
                start_time=t,
            )
        )
    return out


@dataclass(frozen=True)
class SplitPlan:
    """Per-household time-fraction ranges for train/validation/test roles."""

    mode: str  # "seen" | "unseen"
    assignments: tuple[tuple[str, str, float, float], ...]  # (household, role, lo, hi)
    case: int | None = None

    def ranges(self, household: str) -> dict[str, tuple[float, float]]:
        return {
            role: (lo, hi)
            for hid, role, lo, hi in self.assignments
            if hid == household
        }

    def households(self) -> list[str]:
        seen: list[str] = []
        for hid, _, _, _ in self.assignments:
            if hid not in seen:
                seen.append(hid)
        return seen


SEEN_FRACTIONS = (0.8, 0.1, 0.1)


def plan_split(households: list[str], mode: str, case: int | None = None) -> SplitPlan:
    """Build the split plan for the seen or unseen protocol.

    Seen: each household contributes contiguous 80/10/10 train/validation/test
    time ranges.  Unseen case k (1-based): household k is entirely test; every
    other household splits 90/10 into train/validation.
    """
    if not households:
        raise ValueError("need at least one household")
    if mode == "seen":
        tr, va, _ = SEEN_FRACTIONS
        rows = []
        for hid in households:
            rows.append((hid, "train", 0.0, tr))
            rows.append((hid, "val", tr, tr + va))
            rows.append((hid, "test", tr + va, 1.0))
        return SplitPlan("seen", tuple(rows))
    if mode == "unseen":
        if case is None or not 1 <= case <= len(households):
            raise ValueError(
                f"unseen mode needs a case in 1..{len(households)}, got {case}"
            )
        test_hid = households[case - 1]
        rows = [(test_hid, "test", 0.0, 1.0)]
        for hid in households:
            if hid == test_hid:
                continue
            rows.append((hid, "train", 0.0, 0.9))
            rows.append((hid, "val", 0.9, 1.0))
        return SplitPlan("unseen", tuple(rows), case=case)
    raise ValueError(f"unknown split mode {mode!r}")


def slice_fraction(length: int, lo: float, hi: float) -> slice:
    """Integer sample range [floor(length·lo), floor(length·hi))."""
    return slice(int(length * lo), int(length * hi))


# ---------------------------------------------------------------------------
# synthetic households
# ---------------------------------------------------------------------------


@dataclass
class _Program:
    """Piecewise-constant appliance schedule painted onto a watts array."""

    watts: np.ndarray

    def paint(self, start: int, levels: list[tuple[int, float]]) -> int:
        """Write consecutive (n_samples, watts) phases; returns the end index."""
        pos = start
        for n, w in levels:
            hi = min(pos + n, self.watts.size)
            self.watts[pos:hi] = w
            pos = hi
            if pos >= self.watts.size:
                break
        return pos


def _synth_fridge(rng: np.random.Generator, n: int, step_s: int) -> np.ndarray:
    """Periodic duty-cycle rectangles, ~30 min period, 80-120 W."""
    watts = np.zeros(n)
    prog = _Program(watts)
    period = rng.uniform(1500.0, 1900.0)  # seconds, per household
    duty = rng.uniform(0.52, 0.56)
    house_power = rng.uniform(108.0, 120.0)
    t = int(rng.uniform(0, period) / step_s)
    while t < n:
        on_len = max(1, int(period * duty * rng.uniform(0.96, 1.04) / step_s))
        off_len = max(1, int(period * (1 - duty) * rng.uniform(0.96, 1.04) / step_s))
        power = house_power + rng.uniform(-2.0, 2.0)
        prog.paint(t, [(on_len, power)])
        t += on_len + off_len
    return watts


def _synth_dishwasher(rng: np.random.Generator, n: int, step_s: int) -> np.ndarray:
    """Sparse ~90-minute programs dominated by 2000 W heating plateaus."""
    watts = np.zeros(n)
    prog = _Program(watts)
    day = 86400 // step_s
    minutes = 60 // step_s
    for day_start in range(0, n, day):
        starts = []
        if rng.random() < 0.75:
            starts.append(day_start + int(rng.uniform(0.25, 0.55) * day))
        if rng.random() < 0.15:
            starts.append(day_start + int(rng.uniform(0.65, 0.92) * day))
        for start in starts:
            if start >= n:
                break
            phases = [
                (int(rng.uniform(24, 28)) * minutes, 2000.0),
                (int(rng.uniform(3, 5)) * minutes, rng.uniform(350.0, 450.0)),
                (int(rng.uniform(22, 26)) * minutes, 2000.0),
                (int(rng.uniform(3, 5)) * minutes, rng.uniform(350.0, 450.0)),
                (int(rng.uniform(24, 28)) * minutes, 2000.0),
            ]
            prog.paint(start, phases)
    return watts


def _synth_washer(rng: np.random.Generator, n: int, step_s: int) -> np.ndarray:
    """Sparse multi-state wash/rinse/spin programs at mid-range levels."""
    watts = np.zeros(n)
    prog = _Program(watts)
    day = 86400 // step_s
    minutes = 60 // step_s
    for day_start in range(0, n, day):
        if rng.random() >= 0.5:
            continue
        start = day_start + int(rng.uniform(0.2, 0.85) * day)
        if start >= n:
            break
        phases = [
            (int(rng.uniform(4, 6)) * minutes, rng.uniform(45.0, 60.0)),  # fill
            (int(rng.uniform(28, 35)) * minutes, rng.uniform(240.0, 290.0)),  # wash
            (int(rng.uniform(8, 12)) * minutes, rng.uniform(150.0, 190.0)),  # rinse
            (int(rng.uniform(10, 14)) * minutes, rng.uniform(580.0, 660.0)),  # spin
        ]
        prog.paint(start, phases)
    return watts


_GENERATORS = {
    "fridge": _synth_fridge,
    "dishwasher": _synth_dishwasher,
    "washing_machine": _synth_washer,
}


def synth_households(
    seed: int,
    n_households: int = 3,
    days: float = 14,
    appliances: tuple[ApplianceSpec, ...] = DEFAULT_APPLIANCES,
    noise_sigma_w: float = 15.0,
    step_s: int = SAMPLE_PERIOD_S,
) -> dict[str, dict[str, RawSeries]]:
    """Deterministic synthetic dataset: per household, appliance channels plus
    an aggregate of their sum, a constant base load and clamped Gaussian noise.

    Appliance programs respect their spec's threshold and minimum durations,
    so activation-time thresholding recovers the generated states exactly.
    """
    n = int(days * 86400 / step_s)
    house_seeds = np.random.SeedSequence(seed).spawn(n_households)
    out: dict[str, dict[str, RawSeries]] = {}
    for h, sseq in enumerate(house_seeds, start=1):
        rng = np.random.default_rng(sseq)
        hid = f"house_{h}"
        ts = step_s * np.arange(n, dtype=np.int64)
        channels: dict[str, RawSeries] = {}
        total = np.zeros(n)
        for spec in appliances:
            gen = _GENERATORS.get(spec.name)
            if gen is None:
                raise ValueError(f"no synthetic generator for appliance {spec.name!r}")
            watts = gen(rng, n, step_s)
            channels[spec.name] = RawSeries(ts, watts, hid, spec.name)
            total = total + watts
        base = rng.uniform(40.0, 80.0)
        noise = rng.normal(0.0, noise_sigma_w, size=n) if noise_sigma_w > 0 else 0.0
        aggregate = np.maximum(total + base + noise, 0.0)
        channels["aggregate"] = RawSeries(ts, aggregate, hid, "aggregate")
        out[hid] = channels
    return out


# ---------------------------------------------------------------------------
# windowed dataset files and the appliance manifest
# ---------------------------------------------------------------------------

WINDOWS_MAGIC = b"FNLW"
WINDOWS_VERSION = 1


def write_windows(path, samples: list[WindowSample], appliance_names: list[str]) -> None:
    """Binary window file: FNLW header, then per-record f32 aggregates and
    bit-packed labels."""
    if not samples:
        window_len = DEFAULT_WINDOW_LEN
        n_app = len(appliance_names)
    else:
        window_len = samples[0].aggregate.size
        n_app = samples[0].labels.shape[0]
    if n_app != len(appliance_names):
        raise DataError(
            f"{len(appliance_names)} appliance names for {n_app} label rows"
        )
    with open(path, "wb") as fh:
        fh.write(WINDOWS_MAGIC)
        fh.write(struct.pack("<HHH", WINDOWS_VERSION, window_len, n_app))
        for name in appliance_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        for s in samples:
            if s.aggregate.size != window_len or s.labels.shape != (n_app, window_len):
                raise DataError("inconsistent window shapes in one file")
            fh.write(s.aggregate.astype("<f4").tobytes())
            fh.write(np.packbits(s.labels.reshape(-1)).tobytes())


def read_windows(path, household_id: str = "") -> tuple[list[WindowSample], list[str]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != WINDOWS_MAGIC:
        raise DataError(f"not a windowed dataset file: bad magic {buf[:4]!r}")
    version, window_len, n_app = struct.unpack_from("<HHH", buf, 4)
    if version != WINDOWS_VERSION:
        raise DataError(f"unsupported window file version {version}")
    offset = 10
    names = []
    for _ in range(n_app):
        (ln,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        names.append(buf[offset : offset + ln].decode("utf-8"))
        offset += ln
    label_bytes = -(-(window_len * n_app) // 8)
    record = 4 * window_len + label_bytes
    body = len(buf) - offset
    if body % record != 0:
        raise DataError(f"truncated window file: {body} payload bytes, record size {record}")
    samples = []
    for _ in range(body // record):
        agg = np.frombuffer(buf, dtype="<f4", count=window_len, offset=offset)
        offset += 4 * window_len
        bits = np.frombuffer(buf, dtype=np.uint8, count=label_bytes, offset=offset)
        offset += label_bytes
        labels = np.unpackbits(bits)[: window_len * n_app].reshape(n_app, window_len)
        samples.append(WindowSample(agg, labels, household_id=household_id))
    return samples, names


def samples_to_arrays(samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into (X, Y) training arrays: (n, 1, L) f32, (n, I, L) u8."""
    if not samples:
        raise DataError("no windows to stack")
    x = np.stack([s.aggregate for s in samples]).astype(np.float32)[:, None, :]
    y = np.stack([s.labels for s in samples]).astype(np.uint8)
    return x, y


def write_manifest(path, appliances: tuple[ApplianceSpec, ...] = DEFAULT_APPLIANCES) -> None:
    """INI manifest mapping channel names to their threshold constants."""
    parser = configparser.ConfigParser()
    for spec in appliances:
        parser[spec.name] = {
            "max_power_w": repr(spec.max_power_w),
            "power_threshold_w": repr(spec.power_threshold_w),
            "min_on_s": repr(spec.min_on_s),
            "min_off_s": repr(spec.min_off_s),
        }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def read_manifest(path) -> tuple[ApplianceSpec, ...]:
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    specs = []
    for name in parser.sections():
        sec = parser[name]
        try:
            specs.append(
                ApplianceSpec(
                    name,
                    float(sec["max_power_w"]),
                    float(sec["power_threshold_w"]),
                    float(sec["min_on_s"]),
                    float(sec["min_off_s"]),
                )
            )
        except KeyError as exc:
            raise DataError(f"manifest section [{name}] missing key {exc}") from None
    if not specs:
        raise DataError(f"{path}: manifest lists no appliances")
    return tuple(specs)


def write_series(path, series: RawSeries) -> None:
    """Plain-text (unix-seconds, watts) channel file."""
    with open(path, "w", encoding="utf-8") as fh:
        for t, w in zip(series.timestamps, series.watts):
            fh.write(f"{int(t)} {w:.3f}\n")
