"""Handgrip series, preprocessing, subject-level folds and a synthetic cohort.

The synthetic generator follows the squeeze / hold / release protocol: a
smooth rise to maximum voluntary contraction, a ~3 s noisy hold with mild
fatigue, then an exponential relaxation whose time constant separates the
classes (healthy subjects relax fast, patients slowly).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SERIES_LENGTH = 750

PATIENT = 1
HEALTHY = 0


class DegenerateSeriesError(ValueError):
    """Series cannot be normalized or analysed (e.g. constant)."""


class DataFormatError(ValueError):
    """Malformed input file."""


@dataclass
class Series:
    id: str
    subject_id: str
    label: int
    values: np.ndarray
    sample_rate: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise DataFormatError(f"series {self.id}: values must be a non-empty vector")
        if self.label not in (HEALTHY, PATIENT):
            raise DataFormatError(f"series {self.id}: label must be 0 or 1, got {self.label!r}")


@dataclass
class RelaxationTruth:
    """Generator ground truth for one series (indices into the raw series)."""

    start: int
    tau: float
    level: float
    window_end: int

    @property
    def window(self) -> tuple[int, int]:
        return self.start, self.window_end


@dataclass
class Dataset:
    series: list[Series]
    truth: dict[str, RelaxationTruth] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.series)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.series], dtype=np.int64)

    @property
    def subjects(self) -> list[str]:
        return [s.subject_id for s in self.series]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.series]

    def subset(self, indices) -> "Dataset":
        picked = [self.series[i] for i in indices]
        return Dataset(picked, {s.id: self.truth[s.id] for s in picked if s.id in self.truth})

    def matrix(self, length: int = SERIES_LENGTH) -> np.ndarray:
        """Preprocessed values stacked as ``(N, length)``."""
        return np.stack([preprocess(s, length).values for s in self.series])


def preprocess(raw: Series, length: int = SERIES_LENGTH) -> Series:
    """Truncate or right-pad with zeros to ``length``, min-max scaled to [0, 1].

    Extrema come from the kept samples before padding, so padding stays 0.
    """
    kept = raw.values[:length]
    lo, hi = kept.min(), kept.max()
    if not hi > lo:
        raise DegenerateSeriesError(f"series {raw.id} is constant; cannot normalize")
    out = np.zeros(length)
    out[: kept.size] = (kept - lo) / (hi - lo)
    return Series(raw.id, raw.subject_id, raw.label, out, raw.sample_rate)


# ---------------------------------------------------------------------------
# synthetic cohort


@dataclass(frozen=True)
class SynthConfig:
    patient_subjects: int = 37
    healthy_subjects: int = 18
    trials_per_subject: tuple[int, int] = (12, 14)
    sample_rate: float = 100.0
    onset_steps: tuple[int, int] = (10, 40)
    rise_steps: tuple[int, int] = (30, 60)
    hold_steps: tuple[int, int] = (250, 330)
    tail_steps: tuple[int, int] = (250, 450)
    healthy_tau: tuple[float, float] = (4.0, 14.0)
    patient_tau: tuple[float, float] = (15.0, 60.0)
    tau_jitter: float = 0.15
    fatigue: float = 0.08
    noise: float = 0.03
    residual_scale: float = 2.0
    mvc_range: tuple[float, float] = (150.0, 400.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("healthy_tau", "patient_tau"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        if self.patient_tau[0] <= self.healthy_tau[1]:
            raise ValueError("patient tau range must lie strictly above the healthy range")
        if self.patient_subjects < 1 or self.healthy_subjects < 1:
            raise ValueError("need at least one subject per class")
        lo, hi = self.trials_per_subject
        if not 1 <= lo <= hi:
            raise ValueError("trials_per_subject must satisfy 1 <= low <= high")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for key, val in values.items():
            if key not in known:
                raise ValueError(f"unknown synthetic config key {key!r}")
            default = getattr(cls, key)
            if isinstance(default, tuple):
                parts = val if isinstance(val, (list, tuple)) else str(val).split(",")
                kwargs[key] = tuple(type(default[0])(float(p)) for p in parts)
            else:
                kwargs[key] = type(default)(float(val)) if not isinstance(default, str) else val
        return cls(**kwargs)


def relaxation_window_end(start: int, tau: float) -> int:
    """Index where a noiseless relaxation has fallen to 1% of its start level."""
    return start + int(math.ceil(tau * math.log(100.0)))


def _synth_series(rng: np.random.Generator, cfg: SynthConfig, tau: float, mvc: float):
    onset = int(rng.integers(cfg.onset_steps[0], cfg.onset_steps[1] + 1))
    rise = int(rng.integers(cfg.rise_steps[0], cfg.rise_steps[1] + 1))
    hold = int(rng.integers(cfg.hold_steps[0], cfg.hold_steps[1] + 1))
    tail = int(rng.integers(cfg.tail_steps[0], cfg.tail_steps[1] + 1))
    start = onset + rise + hold
    n = start + tail
    x = np.zeros(n)
    u = np.arange(rise) / rise
    x[onset:onset + rise] = mvc * 0.5 * (1.0 - np.cos(np.pi * u))
    drop = cfg.fatigue * rng.uniform(0.0, 1.0)
    x[onset + rise:start] = mvc * (1.0 - drop * np.arange(hold) / hold)
    level = mvc * (1.0 - drop)
    # incomplete release: grip settles at a small residual, scaled with noise
    residual = level * cfg.residual_scale * cfg.noise * rng.uniform(0.0, 1.0)
    x[start:] = residual + (level - residual) * np.exp(-np.arange(tail) / tau)
    if cfg.noise > 0:
        active = np.zeros(n)
        active[onset:start] = 1.0
        freq = rng.uniform(8.0, 12.0) / cfg.sample_rate
        tremor = np.sin(2 * np.pi * freq * np.arange(n) + rng.uniform(0, 2 * np.pi))
        x += cfg.noise * mvc * (active * tremor * 0.5 + rng.standard_normal(n))
        x = np.maximum(x, 0.0)
    return x, RelaxationTruth(start, tau, level, relaxation_window_end(start, tau))


def generate_synthetic(cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Seeded synthetic cohort with per-series relaxation ground truth."""
    rng = np.random.default_rng(cfg.seed)
    series: list[Series] = []
    truth: dict[str, RelaxationTruth] = {}
    cohorts = [(PATIENT, "P", cfg.patient_subjects, cfg.patient_tau),
               (HEALTHY, "H", cfg.healthy_subjects, cfg.healthy_tau)]
    for label, prefix, count, (tau_lo, tau_hi) in cohorts:
        for s in range(count):
            subject = f"{prefix}{s:03d}"
            subject_tau = math.exp(rng.uniform(math.log(tau_lo), math.log(tau_hi)))
            mvc = rng.uniform(*cfg.mvc_range)
            trials = int(rng.integers(cfg.trials_per_subject[0], cfg.trials_per_subject[1] + 1))
            for k in range(trials):
                jitter = 1.0 + cfg.tau_jitter * rng.uniform(-1.0, 1.0)
                # keep each class inside its own range so separability holds
                tau = float(np.clip(subject_tau * jitter, tau_lo, tau_hi))
                trial_mvc = mvc * rng.uniform(0.9, 1.1)
                values, t = _synth_series(rng, cfg, tau, trial_mvc)
                sid = f"{subject}-{k:02d}"
                series.append(Series(sid, subject, label, values, cfg.sample_rate))
                truth[sid] = t
    return Dataset(series, truth)


# ---------------------------------------------------------------------------
# folds


def subject_kfold(dataset: Dataset, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Subject-level, class-stratified k-fold splits as (train, test) index arrays.

    Subjects of each class are shuffled and dealt round-robin; the healthy
    deal continues where the patient deal stopped so fold sizes stay even.
    """
    subject_label: dict[str, int] = {}
    for s in dataset.series:
        if subject_label.setdefault(s.subject_id, s.label) != s.label:
            raise DataFormatError(f"subject {s.subject_id} has series with both labels")
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(subject_label):
        raise ValueError(f"k={k} exceeds the number of subjects ({len(subject_label)})")
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    offset = 0
    for label in (PATIENT, HEALTHY):
        members = sorted(sid for sid, lab in subject_label.items() if lab == label)
        order = rng.permutation(len(members))
        for rank, j in enumerate(order):
            fold_of[members[j]] = (offset + rank) % k
        offset = (offset + len(members)) % k
    folds = np.array([fold_of[s.subject_id] for s in dataset.series])
    all_idx = np.arange(len(dataset))
    return [(all_idx[folds != f], all_idx[folds == f]) for f in range(k)]


# ---------------------------------------------------------------------------
# file formats
#
# long CSV:  series_id,subject_id,label,t,value          (one row per sample)
# wide CSV:  series_id,subject_id,label,v0,v1,...        (one row per series;
#            trailing cells may be empty for shorter series)
# truth JSON: {series_id: {start, tau, level, window_end}}

LONG_HEADER = ["series_id", "subject_id", "label", "t", "value"]
WIDE_PREFIX = ["series_id", "subject_id", "label"]


def write_long_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_HEADER)
        for s in dataset.series:
            for t, v in enumerate(s.values):
                w.writerow([s.id, s.subject_id, s.label, t, f"{v:.6f}"])


def write_wide_csv(dataset: Dataset, path) -> None:
    width = max(len(s.values) for s in dataset.series)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WIDE_PREFIX + [f"v{j}" for j in range(width)])
        for s in dataset.series:
            w.writerow([s.id, s.subject_id, s.label] + [f"{v:.6f}" for v in s.values])


def read_csv(path, sample_rate: float | None = None) -> Dataset:
    """Read long or wide CSV (detected from the header)."""
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rows)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if header == LONG_HEADER:
            return _read_long(rows, path, sample_rate)
        if header[:3] == WIDE_PREFIX and len(header) > 3:
            return _read_wide(rows, path, sample_rate)
    raise DataFormatError(f"{path}: unrecognised header {header}")


def _read_long(rows, path, sample_rate) -> Dataset:
    acc: dict[str, tuple[str, int, list[tuple[int, float]]]] = {}
    for n, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            sid, subj, label, t, value = row
            entry = acc.setdefault(sid, (subj, int(label), []))
            if entry[0] != subj or entry[1] != int(label):
                raise DataFormatError(f"{path}:{n}: inconsistent subject/label for {sid}")
            entry[2].append((int(t), float(value)))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{n}: {exc}") from exc
    series = []
    for sid, (subj, label, samples) in acc.items():
        samples.sort()
        ts = [t for t, _ in samples]
        if ts != list(range(len(ts))):
            raise DataFormatError(f"{path}: series {sid} has missing or duplicate time steps")
        series.append(Series(sid, subj, label, [v for _, v in samples], sample_rate))
    return Dataset(series)


def _read_wide(rows, path, sample_rate) -> Dataset:
    series = []
    for n, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            values = [float(v) for v in row[3:] if v.strip() != ""]
            series.append(Series(row[0], row[1], int(row[2]), values, sample_rate))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{n}: {exc}") from exc
    return Dataset(series)


def write_truth_json(dataset: Dataset, path) -> None:
    payload = {sid: asdict(t) for sid, t in dataset.truth.items()}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def read_truth_json(path) -> dict[str, RelaxationTruth]:
    raw = json.loads(Path(path).read_text())
    return {sid: RelaxationTruth(**t) for sid, t in raw.items()}
