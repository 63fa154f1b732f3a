"""Handcrafted relaxation-time feature and a margin classifier on top of it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DegenerateSeriesError

KEEP_FRACTION = 0.85


@dataclass
class RelaxationAnalysis:
    eta: float
    candidate_steps: np.ndarray
    start: int
    rt90_5: float = float("nan")
    censored: bool = False


def detect_relaxation_start(x) -> RelaxationAnalysis:
    """Locate the start of the relaxation phase.

    Threshold ``eta = (max - min) / 2``; candidates are steps with strength
    above it; the ``ceil(0.85 * n)`` strongest candidates are kept (later
    step wins a tie) and the start is the latest kept step.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3:
        raise DegenerateSeriesError("series needs at least 3 samples")
    hi, lo = x.max(), x.min()
    if not hi > lo:
        raise DegenerateSeriesError("constant series has no relaxation phase")
    eta = (hi - lo) / 2.0
    ts = np.flatnonzero(x > eta)
    keep = max(1, math.ceil(round(KEEP_FRACTION * ts.size, 9)))
    # strongest first, later time step first on ties
    order = np.lexsort((-ts, -x[ts]))
    kept = ts[order[:keep]]
    return RelaxationAnalysis(eta=float(eta), candidate_steps=ts, start=int(kept.max()))


def _crossing(x: np.ndarray, start: int, level: float) -> float | None:
    """First (interpolated) time at or after ``start`` where ``x`` drops to ``level``."""
    below = np.flatnonzero(x[start:] <= level)
    if below.size == 0:
        return None
    j = start + int(below[0])
    if j == start:
        return float(start)
    a, b = x[j - 1], x[j]
    return (j - 1) + (a - level) / (a - b)


def rt90_5(x, start: int) -> tuple[float, bool]:
    """Time for the relaxation to fall from 90% to 5% of the start strength.

    Returns ``(duration, censored)``. When the series never reaches 5% the
    result is right-censored and the duration is the length of the
    relaxation segment.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= start < x.size:
        raise ValueError(f"start {start} outside series of length {x.size}")
    peak = x[start]
    t90 = _crossing(x, start, 0.9 * peak)
    t5 = _crossing(x, start, 0.05 * peak)
    if t90 is None or t5 is None:
        return float(x.size - start), True
    return float(t5 - t90), False


def analyse(x) -> RelaxationAnalysis:
    res = detect_relaxation_start(x)
    res.rt90_5, res.censored = rt90_5(x, res.start)
    return res


@dataclass
class MarginClassifier:
    """Linear soft-margin rule on a standardized scalar feature."""

    weight: float
    bias: float
    mean: float
    scale: float

    def decision(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return self.weight * z + self.bias

    def predict(self, features) -> np.ndarray:
        return (self.decision(features) > 0).astype(int)

    @property
    def boundary(self) -> float:
        """Feature value where the decision changes sign."""
        return self.mean - self.scale * self.bias / self.weight


def hinge_objective(w: float, b: float, z: np.ndarray, s: np.ndarray, l2: float) -> float:
    return 0.5 * l2 * w * w + float(np.maximum(0.0, 1.0 - s * (w * z + b)).mean())


def train_margin_classifier(features, labels, l2: float = 1e-3, iterations: int = 3000, step: float = 0.5) -> MarginClassifier:
    """Hinge loss + L2 on the standardized feature, by subgradient descent.

    Labels are 0/1 (1 = patient). Steps shrink as ``step / sqrt(k)``; the
    iterate with the lowest objective is returned.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if f.size != y.size or f.size == 0:
        raise ValueError("features and labels must be non-empty and aligned")
    if len(set(y.tolist())) < 2:
        raise ValueError("margin classifier needs both classes")
    mean = float(f.mean())
    scale = float(f.std()) or 1.0
    z = (f - mean) / scale
    s = np.where(y == 1, 1.0, -1.0)
    w = b = 0.0
    best = (hinge_objective(w, b, z, s, l2), w, b)
    for k in range(1, iterations + 1):
        active = s * (w * z + b) < 1.0
        gw = l2 * w - (s[active] * z[active]).sum() / z.size
        gb = -s[active].sum() / z.size
        lr = step / math.sqrt(k)
        w -= lr * gw
        b -= lr * gb
        obj = hinge_objective(w, b, z, s, l2)
        if obj < best[0]:
            best = (obj, w, b)
    _, w, b = best
    return MarginClassifier(weight=w, bias=b, mean=mean, scale=scale)
