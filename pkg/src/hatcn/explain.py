"""Trace a decision back to the input segments that drove it.

Attention picks the relevant layers and time steps; each selected
activation's receptive field is mapped onto the input, overlapping fields
are counted per input step, and the most frequently covered steps are
merged into contiguous segments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ForwardTrace


class UnsupportedScheduleError(ValueError):
    """Receptive-field start formula needs dilation 2**i at layer i."""


@dataclass
class RelevanceProfile:
    freq: np.ndarray
    relevant_layers: list[int]
    relevant_steps: list[tuple[int, int]]
    segments: list[tuple[int, int]] = field(default_factory=list)

    def segment_mass(self) -> int:
        return int(sum(self.freq[a:b + 1].sum() for a, b in self.segments))


def _check_schedule(dilations) -> None:
    if dilations is None:
        return
    for i, d in enumerate(dilations):
        if d != 2**i:
            raise UnsupportedScheduleError(
                f"layer {i} has dilation {d}; receptive-field tracing needs 2**{i}"
            )


def receptive_field_start(t: int, layer: int, kernel_size: int, dilations=None) -> int:
    """First input step that can influence layer ``layer`` (0-based) at time ``t``.

    Valid for the doubling schedule ``d_i = 2**i``, where the stacked fields
    span ``(2**(layer+1) - 1) * (kernel_size - 1)`` steps.
    """
    if t < 0 or layer < 0:
        raise ValueError("t and layer must be >= 0")
    if kernel_size < 2:
        raise ValueError("kernel_size must be >= 2")
    _check_schedule(dilations)
    return max(0, t - (2 ** (layer + 1) - 1) * (kernel_size - 1))


def top_fraction(values, fraction: float) -> list[int]:
    """Indices of the ``ceil(fraction * n)`` largest values, earliest index first on ties."""
    v = np.asarray(values, dtype=np.float64)
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if v.size == 0:
        return []
    # guard against 0.1*30 == 3.0000000000000004
    count = max(1, math.ceil(round(fraction * v.size, 9)))
    order = np.lexsort((np.arange(v.size), -v))
    return sorted(order[:count].tolist())


def select_relevant(
    trace: ForwardTrace, layer_pct: float = 0.10, step_pct: float = 0.10, sample: int = 0
) -> tuple[list[int], list[tuple[int, int]]]:
    """Relevant layers (by across-layer attention) and their relevant time steps.

    Each selected step is paired with its own layer: ``(layer, t)``.
    """
    if trace is None or trace.layers == 0:
        raise ValueError("trace is empty")
    if not 0 <= sample < trace.batch_size:
        raise IndexError(f"sample {sample} outside batch of {trace.batch_size}")
    layers = top_fraction(trace.across_weights[sample], layer_pct)
    steps = []
    for i in layers:
        steps.extend((i, t) for t in top_fraction(trace.within_weights[i][sample], step_pct))
    return layers, steps


def relevance_frequency(steps, kernel_size: int, length: int, dilations=None) -> np.ndarray:
    """Number of selected receptive fields covering each input step."""
    _check_schedule(dilations)
    diff = np.zeros(length + 1, dtype=np.int64)
    for layer, t in steps:
        if not 0 <= t < length:
            raise ValueError(f"time step {t} outside [0, {length})")
        s = receptive_field_start(t, layer, kernel_size)
        diff[s] += 1
        diff[t + 1] -= 1
    return np.cumsum(diff[:-1])


def nearest_rank(values, q: float) -> float:
    """Nearest-rank ``q`` quantile (``q`` in [0, 1])."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(round(q * v.size, 9)))
    return float(v[rank - 1])


def extract_segments(freq, percentile: float = 0.10) -> list[tuple[int, int]]:
    """Contiguous runs of steps whose frequency is in the top ``percentile``.

    The threshold is the nearest-rank ``1 - percentile`` quantile of the
    strictly positive frequencies; segments are inclusive ``(start, end)``.
    """
    f = np.asarray(freq)
    if not 0 < percentile <= 1:
        raise ValueError("percentile must lie in (0, 1]")
    positive = f[f > 0]
    if positive.size == 0:
        return []
    threshold = nearest_rank(positive, 1.0 - percentile)
    marked = (f >= threshold) & (f > 0)
    edges = np.diff(np.concatenate([[0], marked.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def explain_sample(
    trace: ForwardTrace, sample: int = 0, layer_pct: float = 0.10, step_pct: float = 0.10,
    segment_pct: float = 0.10,
) -> RelevanceProfile:
    layers, steps = select_relevant(trace, layer_pct, step_pct, sample)
    length = trace.within_weights[0].shape[1]
    freq = relevance_frequency(steps, trace.kernel_size, length, trace.dilations)
    return RelevanceProfile(freq, layers, steps, extract_segments(freq, segment_pct))


def explanation_report(trace: ForwardTrace, profile: RelevanceProfile, series_id: str, sample: int = 0) -> dict:
    """JSON-ready explanation of one sample."""
    return {
        "series_id": series_id,
        "probability": float(trace.probability[sample]),
        "across_weights": trace.across_weights[sample].tolist(),
        "within_weights": {
            str(i): trace.within_weights[i][sample].tolist() for i in profile.relevant_layers
        },
        "relevant_layers": profile.relevant_layers,
        "freq": profile.freq.tolist(),
        "segments": [list(s) for s in profile.segments],
    }
