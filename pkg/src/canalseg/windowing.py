"""Per-scan dynamic intensity windowing.

The window centre is the most populated histogram bin; the width follows the
robust intensity range of the scan, growing linearly up to a knee and four
times slower beyond it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import Histogram, NormVolume, Volume, compute_histogram

WW_KNEE = 2000.0
WW_SLOPE_ABOVE_KNEE = 0.25
RANGE_QUANTILES = (0.005, 0.995)


class EmptyHistogram(ValueError):
    pass


@dataclass(frozen=True)
class WindowParams:
    wc: float
    ww: float

    def __post_init__(self):
        if not self.ww >= 1:
            raise ValueError(f"window width must be >= 1, got {self.ww}")

    @property
    def lower(self) -> float:
        return self.wc - self.ww / 2

    @property
    def upper(self) -> float:
        return self.wc + self.ww / 2


def histogram_quantile(h: Histogram, q: float) -> float:
    """Centre of the first bin whose cumulative count reaches ``q`` of the total."""
    cum = np.cumsum(h.counts, dtype=np.int64)
    k = int(np.searchsorted(cum, q * cum[-1], side="left"))
    return float(h.origin + (min(k, len(cum) - 1) + 0.5) * h.bin_width)


def width_from_range(r: float) -> float:
    if r <= WW_KNEE:
        ww = r
    else:
        ww = WW_KNEE + WW_SLOPE_ABOVE_KNEE * (r - WW_KNEE)
    return max(float(ww), 1.0)


def compute_window(h: Histogram) -> WindowParams:
    counts = np.asarray(h.counts)
    if counts.size == 0 or counts.sum() == 0:
        raise EmptyHistogram("histogram has no counts")
    mode = int(np.argmax(counts))  # argmax returns the lowest index on ties
    wc = h.origin + (mode + 0.5) * h.bin_width
    lo, hi = (histogram_quantile(h, q) for q in RANGE_QUANTILES)
    return WindowParams(wc=float(wc), ww=width_from_range(hi - lo))


def apply_window(v: Volume, w: WindowParams) -> NormVolume:
    x = v.voxels.astype(np.float64)
    y = np.clip((x - w.lower) / w.ww, 0.0, 1.0)
    return NormVolume(y.astype(np.float32), spacing=v.spacing)


def window_volume(v: Volume, bin_width: int = 10) -> tuple[NormVolume, WindowParams]:
    w = compute_window(compute_histogram(v, bin_width))
    return apply_window(v, w), w
