"""Bjontegaard delta metrics with the classical cubic polynomial fit."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .quality import MetricError


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float = 0.0


class RDCurve:
    """At least four RD points, strictly increasing in bpp."""

    def __init__(self, points: Sequence[RDPoint], label: str = ""):
        points = sorted(points, key=lambda p: p.bpp)
        if len(points) < 4:
            raise MetricError(f"an RD curve needs at least 4 points, got {len(points)}")
        rates = [p.bpp for p in points]
        if any(r <= 0 for r in rates):
            raise MetricError("RD points must have bpp > 0")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise MetricError(f"RD curve bpp values must be strictly increasing: {rates}")
        quality = [p.psnr for p in points]
        if any(b < a for a, b in zip(quality, quality[1:])):
            warnings.warn(f"RD curve {label!r}: quality decreases with rate", stacklevel=2)
        self.points = list(points)
        self.label = label

    @classmethod
    def from_arrays(cls, bpp, psnr, ms_ssim=None, label: str = "") -> "RDCurve":
        ms = ms_ssim if ms_ssim is not None else [0.0] * len(bpp)
        return cls([RDPoint(float(r), float(q), float(m)) for r, q, m in zip(bpp, psnr, ms)], label)

    @classmethod
    def from_csv(cls, path) -> "RDCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or "bpp" not in rows[0] or "psnr" not in rows[0]:
            raise MetricError(f"{path}: RD CSV needs 'bpp' and 'psnr' columns")
        ms = [float(r["ms_ssim"]) for r in rows] if "ms_ssim" in rows[0] else None
        return cls.from_arrays([float(r["bpp"]) for r in rows], [float(r["psnr"]) for r in rows], ms,
                               label=Path(path).stem)

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def quality(self, metric: str = "psnr") -> np.ndarray:
        return np.array([getattr(p, metric) for p in self.points])


def _interval(a: np.ndarray, b: np.ndarray, what: str) -> tuple[float, float]:
    lo = max(a.min(), b.min())
    hi = min(a.max(), b.max())
    if not hi > lo:
        raise MetricError(f"curves do not overlap in {what}: [{a.min()}, {a.max()}] vs [{b.min()}, {b.max()}]")
    return float(lo), float(hi)


def _mean_diff(x_anchor, y_anchor, x_test, y_test, lo, hi) -> float:
    pa = np.polyfit(x_anchor, y_anchor, 3)
    pt = np.polyfit(x_test, y_test, 3)
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    return float((area_t - area_a) / (hi - lo))


def bd_rate(anchor: RDCurve, test: RDCurve, metric: str = "psnr") -> float:
    """Average bitrate difference (percent) at equal quality; negative means savings."""
    qa, qt = anchor.quality(metric), test.quality(metric)
    ra, rt = np.log10(anchor.rates()), np.log10(test.rates())
    lo, hi = _interval(qa, qt, "quality")
    delta = _mean_diff(qa, ra, qt, rt, lo, hi)
    return float((10.0**delta - 1.0) * 100.0)


def bd_psnr(anchor: RDCurve, test: RDCurve, metric: str = "psnr") -> float:
    """Average quality difference at equal bitrate."""
    qa, qt = anchor.quality(metric), test.quality(metric)
    ra, rt = np.log10(anchor.rates()), np.log10(test.rates())
    lo, hi = _interval(ra, rt, "log-rate")
    return _mean_diff(ra, qa, rt, qt, lo, hi)
