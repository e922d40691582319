from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..codec.entropy import L_MAX, P_MIN, bin_probabilities, scales_from_raw
from .rangecoder import TOTAL


@dataclass
class CdfTable:
    """Per-channel integer frequencies over symbols ``-l_max .. l_max`` summing to 2**16."""

    freqs: np.ndarray  # [C, 2*l_max+1] int64
    l_max: int

    @property
    def cums(self) -> np.ndarray:
        c = np.zeros((self.freqs.shape[0], self.freqs.shape[1] + 1), dtype=np.int64)
        np.cumsum(self.freqs, axis=1, out=c[:, 1:])
        return c

    def cum_lists(self) -> list[list[int]]:
        return [row.tolist() for row in self.cums]

    def probabilities(self) -> np.ndarray:
        return self.freqs / TOTAL


def quantize_pmf(p: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Largest-remainder integer frequencies, each >= 1, summing exactly to ``total``."""
    p = np.maximum(np.asarray(p, dtype=np.float64), P_MIN)
    scaled = p / p.sum() * total
    freq = np.maximum(np.floor(scaled).astype(np.int64), 1)
    rem = scaled - np.floor(scaled)
    deficit = total - int(freq.sum())
    if deficit > 0:
        order = np.lexsort((np.arange(p.size), -rem))
        freq[order[:deficit]] += 1
    elif deficit < 0:
        # remove from the smallest remainders among bins that can afford it
        order = np.lexsort((np.arange(p.size), rem))
        for i in order:
            if deficit == 0:
                break
            if freq[i] > 1:
                freq[i] -= 1
                deficit += 1
    return freq


def build_cdf(mu: np.ndarray, raw_scale: np.ndarray, l_max: int = L_MAX) -> CdfTable:
    mu = np.asarray(mu, dtype=np.float64)
    scale = scales_from_raw(np.asarray(raw_scale, dtype=np.float64))
    support = np.arange(-l_max, l_max + 1, dtype=np.float64)
    rows = [quantize_pmf(bin_probabilities(support, m, s)) for m, s in zip(mu, scale)]
    return CdfTable(np.stack(rows), l_max)
