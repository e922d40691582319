from __future__ import annotations

import numpy as np

PSNR_CAP = 100.0

# standard 5-scale MS-SSIM exponents
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
DEFAULT_SCALES = 3
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


def _as_chw(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 4 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise MetricError(f"expected a [C,H,W] frame, got shape {a.shape}")
    return a


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0, MSE over every sample; identical inputs give 100 dB."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise MetricError(f"frame dimension mismatch: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = img.shape
    tmp = sum(g[i] * img[:, i : w - k + 1 + i] for i in range(k))
    return sum(g[i] * tmp[i : h - k + 1 + i, :] for i in range(k))


def _ssim_terms(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    c1, c2 = K1**2, K2**2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def scale_weights(scales: int) -> np.ndarray:
    w = np.asarray(MS_SSIM_WEIGHTS[:scales])
    return w / w.sum()


def min_size(scales: int) -> int:
    return 16 * 2 ** (scales - 1)


def ms_ssim(a, b, scales: int = DEFAULT_SCALES) -> float:
    """Multi-scale SSIM (11x11 Gaussian, sigma 1.5), weights renormalized to ``scales``.

    Multi-channel frames are scored per channel and averaged.
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise MetricError(f"frame dimension mismatch: {a.shape} vs {b.shape}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise MetricError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}, got {scales}")
    need = min_size(scales)
    if min(a.shape[1:]) < need:
        raise MetricError(
            f"frame {a.shape[2]}x{a.shape[1]} too small for {scales}-scale MS-SSIM; minimum size is {need}x{need}"
        )
    weights = scale_weights(scales)
    g = gaussian_window()
    scores = []
    for x, y in zip(a, b):
        value = 1.0
        for j in range(scales):
            ssim_j, cs_j = _ssim_terms(x, y, g)
            term = ssim_j if j == scales - 1 else cs_j
            value *= max(term, 0.0) ** weights[j]
            x, y = _pool2(x), _pool2(y)
        scores.append(value)
    return float(min(1.0, max(0.0, np.mean(scores))))
