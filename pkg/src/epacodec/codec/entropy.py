"""Per-channel logistic entropy model over integer latents."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from ..autodiff import Tensor, ops

P_MIN = 2.0**-16
L_MAX = 64
SCALE_EPS = 1e-6


def scales_from_raw(raw: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, raw) + SCALE_EPS


def raw_from_scale(scale: float) -> float:
    """Inverse of the softplus parameterization (ignores the tiny epsilon)."""
    s = scale - SCALE_EPS
    return float(s + math.log(-math.expm1(-s)))


def bin_probabilities(values: np.ndarray, mu: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Logistic mass of the unit bin centred on ``values``; mu/scale broadcast.

    Not floored.
    """
    upper = (values + 0.5 - mu) / scale
    lower = (values - 0.5 - mu) / scale
    # evaluate in the tail that avoids cancellation
    flip = (values - mu) > 0
    p_right = expit(-lower) - expit(-upper)
    p_left = expit(upper) - expit(lower)
    return np.where(flip, p_right, p_left)


def rate_bits(latent: Tensor, mu: Tensor, raw_scale: Tensor) -> Tensor:
    """Total bits ``sum(-log2 P_c(v))`` for a [1, C, h, w] latent, differentiable.

    Each bin probability is floored at ``P_MIN`` before the log, capping any
    symbol at 16 bits.
    """
    if latent.data.ndim != 4 or latent.shape[1] != mu.shape[0]:
        raise ValueError(f"latent {latent.shape} does not match {mu.shape[0]} entropy channels")
    scale = ops.add(ops.softplus(raw_scale), SCALE_EPS)
    mu_map = ops.expand_channels(mu, latent.shape)
    s_map = ops.expand_channels(scale, latent.shape)
    centred = ops.sub(latent, mu_map)
    upper = ops.div(ops.add(centred, 0.5), s_map)
    lower = ops.div(ops.sub(centred, 0.5), s_map)
    # mirror the right tail onto the left (exact) so the difference stays well conditioned
    left = (centred.data <= 0).astype(np.float64)
    sign = 2.0 * left - 1.0
    hi = ops.sigmoid(ops.mul(_select(left, upper, lower), sign))
    lo = ops.sigmoid(ops.mul(_select(left, lower, upper), sign))
    p = ops.floor_at(ops.sub(hi, lo), P_MIN)
    return ops.scalar_mul(ops.reduce_sum(ops.log(p)), -1.0 / math.log(2.0))


def _select(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    return ops.add(ops.mul(a, mask), ops.mul(b, 1.0 - mask))


def rate_bits_reference(values: np.ndarray, mu: np.ndarray, raw_scale: np.ndarray) -> float:
    """Plain-numpy counterpart of :func:`rate_bits` (no graph)."""
    scale = scales_from_raw(raw_scale)
    p = bin_probabilities(values, mu[None, :, None, None], scale[None, :, None, None])
    return float(-np.log2(np.maximum(p, P_MIN)).sum())
