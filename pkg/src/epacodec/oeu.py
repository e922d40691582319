"""Per-frame online encoder updating at inference time.

A private copy of the encoder-side parameters (or, for the LFU variant, the
latents themselves) is refined for a few Adam iterations on the current
frame's rate-distortion loss. The decoder and entropy models never change, so
the emitted latents decode with the original checkpoint.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import AdamState, ParamSet, Side, Tensor, adam_step, backward, constant, ops
from .codec.model import (
    INFER,
    LAST_LAYERS,
    TRAIN,
    CodecModel,
    as_frame_tensor,
    code_i,
    code_p,
    decode_p,
    flow_net,
    motion_compensate,
    mv_decode,
    mv_encode,
    residual_encode,
    psnr_value,
    rate,
    rd_loss,
)

log = logging.getLogger(__name__)

OFF, LFU, LLU, OEU = "OFF", "LFU", "LLU", "OEU"
VARIANTS = (OFF, LFU, LLU, OEU)


class DecoderMutationError(AssertionError):
    pass


@dataclass
class OnlineConfig:
    variant: str = OEU
    max_iters: int = 10  # K
    lr: float = 1e-4  # alpha
    rel_eps: float = 1e-3  # stopping threshold, as a fraction of L^0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters (K) must be >= 1")
        if not self.lr >= 0:
            raise ValueError("online learning rate must be >= 0")
        if not self.rel_eps >= 0:
            raise ValueError("rel_eps must be >= 0")


@dataclass
class OnlineResult:
    motion: np.ndarray
    residual: np.ndarray
    recon: np.ndarray
    iterations: int
    losses: list[float]  # INFER-mode L^0 .. L^K'
    best_index: int
    bits_motion: float
    bits_residual: float
    baseline_bits: float
    stats: dict = field(default_factory=dict)
    flagged: bool = False
    touched: tuple[str, ...] = ()

    @property
    def loss0(self) -> float:
        return self.losses[0]

    @property
    def best_loss(self) -> float:
        return self.losses[self.best_index]

    @property
    def improvement(self) -> float:
        return self.losses[0] - self.losses[self.best_index]


def update_set(model: CodecModel, variant: str) -> list[str]:
    """Names of the parameters a variant is allowed to modify."""
    if variant == OEU:
        return model.p_encoder_names()
    if variant == LLU:
        return [n for n in model.p_encoder_names() if n.rsplit(".", 1)[0] in LAST_LAYERS]
    return []


def _infer_from_params(params: ParamSet, x: Tensor, ref: Tensor, model: CodecModel):
    P = {n: constant(params[n]) for n in params.names()}
    return code_p(P, x, ref, model.lam, INFER, l_max=model.l_max)


def _infer_from_latents(P_fixed, m: np.ndarray, y: np.ndarray, x: Tensor, ref: Tensor, model: CodecModel):
    m_hat = constant(np.clip(ops.round_half_away(m), -model.l_max, model.l_max))
    y_hat = constant(np.clip(ops.round_half_away(y), -model.l_max, model.l_max))
    return _latent_loss(P_fixed, m_hat, y_hat, x, ref, model)


def _latent_loss(P, m_hat: Tensor, y_hat: Tensor, x: Tensor, ref: Tensor, model: CodecModel):
    recon, _, _ = decode_p(P, m_hat, y_hat, ref)
    bits_m = rate(P, "motion", m_hat)
    bits_y = rate(P, "residual", y_hat)
    pixels = x.shape[0] * x.shape[2] * x.shape[3]
    loss = rd_loss(x, recon, bits_m, bits_y, model.lam, pixels)
    return m_hat, y_hat, recon, loss, bits_m, bits_y


def online_update(x, ref, model: CodecModel, config: OnlineConfig | None = None, stream: int = 0) -> OnlineResult:
    """Refine the encoding of one P-frame and keep the best INFER-mode candidate.

    ``x`` and ``ref`` are [C, H, W] or [1, C, H, W] arrays; ``ref`` must be the
    decoder's reconstruction of the previous frame. ``stream`` selects the
    surrogate-noise stream (the frame index when coding a sequence).
    """
    cfg = config or OnlineConfig()
    x_t, ref_t = as_frame_tensor(x), as_frame_tensor(ref)
    hash_before = model.decoder_hash()
    base = code_p(model.leaves(), x_t, ref_t, model.lam, INFER, l_max=model.l_max)
    losses = [float(base.loss.data)]
    best = (base.motion.data, base.residual.data, base.recon.data, float(base.bits_m.data), float(base.bits_y.data))
    baseline_bits = best[3] + best[4]
    result = OnlineResult(
        best[0], best[1], best[2], 0, losses, 0, best[3], best[4], baseline_bits, dict(base.stats)
    )
    if cfg.variant == OFF:
        return result

    eps = cfg.rel_eps * losses[0]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stream]))
    state = AdamState()
    fixed = {n: constant(model.params[n]) for n in model.params.names()}
    if cfg.variant == LFU:
        m0, y0 = continuous_latents(fixed, x_t, ref_t)
        work = ParamSet()
        work.add("latent.motion", np.clip(m0, -model.l_max, model.l_max), Side.ENCODER)
        work.add("latent.residual", np.clip(y0, -model.l_max, model.l_max), Side.ENCODER)
        touched = tuple(work.names())
    else:
        work = model.params.copy()
        touched = tuple(update_set(model, cfg.variant))
    result.touched = touched

    i = 0
    try:
        for i in range(1, cfg.max_iters + 1):
            if cfg.variant == LFU:
                zm = Tensor(work["latent.motion"], name="latent.motion")
                zy = Tensor(work["latent.residual"], name="latent.residual")
                *_, loss, _, _ = _latent_loss(fixed, ops.ste_round(zm), ops.ste_round(zy), x_t, ref_t, model)
            else:
                P = work_leaves(work, touched)
                loss = code_p(P, x_t, ref_t, model.lam, TRAIN, rng, model.l_max).loss
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError("non-finite surrogate loss")
            grads = backward(loss, {n: work[n] for n in touched})
            adam_step(work, grads, state, cfg.lr)
            if cfg.variant == LFU:
                for n in touched:
                    work[n] = np.clip(work[n], -model.l_max, model.l_max)
                m_hat, y_hat, recon, cand_loss, bm, by = _infer_from_latents(
                    fixed, work["latent.motion"], work["latent.residual"], x_t, ref_t, model
                )
                cand = (m_hat.data, y_hat.data, recon.data, float(bm.data), float(by.data))
                cand_stats = None
            else:
                out = _infer_from_params(work, x_t, ref_t, model)
                cand_loss = out.loss
                cand = (out.motion.data, out.residual.data, out.recon.data, float(out.bits_m.data),
                        float(out.bits_y.data))
                cand_stats = out.stats
            value = float(cand_loss.data)
            if not math.isfinite(value):
                raise FloatingPointError("non-finite candidate loss")
            losses.append(value)
            if value < losses[result.best_index]:
                result.best_index = i
                best = cand
                result.stats = dict(cand_stats) if cand_stats else _latent_stats(x_t, cand, value)
            if abs(losses[i] - losses[i - 1]) < eps:
                break
    except (FloatingPointError, ArithmeticError) as exc:
        log.warning("online update reverted to baseline latents: %s", exc)
        result.flagged = True
        result.best_index = 0
        best = (base.motion.data, base.residual.data, base.recon.data, float(base.bits_m.data),
                float(base.bits_y.data))
        result.stats = dict(base.stats)
        losses[:] = losses[: i]
    result.motion, result.residual, result.recon, result.bits_motion, result.bits_residual = best
    result.iterations = len(losses) - 1
    if model.decoder_hash() != hash_before:
        raise DecoderMutationError("decoder-side parameters changed during online updating")
    return result


def continuous_latents(P, x: Tensor, ref: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Encoder outputs before rounding, with the residual taken against the rounded-motion prediction.

    Rounding these reproduces the baseline INFER-mode latents exactly.
    """
    m = mv_encode(P, flow_net(P, x, ref))
    m_hat = constant(ops.round_half_away(m.data))
    pred, _ = motion_compensate(P, ref, mv_decode(P, m_hat))
    y = residual_encode(P, ops.sub(x, pred))
    return m.data, y.data


def work_leaves(work: ParamSet, trainable: Sequence[str]) -> dict[str, Tensor]:
    return work.leaves(list(trainable))


def _latent_stats(x: Tensor, cand, loss: float) -> dict:
    pixels = x.shape[0] * x.shape[2] * x.shape[3]
    return {
        "bpp_motion": cand[3] / pixels,
        "bpp_residual": cand[4] / pixels,
        "final_psnr": psnr_value(x.data, cand[2]),
        "mse": float(np.mean((x.data - cand[2]) ** 2)),
        "loss": loss,
    }


@dataclass
class VariantSummary:
    variant: str
    mean_loss: float
    mean_bpp: float
    mean_psnr: float
    mean_iterations: float
    mean_improvement: float
    frames: int


def variant_comparison(pairs: Sequence[tuple[np.ndarray, np.ndarray]], model: CodecModel,
                       configs: Sequence[OnlineConfig]) -> list[VariantSummary]:
    """Run every config over the same (frame, reference) pairs; entropy-estimate bpp."""
    out = []
    for cfg in configs:
        rows = [online_update(x, ref, model, cfg) for x, ref in pairs]
        pixels = [np.asarray(x).shape[-1] * np.asarray(x).shape[-2] for x, _ in pairs]
        out.append(
            VariantSummary(
                cfg.variant,
                float(np.mean([r.best_loss for r in rows])),
                float(np.mean([(r.bits_motion + r.bits_residual) / p for r, p in zip(rows, pixels)])),
                float(np.mean([r.stats["final_psnr"] for r in rows])),
                float(np.mean([r.iterations for r in rows])),
                float(np.mean([r.improvement for r in rows])),
                len(rows),
            )
        )
    return out


def code_intra(x, model: CodecModel):
    """Convenience: INFER-mode intra coding (online updating never touches I-frames)."""
    return code_i(model.leaves(), as_frame_tensor(x), model.lam_intra, INFER, l_max=model.l_max)
