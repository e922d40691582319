"""Two-stage training: single-frame RD loss, then error-propagation-aware fine-tuning."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, clip_global_norm, ops
from .codec.model import INFER, TRAIN, CodecModel, as_frame_tensor, code_i, code_p, psnr_value
from .data import Clip
from .metrics.quality import ms_ssim

log = logging.getLogger(__name__)

LAMBDAS = (256, 512, 1024, 2048)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 512
    stage1_steps: int = 1500
    stage2_steps: int = 400
    unroll: int = 5  # T
    lr: float = 3e-3
    stage2_lr: float | None = 3e-4
    stage1_batch: int = 4
    warmup_fraction: float = 0.2
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0
    smoothing: int = 50

    def __post_init__(self):
        if self.lam not in LAMBDAS:
            raise ValueError(f"lambda must be one of {LAMBDAS}, got {self.lam}")
        if self.unroll < 1:
            raise ValueError("unroll length T must be >= 1")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class StepRecord:
    step: int
    loss: float
    distortion: float
    rate: float
    bpp: float


@dataclass
class History:
    records: list[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def smoothed(self, window: int) -> np.ndarray:
        loss = self.losses
        if len(loss) < window:
            return loss.copy()
        kernel = np.ones(window) / window
        return np.convolve(loss, kernel, mode="valid")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "L", "D", "R", "bpp"])
        for r in self.records:
            w.writerow([r.step, repr(r.loss), repr(r.distortion), repr(r.rate), repr(r.bpp)])
        return buf.getvalue()


@dataclass
class RolloutStep:
    x: np.ndarray
    recon: Tensor
    bits_m: float
    bits_y: float
    loss: Tensor


@dataclass
class Rollout:
    steps: list[RolloutStep]
    objective: Tensor  # L^T
    intra_recon: np.ndarray


# objectives --------------------------------------------------------------------


def single_frame_objective(P, model: CodecModel, x_prev: np.ndarray, x: np.ndarray, ref: np.ndarray,
                           rng: np.random.Generator):
    """Mean P-frame loss over a batch of (ref, x) pairs, plus the intra loss on ``x_prev``."""
    p = code_p(P, as_frame_tensor(x), as_frame_tensor(ref), model.lam, TRAIN, rng, model.l_max)
    i = code_i(P, as_frame_tensor(x_prev), model.lam_intra, TRAIN, rng, model.l_max)
    return p, i


def intra_reference(model: CodecModel, frames: np.ndarray) -> np.ndarray:
    """Inference-mode intra reconstruction, detached (used as a P-frame reference)."""
    P = model.leaves()
    return code_i(P, as_frame_tensor(frames), model.lam_intra, INFER, l_max=model.l_max).recon.data


def epa_rollout(P, model: CodecModel, segment: np.ndarray, T: int, rng: np.random.Generator) -> Rollout:
    """Unroll T P-frames after an intra-coded first frame, keeping the reference chain in the graph.

    ``segment`` is [T+1, C, H, W]. The intra step's loss is not part of L^T.
    """
    if segment.shape[0] < T + 1:
        raise ValueError(f"segment has {segment.shape[0]} frames, need T+1={T + 1}")
    x0 = intra_reference(model, segment[0:1])
    ref: Tensor = as_frame_tensor(x0)
    steps = []
    for t in range(1, T + 1):
        x = segment[t : t + 1]
        res = code_p(P, as_frame_tensor(x), ref, model.lam, TRAIN, rng, model.l_max)
        steps.append(RolloutStep(x, res.recon, float(res.bits_m.data), float(res.bits_y.data), res.loss))
        ref = res.recon  # no detach: gradients flow along the reconstruction chain
    total = steps[0].loss
    for s in steps[1:]:
        total = ops.add(total, s.loss)
    objective = ops.scalar_mul(total, 1.0 / T)
    return Rollout(steps, objective, x0)


# training loops ------------------------------------------------------------------


def _check_finite(value: float, step: int, lam: float, clip_ids) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at step {step} (lambda={lam}, clips={list(clip_ids)})")


def train_single_frame(
    model: CodecModel,
    clips: Sequence[Clip],
    config: TrainConfig,
    on_step: Callable[[int, CodecModel], None] | None = None,
) -> tuple[CodecModel, History]:
    """Stage 1: Adam on the mean single-frame RD loss; intra codec trained jointly.

    For the first ``warmup_fraction`` of steps the P-frame reference is the
    previous original frame; afterwards it is the previous frame's intra
    reconstruction under the current model.
    """
    model = model.clone()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = AdamState()
    history = History()
    names = [n for n in model.params.names() if not n.startswith("meta.")]
    warmup = int(config.warmup_fraction * config.stage1_steps)
    for step in range(config.stage1_steps):
        picks = rng.integers(0, len(clips), size=config.stage1_batch)
        idx = [int(rng.integers(1, len(clips[k]))) for k in picks]
        x_prev = np.stack([clips[k].frames[t - 1] for k, t in zip(picks, idx)])
        x = np.stack([clips[k].frames[t] for k, t in zip(picks, idx)])
        ref = x_prev if step < warmup else intra_reference(model, x_prev)
        P = model.params.leaves(names)
        p, i = single_frame_objective(P, model, x_prev, x, ref, rng)
        loss = ops.add(p.loss, i.loss)
        _check_finite(float(loss.data), step, model.lam, [clips[k].clip_id for k in picks])
        grads = backward(loss, names)
        grads, _ = clip_global_norm(grads, config.grad_clip)
        adam_step(model.params, grads, state, config.lr)
        history.records.append(
            StepRecord(step, float(p.loss.data), p.stats["mse"], p.stats["bpp_motion"] + p.stats["bpp_residual"],
                       p.stats["bpp_motion"] + p.stats["bpp_residual"] + i.stats["bpp"])
        )
        if on_step is not None:
            on_step(step, model)
        if step % 100 == 0:
            log.info("stage1 lam=%s step=%d L=%.4f psnr=%.2f", model.lam, step, float(p.loss.data),
                     p.stats["final_psnr"])
    return model, history


def train_epa(
    model: CodecModel,
    clips: Sequence[Clip],
    config: TrainConfig,
    on_step: Callable[[int, CodecModel], None] | None = None,
) -> tuple[CodecModel, History]:
    """Stage 2: Adam on L^T = mean of T unrolled P-frame losses. Intra parameters frozen."""
    T = config.unroll
    model = model.clone()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, T]))
    state = AdamState()
    history = History()
    frozen = set(model.intra_names())
    names = [n for n in model.params.names() if not n.startswith("meta.") and n not in frozen]
    lr = config.stage2_lr if config.stage2_lr is not None else config.lr
    for step in range(config.stage2_steps):
        k = int(rng.integers(0, len(clips)))
        clip = clips[k]
        if len(clip) < T + 1:
            raise TrainingError(f"clip {clip.clip_id} has {len(clip)} frames, T={T} needs {T + 1}")
        start = int(rng.integers(0, len(clip) - T))
        P = model.params.leaves(names)
        roll = epa_rollout(P, model, clip.frames[start : start + T + 1], T, rng)
        value = float(roll.objective.data)
        _check_finite(value, step, model.lam, [clip.clip_id])
        grads = backward(roll.objective, names)
        grads, _ = clip_global_norm(grads, config.grad_clip)
        adam_step(model.params, grads, state, lr)
        pixels = clip.frames.shape[2] * clip.frames.shape[3]
        mse = float(np.mean([np.mean((s.x - s.recon.data) ** 2) for s in roll.steps]))
        bpp = float(np.mean([(s.bits_m + s.bits_y) / pixels for s in roll.steps]))
        history.records.append(StepRecord(step, value, mse, bpp, bpp))
        if on_step is not None:
            on_step(step, model)
        if step % 50 == 0:
            log.info("stage2 lam=%s T=%d step=%d L^T=%.4f", model.lam, T, step, value)
    return model, history


# evaluation ----------------------------------------------------------------------


@dataclass
class FrameRecord:
    index: int
    frame_type: str
    psnr: float
    ms_ssim: float
    bpp: float
    loss: float
    prediction_psnr: float | None = None


def evaluate_rollout(model: CodecModel, frames: np.ndarray, n_frames: int, gop: int,
                     with_ms_ssim: bool = True) -> list[FrameRecord]:
    """Inference-mode coding with I-frames at GoP boundaries; entropy-estimate bits."""
    if n_frames > frames.shape[0]:
        raise ValueError(f"requested {n_frames} frames, clip has {frames.shape[0]}")
    P = model.leaves()
    pixels = frames.shape[2] * frames.shape[3]
    out = []
    ref = None
    for t in range(n_frames):
        x = as_frame_tensor(frames[t])
        if t % gop == 0:
            res = code_i(P, x, model.lam_intra, INFER, l_max=model.l_max)
            bits = float(res.bits.data)
            rec = FrameRecord(t, "I", res.stats["final_psnr"], 0.0, bits / pixels, res.stats["loss"])
        else:
            res = code_p(P, x, ref, model.lam, INFER, l_max=model.l_max)
            bits = float(res.bits_m.data) + float(res.bits_y.data)
            rec = FrameRecord(t, "P", res.stats["final_psnr"], 0.0, bits / pixels, res.stats["loss"],
                              res.stats["prediction_psnr"])
        if with_ms_ssim:
            rec.ms_ssim = ms_ssim(frames[t], res.recon.data[0])
        ref = res.recon
        out.append(rec)
    return out


def heldout_loss(model: CodecModel, clips: Sequence[Clip], n_frames: int, gop: int) -> float:
    """Mean inference-mode RD loss over all P-frames of GoP rollouts on ``clips``."""
    losses = [r.loss for c in clips for r in evaluate_rollout(model, c.frames, n_frames, gop, False)
              if r.frame_type == "P"]
    return float(np.mean(losses))


__all__ = [
    "History",
    "LAMBDAS",
    "Rollout",
    "StepRecord",
    "TrainConfig",
    "TrainingError",
    "epa_rollout",
    "evaluate_rollout",
    "heldout_loss",
    "intra_reference",
    "psnr_value",
    "single_frame_objective",
    "train_epa",
    "train_single_frame",
]
