"""Whole-sequence coding: GoP structure, optional online updating, container output."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..bitstream import FrameLatents, SequenceHeader, write_sequence
from ..bitstream.container import lambda_id
from ..codec.model import INFER, CodecModel, as_frame_tensor, code_i
from ..metrics import ms_ssim, psnr
from ..oeu import OFF, OnlineConfig, online_update


@dataclass
class FrameStat:
    index: int
    frame_type: str
    psnr: float
    bits_estimate: float
    loss: float
    iterations: int = 0
    loss0: float | None = None
    bits_estimate0: float | None = None
    flagged: bool = False
    ms_ssim: float | None = None


@dataclass
class EncodedSequence:
    blob: bytes
    recon: np.ndarray
    header: SequenceHeader
    frames: list[FrameStat] = field(default_factory=list)
    variant: str = OFF

    @property
    def bpp(self) -> float:
        h = self.header
        return 8.0 * len(self.blob) / (h.width * h.height * h.frame_count)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([f.psnr for f in self.frames]))

    def stats(self) -> dict:
        p_frames = [f for f in self.frames if f.frame_type == "P"]
        out = {
            "frames": self.header.frame_count,
            "width": self.header.width,
            "height": self.header.height,
            "gop": self.header.gop,
            "variant": self.variant,
            "bytes": len(self.blob),
            "bpp": self.bpp,
            "psnr": self.mean_psnr,
            "psnr_per_frame": [f.psnr for f in self.frames],
            "mean_p_loss": float(np.mean([f.loss for f in p_frames])) if p_frames else None,
            "model_hash": self.header.model_hash.hex(),
        }
        if all(f.ms_ssim is not None for f in self.frames):
            out["ms_ssim"] = float(np.mean([f.ms_ssim for f in self.frames]))
        return out


def encode_sequence(
    model: CodecModel,
    frames: np.ndarray,
    gop: int,
    online: OnlineConfig | None = None,
    n_frames: int | None = None,
    path: str | os.PathLike | None = None,
    with_ms_ssim: bool = False,
) -> EncodedSequence:
    """Code ``frames`` [T, C, H, W] with an I-frame every ``gop`` frames.

    P-frames go through :func:`online_update`; with no config (or variant OFF)
    this is the plain encoder. The returned reconstruction is what a decoder
    rebuilds from the bitstream.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ValueError(f"frames must be [T, C, H, W], got {frames.shape}")
    if gop < 1:
        raise ValueError("GoP size must be >= 1")
    n = frames.shape[0] if n_frames is None else n_frames
    if not 1 <= n <= frames.shape[0]:
        raise ValueError(f"requested {n} frames, clip has {frames.shape[0]}")
    cfg = online or OnlineConfig(variant=OFF)
    _, c, h, w = frames.shape
    header = SequenceHeader(w, h, c, n, gop, lambda_id(model.lam), model.decoder_hash8())
    P = model.leaves()
    recon = np.empty((n, c, h, w))
    latents: list[FrameLatents] = []
    stats: list[FrameStat] = []
    ref = None
    for t in range(n):
        x = frames[t]
        if t % gop == 0:
            res = code_i(P, as_frame_tensor(x), model.lam_intra, INFER, l_max=model.l_max)
            latents.append(FrameLatents("I", [res.latent.data]))
            rec = res.recon.data
            stat = FrameStat(t, "I", 0.0, float(res.bits.data), res.stats["loss"])
        else:
            res = online_update(x, ref, model, cfg, stream=t)
            latents.append(FrameLatents("P", [res.motion, res.residual]))
            rec = res.recon
            stat = FrameStat(t, "P", 0.0, res.bits_motion + res.bits_residual, res.best_loss, res.iterations,
                             res.loss0, res.baseline_bits, res.flagged)
        recon[t] = rec[0]
        stat.psnr = psnr(x, recon[t])
        if with_ms_ssim:
            stat.ms_ssim = ms_ssim(x, recon[t])
        stats.append(stat)
        ref = rec
    blob = write_sequence(header, latents, model, path)
    return EncodedSequence(blob, recon, header, stats, cfg.variant)
