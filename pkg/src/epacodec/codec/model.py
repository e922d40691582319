"""The miniature hybrid codec: flow, motion/residual autoencoders, compensation, intra."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..autodiff import ParamSet, Side, Tensor, constant, ops
from . import entropy
from .entropy import L_MAX

TRAIN = "train"
INFER = "infer"

FLOW_CH = 16
HIDDEN = 32
C_MOTION = 8
C_RESIDUAL = 16
C_INTRA = 16
REFINE_CH = 16
LEAK = 0.1

# fixed (non-learned) gains that put each autoencoder's latent near unit quantization scale
FLOW_OUT_GAIN = 2.0
MV_IN_GAIN = 4.0
RES_IN_GAIN = 16.0
RES_OUT_GAIN = 1.0 / 16.0
INTRA_IN_GAIN = 8.0
INTRA_OUT_GAIN = 1.0 / 8.0

INIT_ENTROPY_SCALE = 0.3

Params = Mapping[str, Tensor]


class ClampCounter:
    """Counts latent values clipped to the entropy model support at inference."""

    def __init__(self):
        self.count = 0


@dataclass
class Architecture:
    channels: int = 1

    def layers(self) -> list[tuple[str, int, int, int, Side, bool]]:
        """(prefix, cin, cout, kernel, side, zero_init) for every conv layer."""
        c = self.channels
        enc, dec = Side.ENCODER, Side.DECODER
        return [
            ("flow_net.conv1", 2 * c, FLOW_CH, 3, enc, False),
            ("flow_net.conv2", FLOW_CH, FLOW_CH, 3, enc, False),
            ("flow_net.conv3", FLOW_CH, FLOW_CH, 3, enc, False),
            ("flow_net.conv4", FLOW_CH, 2, 3, enc, True),
            ("mv_encoder.conv1", 2, HIDDEN, 3, enc, False),
            ("mv_encoder.conv2", HIDDEN, C_MOTION, 3, enc, False),
            ("residual_encoder.conv1", c, HIDDEN, 3, enc, False),
            ("residual_encoder.conv2", HIDDEN, C_RESIDUAL, 3, enc, False),
            ("intra_encoder.conv1", c, HIDDEN, 3, enc, False),
            ("intra_encoder.conv2", HIDDEN, C_INTRA, 3, enc, False),
            ("mv_decoder.conv1", C_MOTION, HIDDEN, 3, dec, False),
            ("mv_decoder.conv2", HIDDEN, 2, 3, dec, True),
            ("motion_comp.conv1", 2 * c + 2, REFINE_CH, 3, dec, False),
            ("motion_comp.conv2", REFINE_CH, c, 3, dec, True),
            ("residual_decoder.conv1", C_RESIDUAL, HIDDEN, 3, dec, False),
            ("residual_decoder.conv2", HIDDEN, c, 3, dec, True),
            ("intra_decoder.conv1", C_INTRA, HIDDEN, 3, dec, False),
            ("intra_decoder.conv2", HIDDEN, c, 3, dec, True),
        ]

    def entropy_models(self) -> dict[str, int]:
        return {"motion": C_MOTION, "residual": C_RESIDUAL, "intra": C_INTRA}

    def digest(self) -> str:
        spec = repr((self.channels, self.layers(), self.entropy_models()))
        return hashlib.sha256(spec.encode()).hexdigest()[:16]


P_ENCODER_PREFIXES = ("flow_net.", "mv_encoder.", "residual_encoder.")
LAST_LAYERS = ("mv_encoder.conv2", "residual_encoder.conv2")


def init_params(arch: Architecture, lam: float, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for prefix, cin, cout, k, side, zero in arch.layers():
        fan_in = cin * k * k
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        params.add(f"{prefix}.weight", w, side)
        params.add(f"{prefix}.bias", np.zeros(cout), side)
    raw = entropy.raw_from_scale(INIT_ENTROPY_SCALE)
    for kind, ch in arch.entropy_models().items():
        params.add(f"entropy.{kind}.mu", np.zeros(ch), Side.ENTROPY)
        params.add(f"entropy.{kind}.raw_scale", np.full(ch, raw), Side.ENTROPY)
    params.add("meta.lambda", np.array([float(lam)]), Side.META)
    params.add("meta.channels", np.array([float(arch.channels)]), Side.META)
    return params


class CodecModel:
    """Parameters plus configuration. Treated as immutable while coding."""

    def __init__(self, params: ParamSet, l_max: int = L_MAX):
        self.params = params
        self.l_max = l_max
        self.arch = Architecture(channels=int(params["meta.channels"][0]))

    @classmethod
    def create(cls, lam: float, channels: int = 1, seed: int = 0) -> "CodecModel":
        return cls(init_params(Architecture(channels), lam, seed))

    @classmethod
    def load(cls, path) -> "CodecModel":
        return cls(ParamSet.load(path))

    def save(self, path) -> None:
        self.params.save(path)

    def clone(self) -> "CodecModel":
        return CodecModel(self.params.copy(), self.l_max)

    @property
    def lam(self) -> float:
        return float(self.params["meta.lambda"][0])

    @property
    def lam_intra(self) -> float:
        return 2.0 * self.lam

    @property
    def channels(self) -> int:
        return self.arch.channels

    def decoder_names(self) -> list[str]:
        return self.params.names(Side.DECODER, Side.ENTROPY)

    def p_encoder_names(self) -> list[str]:
        return [n for n in self.params.names(Side.ENCODER) if n.startswith(P_ENCODER_PREFIXES)]

    def intra_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("intra_", "entropy.intra."))]

    def decoder_hash(self) -> str:
        """Hash of everything a decoder needs: architecture, decoder and entropy params."""
        h = hashlib.sha256(self.arch.digest().encode())
        h.update(self.params.digest(Side.DECODER, Side.ENTROPY, Side.META).encode())
        return h.hexdigest()

    def decoder_hash8(self) -> bytes:
        return bytes.fromhex(self.decoder_hash())[:8]

    def leaves(self, trainable=None) -> dict[str, Tensor]:
        return self.params.leaves(trainable if trainable is not None else ())


# building blocks -------------------------------------------------------------


def conv(P: Params, prefix: str, x: Tensor, stride: int = 1) -> Tensor:
    w = P[f"{prefix}.weight"]
    return ops.conv2d(x, w, P[f"{prefix}.bias"], stride=stride, padding=w.shape[-1] // 2)


def lrelu(x: Tensor) -> Tensor:
    return ops.leaky_relu(x, LEAK)


def down_encoder(P: Params, prefix: str, x: Tensor) -> Tensor:
    h = lrelu(conv(P, f"{prefix}.conv1", x, stride=2))
    return conv(P, f"{prefix}.conv2", h, stride=2)


def up_decoder(P: Params, prefix: str, z: Tensor) -> Tensor:
    h = lrelu(conv(P, f"{prefix}.conv1", ops.upsample2x_nearest(z)))
    return conv(P, f"{prefix}.conv2", ops.upsample2x_nearest(h))


def flow_net(P: Params, x: Tensor, ref: Tensor) -> Tensor:
    h = ops.concat_channels([x, ref])
    for i in (1, 2, 3):
        h = lrelu(conv(P, f"flow_net.conv{i}", h))
    return ops.scalar_mul(conv(P, "flow_net.conv4", h), FLOW_OUT_GAIN)


def mv_encode(P: Params, flow: Tensor) -> Tensor:
    return down_encoder(P, "mv_encoder", ops.scalar_mul(flow, MV_IN_GAIN))


def mv_decode(P: Params, m_hat: Tensor) -> Tensor:
    return ops.scalar_mul(up_decoder(P, "mv_decoder", m_hat), 1.0 / MV_IN_GAIN)


def motion_compensate(P: Params, ref: Tensor, flow_hat: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (prediction, plain warp)."""
    warped = ops.bilinear_warp(ref, flow_hat)
    h = lrelu(conv(P, "motion_comp.conv1", ops.concat_channels([warped, ref, flow_hat])))
    refine = conv(P, "motion_comp.conv2", h)
    return ops.clamp01(ops.add(warped, refine)), warped


def residual_encode(P: Params, r: Tensor) -> Tensor:
    return down_encoder(P, "residual_encoder", ops.scalar_mul(r, RES_IN_GAIN))


def residual_decode(P: Params, y_hat: Tensor) -> Tensor:
    return ops.scalar_mul(up_decoder(P, "residual_decoder", y_hat), RES_OUT_GAIN)


def intra_encode(P: Params, x: Tensor) -> Tensor:
    return down_encoder(P, "intra_encoder", ops.scalar_mul(ops.sub(x, 0.5), INTRA_IN_GAIN))


def intra_decode(P: Params, z_hat: Tensor) -> Tensor:
    out = ops.scalar_mul(up_decoder(P, "intra_decoder", z_hat), INTRA_OUT_GAIN)
    return ops.clamp01(ops.add(out, 0.5))


def quantize(
    latent: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
    l_max: int = L_MAX,
    counter: ClampCounter | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Additive U(-0.5, 0.5) noise in train mode; round-half-away + clamp in infer mode."""
    if mode == TRAIN:
        if noise is None:
            if rng is None:
                raise ValueError("train-mode quantization needs an rng or explicit noise")
            noise = rng.uniform(-0.5, 0.5, size=latent.shape)
        return ops.add(latent, constant(noise))
    if mode != INFER:
        raise ValueError(f"unknown quantization mode {mode!r}")
    q = ops.round_half_away(latent.data)
    clipped = np.clip(q, -l_max, l_max)
    if counter is not None:
        counter.count += int(np.count_nonzero(clipped != q))
    return constant(clipped)


def rate(P: Params, kind: str, latent: Tensor) -> Tensor:
    return entropy.rate_bits(latent, P[f"entropy.{kind}.mu"], P[f"entropy.{kind}.raw_scale"])


def mse(a: Tensor, b: Tensor) -> Tensor:
    return ops.reduce_mean(ops.square(ops.sub(a, b)))


def rd_loss(x: Tensor, x_hat: Tensor, bits_m, bits_y, lam: float, pixel_count: int) -> Tensor:
    """lam * MSE + (bits_m + bits_y) / pixel_count, i.e. rate in bits per pixel."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    bits = ops.add(bits_m, bits_y)
    return ops.add(ops.scalar_mul(mse(x, x_hat), lam), ops.scalar_mul(bits, 1.0 / pixel_count))


def psnr_value(a: np.ndarray, b: np.ndarray) -> float:
    err = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return 100.0 if err == 0.0 else min(100.0, 10.0 * np.log10(1.0 / err))


# frame coding ------------------------------------------------------------------


@dataclass
class PFrameResult:
    motion: Tensor
    residual: Tensor
    recon: Tensor
    loss: Tensor
    bits_m: Tensor
    bits_y: Tensor
    flow: Tensor
    prediction: Tensor
    stats: dict = field(default_factory=dict)


@dataclass
class IFrameResult:
    latent: Tensor
    recon: Tensor
    loss: Tensor
    bits: Tensor
    stats: dict = field(default_factory=dict)


def _check_frames(x: Tensor, ref: Tensor | None = None) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"frames must be [N, C, H, W], got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ValueError(f"frame dims must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
    if ref is not None and ref.shape != x.shape:
        raise ValueError(f"frame/reference dimension mismatch: {x.shape} vs {ref.shape}")


def decode_p(P: Params, m_hat: Tensor, y_hat: Tensor, ref: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Decoder side of a P-frame: (recon, prediction, decoded flow)."""
    flow_hat = mv_decode(P, m_hat)
    pred, _ = motion_compensate(P, ref, flow_hat)
    recon = ops.clamp01(ops.add(pred, residual_decode(P, y_hat)))
    return recon, pred, flow_hat


def code_p(
    P: Params,
    x: Tensor,
    ref: Tensor,
    lam: float,
    mode: str,
    rng: np.random.Generator | None = None,
    l_max: int = L_MAX,
    counter: ClampCounter | None = None,
    noise: dict | None = None,
) -> PFrameResult:
    """Encode and reconstruct P-frames through graph ``P``.

    A batch of N frames gives the mean of the per-frame losses.
    """
    _check_frames(x, ref)
    noise = noise or {}
    flow = flow_net(P, x, ref)
    m = mv_encode(P, flow)
    if mode == TRAIN:
        m_hat = quantize(m, mode, rng, l_max, noise=noise.get("motion"))
    else:
        m_hat = quantize(m, mode, l_max=l_max, counter=counter)
    flow_hat = mv_decode(P, m_hat)
    pred, warped = motion_compensate(P, ref, flow_hat)
    r = ops.sub(x, pred)
    y = residual_encode(P, r)
    if mode == TRAIN:
        y_hat = quantize(y, mode, rng, l_max, noise=noise.get("residual"))
    else:
        y_hat = quantize(y, mode, l_max=l_max, counter=counter)
    recon = ops.clamp01(ops.add(pred, residual_decode(P, y_hat)))
    bits_m = rate(P, "motion", m_hat)
    bits_y = rate(P, "residual", y_hat)
    pixels = x.shape[0] * x.shape[2] * x.shape[3]
    loss = rd_loss(x, recon, bits_m, bits_y, lam, pixels)
    stats = {
        "bpp_motion": float(bits_m.data) / pixels,
        "bpp_residual": float(bits_y.data) / pixels,
        "prediction_psnr": psnr_value(x.data, pred.data),
        "warp_psnr": psnr_value(x.data, warped.data),
        "final_psnr": psnr_value(x.data, recon.data),
        "mse": float(np.mean((x.data - recon.data) ** 2)),
        "loss": float(loss.data),
    }
    if counter is not None:
        stats["clamped"] = counter.count
    return PFrameResult(m_hat, y_hat, recon, loss, bits_m, bits_y, flow, pred, stats)


def code_i(
    P: Params,
    x: Tensor,
    lam_intra: float,
    mode: str,
    rng: np.random.Generator | None = None,
    l_max: int = L_MAX,
    counter: ClampCounter | None = None,
    noise: np.ndarray | None = None,
) -> IFrameResult:
    _check_frames(x)
    z = intra_encode(P, x)
    if mode == TRAIN:
        z_hat = quantize(z, mode, rng, l_max, noise=noise)
    else:
        z_hat = quantize(z, mode, l_max=l_max, counter=counter)
    recon = intra_decode(P, z_hat)
    bits = rate(P, "intra", z_hat)
    pixels = x.shape[0] * x.shape[2] * x.shape[3]
    loss = ops.add(ops.scalar_mul(mse(x, recon), lam_intra), ops.scalar_mul(bits, 1.0 / pixels))
    stats = {
        "bpp": float(bits.data) / pixels,
        "final_psnr": psnr_value(x.data, recon.data),
        "mse": float(np.mean((x.data - recon.data) ** 2)),
        "loss": float(loss.data),
    }
    return IFrameResult(z_hat, recon, loss, bits, stats)


def as_frame_tensor(frame: np.ndarray) -> Tensor:
    """[C, H, W] or [1, C, H, W] array in [0, 1] -> constant [1, C, H, W] tensor."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"frame must be [C,H,W] or [1,C,H,W], got shape {arr.shape}")
    return constant(arr)


# public operation surface ---------------------------------------------------------


def encode_frame_p(x, ref, model: CodecModel, mode: str = INFER, rng=None, counter=None) -> PFrameResult:
    P = model.leaves()
    return code_p(P, as_frame_tensor(x), as_frame_tensor(ref), model.lam, mode, rng, model.l_max, counter)


def decode_frame_p(motion: np.ndarray, residual: np.ndarray, ref, model: CodecModel) -> np.ndarray:
    """Reconstruct a P-frame from integer latents, the reference and decoder-side params only."""
    P = _decoder_leaves(model)
    recon, _, _ = decode_p(P, constant(motion), constant(residual), as_frame_tensor(ref))
    return recon.data


def encode_frame_i(x, model: CodecModel, mode: str = INFER, rng=None, counter=None) -> IFrameResult:
    P = model.leaves()
    return code_i(P, as_frame_tensor(x), model.lam_intra, mode, rng, model.l_max, counter)


def decode_frame_i(latent: np.ndarray, model: CodecModel) -> np.ndarray:
    P = _decoder_leaves(model)
    return intra_decode(P, constant(latent)).data


def estimate_flow(x, ref, model: CodecModel) -> np.ndarray:
    P = model.leaves()
    x, ref = as_frame_tensor(x), as_frame_tensor(ref)
    _check_frames(x, ref)
    return flow_net(P, x, ref).data


def _decoder_leaves(model: CodecModel) -> dict[str, Tensor]:
    names = model.decoder_names()
    return {n: constant(model.params[n]) for n in names}
