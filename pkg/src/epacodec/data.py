"""Synthetic translating-texture clips and raw planar 8-bit video I/O.

Clips are rendered by sampling a smooth canvas (larger than the frame) at a
position that moves by a constant ``(dx, dy)`` per frame, so frame ``t+1`` is
frame ``t`` sampled at ``p + (dx, dy)``. Every rendered frame is quantized to
8 bits so in-memory clips and clip files agree exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import write_atomic

TEXTURES = ("smooth-blobs", "checker", "band-limited-noise")


class DataError(ValueError):
    pass


@dataclass
class SynthSpec:
    width: int = 64
    height: int = 64
    channels: int = 1
    frames: int = 21
    test_frames: int = 50
    texture: str = "mixed"  # one of TEXTURES, or "mixed" to cycle by clip id
    max_motion: float = 3.0
    fixed_motion: tuple[float, float] | None = None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width % 8 or self.height % 8:
            raise DataError(f"width/height must be multiples of 8, got {self.width}x{self.height}")
        if self.texture != "mixed" and self.texture not in TEXTURES:
            raise DataError(f"unknown texture {self.texture!r}")
        if self.fixed_motion is not None:
            self.fixed_motion = tuple(float(v) for v in self.fixed_motion)


@dataclass
class Clip:
    clip_id: int
    frames: np.ndarray  # [T, C, H, W] float64 in [0, 1]
    motion: tuple[float, float]
    texture: str
    split: str = "train"

    def __len__(self) -> int:
        return self.frames.shape[0]


def _clip_rng(seed: int, clip_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, clip_id]))


def _normalize(canvas: np.ndarray, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    cmin, cmax = canvas.min(), canvas.max()
    if cmax - cmin < 1e-12:
        return np.full_like(canvas, 0.5 * (lo + hi))
    return lo + (hi - lo) * (canvas - cmin) / (cmax - cmin)


def render_texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """A smooth [size, size] canvas in [0.1, 0.9]."""
    if kind == "smooth-blobs":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        canvas = np.zeros((size, size))
        for _ in range(max(8, size * size // 300)):
            cy, cx = rng.uniform(0, size, size=2)
            sigma = rng.uniform(3.0, 8.0)
            canvas += rng.uniform(-1.0, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    elif kind == "checker":
        period = rng.uniform(8.0, 16.0)
        angle = rng.uniform(0, math.pi)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        u = np.cos(angle) * xx + np.sin(angle) * yy
        v = -np.sin(angle) * xx + np.cos(angle) * yy
        canvas = ((np.floor(u / period) + np.floor(v / period)) % 2).astype(np.float64)
        canvas = ndimage.gaussian_filter(canvas, 2.5, mode="reflect")
    elif kind == "band-limited-noise":
        canvas = ndimage.gaussian_filter(rng.normal(size=(size, size)), 2.0, mode="wrap")
    else:
        raise DataError(f"unknown texture {kind!r}")
    return _normalize(canvas)


def _texture_for(spec: SynthSpec, clip_id: int) -> str:
    return TEXTURES[clip_id % len(TEXTURES)] if spec.texture == "mixed" else spec.texture


def synth_clip(spec: SynthSpec, clip_id: int, n_frames: int | None = None, split: str = "train") -> Clip:
    n_frames = spec.frames if n_frames is None else n_frames
    rng = _clip_rng(spec.seed, clip_id)
    kind = _texture_for(spec, clip_id)
    if spec.fixed_motion is not None:
        dx, dy = spec.fixed_motion
    else:
        dx, dy = (float(v) for v in rng.uniform(-spec.max_motion, spec.max_motion, size=2))
    travel = int(math.ceil(max(abs(dx), abs(dy)) * (n_frames - 1))) + 4
    size = max(spec.width, spec.height) + 2 * travel
    planes = [render_texture(kind, size, rng) for _ in range(spec.channels)]
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    frames = np.empty((n_frames, spec.channels, spec.height, spec.width))
    for t in range(n_frames):
        coords = np.stack([yy + travel + dy * t, xx + travel + dx * t])
        for c, plane in enumerate(planes):
            frames[t, c] = ndimage.map_coordinates(plane, coords, order=1, mode="nearest")
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    frames = quantize8(frames)
    return Clip(clip_id, frames, (dx, dy), kind, split)


def quantize8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0


def split_ids(n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    """Rank clip ids by SHA-256 of ``clip-<id>``; the lowest ``n_test`` are held out."""
    ids = list(range(n_train + n_test))
    ranked = sorted(ids, key=lambda i: hashlib.sha256(f"clip-{i}".encode()).hexdigest())
    test = sorted(ranked[:n_test])
    train = sorted(ranked[n_test:])
    return train, test


def synth_clips(spec: SynthSpec, n_train: int, n_test: int) -> tuple[list[Clip], list[Clip]]:
    train_ids, test_ids = split_ids(n_train, n_test)
    train = [synth_clip(spec, i, spec.frames, "train") for i in train_ids]
    test = [synth_clip(spec, i, spec.test_frames, "test") for i in test_ids]
    return train, test


def heldout_clips(spec: SynthSpec, n_train: int, n_test: int) -> list[Clip]:
    """Only the held-out split of :func:`synth_clips` (cheaper when training data is not needed)."""
    _, test_ids = split_ids(n_train, n_test)
    return [synth_clip(spec, i, spec.test_frames, "test") for i in test_ids]


# raw planar files ------------------------------------------------------------


# u8 is the interchange format; f64le carries decoder output without requantization
SAMPLE_FORMATS = {"u8-planar": np.dtype(np.uint8), "f64le-planar": np.dtype("<f8")}


@dataclass
class RawVideoHeader:
    width: int
    height: int
    channels: int
    frames: int
    sample_format: str = "u8-planar"

    @property
    def expected_bytes(self) -> int:
        return self.width * self.height * self.channels * self.frames * SAMPLE_FORMATS[self.sample_format].itemsize

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RawVideoHeader":
        try:
            hdr = cls(int(obj["width"]), int(obj["height"]), int(obj["channels"]), int(obj["frames"]),
                      obj.get("sample_format", "u8-planar"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed raw video sidecar: {exc}") from exc
        if hdr.sample_format not in SAMPLE_FORMATS:
            raise DataError(f"unsupported sample format {hdr.sample_format!r}")
        return hdr


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(os.fspath(path) + ".json")


def load_raw(path: str | os.PathLike, header: RawVideoHeader | None = None) -> np.ndarray:
    """Read a planar file into [T, C, H, W] floats in [0, 1]."""
    if header is None:
        sc = sidecar_path(path)
        if not sc.exists():
            raise DataError(f"no header given and no sidecar {sc}")
        header = RawVideoHeader.from_json(json.loads(sc.read_text()))
    blob = Path(path).read_bytes()
    if len(blob) != header.expected_bytes:
        raise DataError(
            f"raw size mismatch for {path}: expected {header.expected_bytes} bytes, got {len(blob)}"
        )
    dtype = SAMPLE_FORMATS[header.sample_format]
    arr = np.frombuffer(blob, dtype=dtype).reshape(header.frames, header.channels, header.height, header.width)
    if dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def to_u8(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_raw(path: str | os.PathLike, frames: np.ndarray, extra: dict | None = None,
             sample_format: str = "u8-planar") -> RawVideoHeader:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise DataError(f"frames must be [T, C, H, W], got {frames.shape}")
    if sample_format not in SAMPLE_FORMATS:
        raise DataError(f"unsupported sample format {sample_format!r}")
    t, c, h, w = frames.shape
    header = RawVideoHeader(w, h, c, t, sample_format)
    if sample_format == "u8-planar":
        payload = to_u8(frames).tobytes()
    else:
        payload = np.ascontiguousarray(frames, dtype="<f8").tobytes()
    write_atomic(path, payload)
    meta = header.to_json()
    if extra:
        meta.update(extra)
    write_atomic(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return header


def synth_dataset(spec: SynthSpec, n_train: int, n_test: int, out_dir: str | os.PathLike) -> dict:
    """Write every clip as raw + sidecar and a ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    train, test = synth_clips(spec, n_train, n_test)
    entries = []
    for clip in train + test:
        name = f"clip_{clip.clip_id:04d}.raw"
        save_raw(out / name, clip.frames, {"clip_id": clip.clip_id, "motion": list(clip.motion)})
        entries.append(
            {"clip_id": clip.clip_id, "file": name, "split": clip.split, "texture": clip.texture,
             "motion": list(clip.motion), "frames": len(clip)}
        )
    spec_json = asdict(spec)
    if spec_json["fixed_motion"] is not None:
        spec_json["fixed_motion"] = list(spec_json["fixed_motion"])
    manifest = {"version": 1, "spec": spec_json, "clips": entries}
    write_atomic(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_manifest_clips(manifest_path: str | os.PathLike, split: str | None = None) -> list[Clip]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    clips = []
    for e in manifest["clips"]:
        if split is not None and e["split"] != split:
            continue
        frames = load_raw(manifest_path.parent / e["file"])
        clips.append(Clip(e["clip_id"], frames, tuple(e["motion"]), e["texture"], e["split"]))
    return clips
