"""Small shared builders for the unit tests."""

import hashlib

import numpy as np

from epacodec.codec.model import CodecModel
from epacodec.data import SynthSpec, synth_clip


def digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def scrambled_model(seed=0, lam=512.0, channels=1) -> CodecModel:
    """Random model with the zero-initialized output layers filled in, so nothing is trivially the identity."""
    model = CodecModel.create(lam, channels=channels, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name in model.params:
        if name.endswith(".weight") or name.endswith(".bias"):
            arr = model.params[name]
            if not np.any(arr):
                model.params[name] = rng.normal(0, 0.05, arr.shape)
    return model


def small_clip(clip_id=0, size=32, frames=20, seed=0) -> np.ndarray:
    spec = SynthSpec(width=size, height=size, frames=frames, seed=seed)
    return synth_clip(spec, clip_id).frames
