import json

import numpy as np
import pytest

from epacodec.autodiff import constant, ops
from epacodec.data import (
    TEXTURES,
    DataError,
    RawVideoHeader,
    SynthSpec,
    load_manifest_clips,
    load_raw,
    save_raw,
    split_ids,
    synth_clip,
    synth_dataset,
)
from epacodec.metrics import psnr


def test_same_seed_bit_identical():
    spec = SynthSpec(width=32, height=32, frames=5, seed=4)
    a, b = synth_clip(spec, 7), synth_clip(spec, 7)
    assert a.frames.tobytes() == b.frames.tobytes() and a.motion == b.motion
    assert synth_clip(SynthSpec(width=32, height=32, frames=5, seed=5), 7).frames.tobytes() != a.frames.tobytes()


def test_zero_motion_gives_identical_frames():
    spec = SynthSpec(width=32, height=32, frames=6, fixed_motion=(0, 0))
    frames = synth_clip(spec, 1).frames
    assert all(np.array_equal(frames[0], f) for f in frames[1:])


def test_motion_drawn_in_range_and_frames_quantized():
    spec = SynthSpec(width=32, height=32, frames=3)
    for cid in range(12):
        clip = synth_clip(spec, cid)
        assert all(-3 <= v <= 3 for v in clip.motion)
        assert np.array_equal(np.round(clip.frames * 255) / 255, clip.frames)
        assert clip.texture == TEXTURES[cid % 3]


@pytest.mark.parametrize("texture", TEXTURES)
def test_ground_truth_motion_reproduces_next_frame(texture):
    spec = SynthSpec(width=64, height=64, frames=4, texture=texture)
    for cid in range(3):
        clip = synth_clip(spec, cid)
        dx, dy = clip.motion
        flow = np.zeros((1, 2, 64, 64))
        flow[:, 0], flow[:, 1] = dx, dy
        for t in range(3):
            warped = ops.bilinear_warp(constant(clip.frames[t][None]), constant(flow)).data[0]
            m = 4  # samples that moved in from outside the frame are unknowable
            assert psnr(warped[:, m:-m, m:-m], clip.frames[t + 1][:, m:-m, m:-m]) >= 40.0


def test_split_is_fixed_and_disjoint():
    train, test = split_ids(200, 20)
    assert len(train) == 200 and len(test) == 20 and not set(train) & set(test)
    assert split_ids(200, 20) == (train, test)


def test_raw_size_check(tmp_path):
    hdr = RawVideoHeader(8, 8, 1, 2)
    good = tmp_path / "good.raw"
    good.write_bytes(bytes(range(128)))
    assert load_raw(good, hdr).shape == (2, 1, 8, 8)
    bad = tmp_path / "bad.raw"
    bad.write_bytes(bytes(127))
    with pytest.raises(DataError, match="expected 128 bytes, got 127"):
        load_raw(bad, hdr)


def test_raw_value_mapping_and_byte_round_trip(tmp_path):
    src = tmp_path / "a.raw"
    payload = np.random.default_rng(0).integers(0, 256, 2 * 3 * 8 * 16, dtype=np.uint8)
    payload[:2] = (0, 255)
    src.write_bytes(payload.tobytes())
    hdr = RawVideoHeader(16, 8, 3, 2)
    frames = load_raw(src, hdr)
    assert frames.flat[0] == 0.0 and frames.flat[1] == 1.0
    save_raw(tmp_path / "b.raw", frames)
    assert (tmp_path / "b.raw").read_bytes() == src.read_bytes()
    assert RawVideoHeader.from_json(json.loads((tmp_path / "b.raw.json").read_text())) == hdr


def test_float_raw_is_exact(tmp_path):
    frames = np.random.default_rng(1).uniform(size=(2, 1, 8, 8))
    save_raw(tmp_path / "f.raw", frames, sample_format="f64le-planar")
    assert np.array_equal(load_raw(tmp_path / "f.raw"), frames)


def test_sidecar_errors(tmp_path):
    (tmp_path / "x.raw").write_bytes(bytes(64))
    with pytest.raises(DataError, match="sidecar"):
        load_raw(tmp_path / "x.raw")
    (tmp_path / "x.raw.json").write_text('{"width": 8}')
    with pytest.raises(DataError, match="malformed"):
        load_raw(tmp_path / "x.raw")


def test_geometry_validation():
    with pytest.raises(DataError):
        SynthSpec(width=30)
    with pytest.raises(DataError):
        SynthSpec(texture="plaid")


def test_dataset_manifest_matches_generator(tmp_path):
    spec = SynthSpec(width=32, height=32, frames=3, test_frames=4)
    manifest = synth_dataset(spec, 4, 2, tmp_path)
    by_id = {e["clip_id"]: e for e in manifest["clips"]}
    for clip in load_manifest_clips(tmp_path / "manifest.json"):
        fresh = synth_clip(spec, clip.clip_id, by_id[clip.clip_id]["frames"])
        assert tuple(by_id[clip.clip_id]["motion"]) == fresh.motion
        assert np.array_equal(clip.frames, fresh.frames)
    assert sum(e["split"] == "test" for e in manifest["clips"]) == 2
