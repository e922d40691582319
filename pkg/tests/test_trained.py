"""Properties that only hold once the codec has been trained (models from the lab cache)."""

import numpy as np
import pytest

import lab
from epacodec.autodiff import backward
from epacodec.codec.model import encode_frame_i, encode_frame_p, estimate_flow
from epacodec.data import SynthSpec, synth_clip
from epacodec.harness.experiments import fig2_trace, gop_sweep
from epacodec.metrics import psnr
from test_training import _rollout_loss

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def base():
    return lab.stage1(512)


@pytest.fixture(scope="module")
def translation():
    spec = SynthSpec(fixed_motion=(2, 0), seed=9)
    return [synth_clip(spec, 300 + k, 4, "test") for k in range(6)]


@pytest.mark.xfail(
    strict=False,
    reason="the 4-layer flow net does not learn displacement at this scale; the trained codec carries "
    "motion through the refine net instead (see the decisions ledger)",
)
def test_flow_recovers_global_translation(base, translation):
    means = []
    for clip in translation:
        for t in range(1, 4):
            flow = estimate_flow(clip.frames[t], clip.frames[t - 1], base)
            means.append(flow[0, 0, 8:-8, 8:-8].mean())
    assert abs(np.mean(means) - 2.0) <= 0.75


def test_compensation_beats_copy(base, translation):
    for clip in translation:
        x, ref = clip.frames[2], clip.frames[1]
        assert encode_frame_p(x, ref, base).stats["prediction_psnr"] > psnr(x, ref)


def test_residual_coding_improves_prediction(base):
    clip = lab.heldout()[0]
    for t in range(1, 6):
        stats = encode_frame_p(clip.frames[t], clip.frames[t - 1], base).stats
        assert stats["final_psnr"] > stats["prediction_psnr"]


def test_flat_frame_cheaper_than_noise(base):
    gray = np.full((1, 64, 64), 0.5)
    noise = np.random.default_rng(0).uniform(size=(1, 64, 64))
    assert float(encode_frame_i(gray, base).bits.data) < float(encode_frame_i(noise, base).bits.data)


def test_cross_step_gradient_terms_are_nonzero(base):
    seg = lab.heldout()[1].frames[:6]
    names = ["flow_net.conv1.weight", "residual_encoder.conv1.weight"]
    full = backward(_rollout_loss(base, seg, 5)(base.params), names)
    cut = backward(_rollout_loss(base, seg, 5, detach=True)(base.params), names)
    for n in names:
        assert np.linalg.norm(full[n] - cut[n]) > 1e-3 * np.linalg.norm(cut[n])


def test_epa_trace_above_baseline_at_gop_end(base):
    rows = fig2_trace(base, lab.epa(512), lab.heldout(), gop=50, n_frames=50)
    assert [r["frame_type"] for r in rows].count("I") == 1
    assert rows[-1]["psnr_epa"] >= rows[-1]["psnr_baseline"]


@pytest.mark.filterwarnings("ignore:RD curve .* quality decreases")
def test_intra_only_coding_is_unchanged_by_epa():
    # stage two freezes the intra codec, so all-intra bitstreams are the same size
    # (the all-intra curves need not be monotone, hence the warning filter)
    baseline = {lam: lab.stage1(lam) for lam in lab.LAMBDAS}
    epa = {lam: lab.epa(lam) for lam in lab.LAMBDAS}
    res = gop_sweep(baseline, epa, lab.heldout()[:3], gops=(1,), n_frames=3)
    assert res[1]["bd_rate_percent"] == pytest.approx(0.0, abs=1e-9)


def _frame_psnr(cell, t):
    return np.mean([s.frames[t].psnr for s in cell.sequences])


def test_epa_shrinks_the_decay_across_a_gop():
    drop = {}
    for kind in ("baseline", "epa"):
        c = lab.cell(kind, 512, 20, 20, 20)
        drop[kind] = _frame_psnr(c, 0) - _frame_psnr(c, 19)
    assert drop["epa"] < drop["baseline"]


def test_longer_unrolls_do_not_hurt():
    loss = [lab.cell("epa", 512, 20, 20, 20, unroll=T).mean_p_loss for T in (2, 3, 5)]
    tol = 0.02 * loss[0]
    assert loss[1] <= loss[0] + tol and loss[2] <= loss[1] + tol
