import math

import numpy as np
import pytest

from epacodec.autodiff import constant
from epacodec.codec import model as M
from epacodec.oeu import (
    LFU,
    LLU,
    OEU,
    OFF,
    VARIANTS,
    OnlineConfig,
    continuous_latents,
    online_update,
    update_set,
    variant_comparison,
)
from helpers import digest, scrambled_model, small_clip


@pytest.fixture(scope="module")
def setup():
    model = scrambled_model(21)
    frames = small_clip(5, frames=3)
    return model, frames[1], frames[0]


def test_off_matches_plain_encoder(setup):
    model, x, ref = setup
    res = online_update(x, ref, model, OnlineConfig(variant=OFF))
    base = M.encode_frame_p(x, ref, model)
    assert np.array_equal(res.motion, base.motion.data)
    assert np.array_equal(res.residual, base.residual.data)
    assert digest(res.recon) == digest(base.recon.data)
    assert res.iterations == 0 and res.losses == [float(base.loss.data)]


@pytest.mark.parametrize("variant", [LFU, LLU, OEU])
def test_zero_learning_rate_changes_nothing(setup, variant):
    model, x, ref = setup
    res = online_update(x, ref, model, OnlineConfig(variant=variant, lr=0.0))
    base = M.encode_frame_p(x, ref, model)
    assert res.iterations == 1 and len(res.losses) == 2
    assert res.losses[1] == res.losses[0]
    assert np.array_equal(res.motion, base.motion.data) and np.array_equal(res.residual, base.residual.data)


@pytest.mark.parametrize("variant", [LFU, LLU, OEU])
def test_infinite_threshold_stops_after_one_iteration(setup, variant):
    model, x, ref = setup
    res = online_update(x, ref, model, OnlineConfig(variant=variant, lr=1e-2, rel_eps=math.inf))
    assert res.iterations == 1 and len(res.losses) == 2


@pytest.mark.parametrize("variant", [LFU, LLU, OEU])
def test_keep_best_and_trajectory_length(setup, variant):
    model, x, ref = setup
    # a large step size overshoots, so later candidates can be worse than earlier ones
    res = online_update(x, ref, model, OnlineConfig(variant=variant, lr=0.05, rel_eps=0.0, max_iters=6))
    assert len(res.losses) == res.iterations + 1 <= 7
    assert res.best_loss == min(res.losses) <= res.loss0
    assert res.improvement >= 0
    assert float(M.encode_frame_p(x, ref, model).loss.data) == res.loss0


def test_improvement_on_random_model(setup):
    model, x, ref = setup
    res = online_update(x, ref, model, OnlineConfig(variant=OEU, lr=1e-2))
    assert res.best_loss < res.loss0


def test_update_sets():
    model = scrambled_model(0)
    assert len(update_set(model, LLU)) == 4
    assert {n.rsplit(".", 2)[0] for n in update_set(model, LLU)} == {"mv_encoder", "residual_encoder"}
    oeu = update_set(model, OEU)
    assert all(model.params.side(n).name == "ENCODER" for n in oeu)
    assert set(oeu) == {n for n in model.params.names() if n.startswith(("flow_net", "mv_encoder", "residual_encoder"))}
    assert not set(oeu) & set(model.decoder_names())


@pytest.mark.parametrize("variant,count", [(LFU, 2), (LLU, 4), (OEU, 16)])
def test_touched_parameter_count(setup, variant, count):
    model, x, ref = setup
    res = online_update(x, ref, model, OnlineConfig(variant=variant, lr=1e-3, max_iters=2))
    assert len(res.touched) == count


def test_isolation_and_repeatability(setup):
    model, x, ref = setup
    before = {n: model.params[n].copy() for n in model.params.names()}
    h = model.decoder_hash()
    a = online_update(x, ref, model, OnlineConfig(variant=OEU, lr=1e-2))
    b = online_update(x, ref, model, OnlineConfig(variant=OEU, lr=1e-2))
    assert all(np.array_equal(before[n], model.params[n]) for n in before)
    assert model.decoder_hash() == h
    assert np.array_equal(a.motion, b.motion) and np.array_equal(a.residual, b.residual) and a.losses == b.losses


def test_variants_decode_with_original_decoder(setup):
    model, x, ref = setup
    for variant in VARIANTS:
        res = online_update(x, ref, model, OnlineConfig(variant=variant, lr=1e-2, max_iters=3))
        dec = M.decode_frame_p(res.motion, res.residual, ref, model)
        assert digest(dec) == digest(res.recon), variant


def test_continuous_latents_round_to_baseline(setup):
    model, x, ref = setup
    P = {n: constant(model.params[n]) for n in model.params.names()}
    m, y = continuous_latents(P, constant(x[None]), constant(ref[None]))
    base = M.encode_frame_p(x, ref, model)
    assert np.array_equal(np.clip(M.ops.round_half_away(m), -64, 64), base.motion.data)
    assert np.array_equal(np.clip(M.ops.round_half_away(y), -64, 64), base.residual.data)


def test_non_finite_reverts_and_flags(setup):
    model, x, ref = setup
    with np.errstate(all="ignore"):
        res = online_update(x, ref, model, OnlineConfig(variant=OEU, lr=1e300, rel_eps=0.0, max_iters=4))
    base = M.encode_frame_p(x, ref, model)
    assert res.flagged and res.best_index == 0
    assert np.array_equal(res.motion, base.motion.data) and np.array_equal(res.residual, base.residual.data)
    assert all(math.isfinite(v) for v in res.losses)


def test_variant_comparison_table(setup):
    model, x, ref = setup
    rows = variant_comparison([(x, ref)], model, [OnlineConfig(variant=v, lr=1e-2, max_iters=3) for v in VARIANTS])
    assert [r.variant for r in rows] == list(VARIANTS)
    off = rows[0]
    assert off.mean_iterations == 0 and off.mean_improvement == 0
    assert all(r.mean_loss <= off.mean_loss for r in rows)


def test_config_validation():
    with pytest.raises(ValueError):
        OnlineConfig(variant="XYZ")
    with pytest.raises(ValueError):
        OnlineConfig(max_iters=0)
    with pytest.raises(ValueError):
        OnlineConfig(lr=-1)
