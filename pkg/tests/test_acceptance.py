"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line; the lines are also printed together
in the terminal summary. Trained models come from the lab cache (see lab.py).
"""

import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest

import lab
from conftest import VERDICTS
from epacodec.autodiff import finite_diff_check, ops
from epacodec.bitstream import decode_sequence
from epacodec.bitstream.container import entropy_tables
from epacodec.bitstream.rangecoder import range_decode, range_encode
from epacodec.codec.entropy import L_MAX, P_MIN, bin_probabilities, scales_from_raw
from epacodec.codec.model import TRAIN, CodecModel, as_frame_tensor, code_i, code_p
from epacodec.harness.experiments import ExperimentPlan, run_cell, run_plan
from epacodec.harness.sequence import encode_sequence
from epacodec.metrics import RDCurve, bd_rate, ms_ssim, psnr
from epacodec.oeu import LFU, LLU, OEU, OFF, OnlineConfig
from epacodec.training import LAMBDAS, TrainConfig, train_epa, train_single_frame
from helpers import digest, scrambled_model
from test_metrics import dense_bd, reference_ms_ssim

pytestmark = [pytest.mark.slow, pytest.mark.filterwarnings("ignore:RD curve .* quality decreases")]

# held-out evaluation sets
TRACE_GOP, TRACE_FRAMES = 20, 20  # decay traces and T-sweep: all 20 held-out clips
OEU_CLIPS, OEU_FRAMES = 5, 11  # 5 clips x 10 P-frames = 50 online-updated frames
SWEEP_GOPS, SWEEP_FRAMES = (10, 50), 50


def verdict(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def clips():
    return lab.heldout()


model = lab.model


def cell(clips, kind, lam, gop, n_frames, n_clips, variant=OFF, unroll=5):
    # ``clips`` is the shared held-out list the lab memo encodes
    return lab.cell(kind, lam, gop, n_frames, n_clips, variant, unroll)


def frame_means(c, n_frames):
    return np.array([np.mean([s.frames[t].psnr for s in c.sequences]) for t in range(n_frames)])


def rd_curve(cells):
    return RDCurve.from_arrays([c.bpp for c in cells], [c.psnr for c in cells])


def bdbr(clips, gop, n_frames):
    base = [cell(clips, "baseline", lam, gop, n_frames, len(clips)) for lam in LAMBDAS]
    epa = [cell(clips, "epa", lam, gop, n_frames, len(clips)) for lam in LAMBDAS]
    return bd_rate(rd_curve(base), rd_curve(epa))


def blob_digest(c):
    return hashlib.sha256(b"".join(s.blob for s in c.sequences)).hexdigest()


def stats_digest(c):
    rows = [(f.index, f.frame_type, f.psnr, f.bits_estimate, f.loss, f.iterations, f.loss0)
            for s in c.sequences for f in s.frames]
    return hashlib.sha256(repr(rows).encode()).hexdigest()


# 1 ------------------------------------------------------------------------------------------


def test_c01_gradient_correctness(clips):
    m = scrambled_model(77)
    names = [n for n in m.params.names() if not n.startswith("meta.")]
    x0, x1 = clips[0].frames[0], clips[0].frames[1]

    def loss_fn(params):
        # the noise source restarts every call, so each evaluation sees the same noise
        P = params.leaves(names)
        rng = np.random.default_rng(11)
        i = code_i(P, as_frame_tensor(x0), m.lam_intra, TRAIN, rng)
        p = code_p(P, as_frame_tensor(x1), i.recon, m.lam, TRAIN, rng)
        return ops.add(i.loss, p.loss)

    t0 = time.perf_counter()
    # a bias shift moves thousands of pre-activations at once, so a 1e-5 step crosses leaky-relu and
    # clamp kinks the one-sided kink test cannot see; the error then scales with h, hence the small step
    chk = finite_diff_check(loss_fn, m.params, n_probes=64, names=names, seed=3, h=1e-7)
    elapsed = time.perf_counter() - t0
    covered = {p[0].split(".")[0] for p in chk.probes}
    networks = {n.split(".")[0] for n in names}
    ok = chk.max_rel_error < 1e-4 and elapsed < 120 and covered == networks
    verdict(1, ok, f"max rel err {chk.max_rel_error:.2e} over {len(chk.probes)} probes "
                   f"({len(covered)}/{len(networks)} networks, h=1e-7), {elapsed:.1f} s")


# 2 ------------------------------------------------------------------------------------------


def test_c02_entropy_coder_fidelity():
    m = model("baseline")
    rng = np.random.default_rng(2)
    values = np.arange(-L_MAX, L_MAX + 1)
    cums, cont, coding = [], [], []
    for kind, table in entropy_tables(m).items():
        mu = m.params[f"entropy.{kind}.mu"]
        scale = scales_from_raw(m.params[f"entropy.{kind}.raw_scale"])
        cums += table.cum_lists()
        coding.append(table.probabilities())
        cont.append(bin_probabilities(values[None, :], mu[:, None], scale[:, None]))
    cont, coding = np.concatenate(cont), np.concatenate(coding)
    n = 100_000
    tids = rng.integers(0, len(cums), n)
    cdf = np.cumsum(cont / cont.sum(axis=1, keepdims=True), axis=1)
    symbols = np.empty(n, dtype=np.int64)
    u = rng.random(n)
    for k in range(len(cums)):
        sel = tids == k
        symbols[sel] = np.minimum(np.searchsorted(cdf[k], u[sel], side="right"), len(values) - 1)
    # the bound is stated against the floored, renormalized 16-bit coding distribution;
    # the continuous model's own estimate is reported alongside for reference
    ideal = float(-np.log2(coding[tids, symbols]).sum())
    model_est = float(-np.log2(np.maximum(cont[tids, symbols], P_MIN)).sum())
    t0 = time.perf_counter()
    blob = range_encode(symbols.tolist(), cums, tids.tolist())
    back = range_decode(blob, cums, tids.tolist())
    elapsed = time.perf_counter() - t0
    exact = back == symbols.tolist()
    bits = 8 * len(blob)
    ok = exact and bits <= 1.01 * ideal + 256 and elapsed < 30
    verdict(2, ok, f"round trip {'exact' if exact else 'BROKEN'}, {bits} bits vs coding-distribution sum {ideal:.0f} "
                   f"(+{bits - ideal:.0f} bits; continuous-model estimate {model_est:.0f}), {elapsed:.1f} s")


# 3 ------------------------------------------------------------------------------------------

C3_GOP = 8
C3_VARIANTS = (OFF, LFU, LLU, OEU, OEU)


def encode_c3(clips, k):
    return encode_sequence(model("epa"), clips[k].frames, C3_GOP, OnlineConfig(variant=C3_VARIANTS[k]), 20)


_c3: dict = {}


def test_c03_decoder_sufficiency(clips):
    m = model("epa")
    before = {n: m.params[n].copy() for n in m.params.names()}
    h0 = m.decoder_hash()
    t0 = time.perf_counter()
    frames = mismatches = 0
    types = set()
    for k in range(len(C3_VARIANTS)):
        seq = encode_c3(clips, k)
        _c3[k] = hashlib.sha256(seq.blob).hexdigest()
        dec = decode_sequence(seq.blob, m)
        for t, f in enumerate(seq.frames):
            frames += 1
            types.add(f.frame_type)
            mismatches += digest(dec[t]) != digest(seq.recon[t])
    elapsed = time.perf_counter() - t0
    unchanged = m.decoder_hash() == h0 and all(np.array_equal(before[n], m.params[n]) for n in before)
    ok = frames == 100 and mismatches == 0 and unchanged and types == {"I", "P"} and elapsed < 300
    verdict(3, ok, f"{frames} frames ({'+'.join(sorted(types))}, variants {','.join(sorted(set(C3_VARIANTS)))}), "
                   f"{mismatches} hash mismatches, decoder hash {'unchanged' if unchanged else 'CHANGED'}, "
                   f"{elapsed:.0f} s")


# 4 ------------------------------------------------------------------------------------------


def test_c04_training_convergence():
    hist = lab.stage1_history(512)
    losses = np.asarray(hist["losses"])
    w = TrainConfig().smoothing
    smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
    ratio = smooth[-1] / smooth[0]
    minutes = hist["cpu_seconds"] / 60
    ok = ratio < 0.5 and minutes < 45
    verdict(4, ok, f"smoothed loss {smooth[0]:.4f} -> {smooth[-1]:.4f} (ratio {ratio:.3f}) in {len(losses)} steps, "
                   f"{minutes:.1f} CPU-min")


# 5 ------------------------------------------------------------------------------------------


def test_c05_error_propagation(clips):
    n = len(clips)
    base = cell(clips, "baseline", 512, TRACE_GOP, TRACE_FRAMES, n)
    epa = cell(clips, "epa", 512, TRACE_GOP, TRACE_FRAMES, n)
    tb, te = frame_means(base, TRACE_FRAMES), frame_means(epa, TRACE_FRAMES)
    decay = tb[0] - tb[-1]
    gain = te[-1] - tb[-1]
    matched = epa.bpp <= base.bpp
    bd = bdbr(clips, TRACE_GOP, TRACE_FRAMES)
    ok = decay >= 0.2 and ((gain >= 0.1 and matched) or bd < 0)
    verdict(5, ok, f"stage-1 decay frame 1->20 {decay:+.3f} dB (need >= 0.2); EPA frame-20 gain {gain:+.3f} dB at "
                   f"{epa.bpp:.4f} vs {base.bpp:.4f} bpp; BDBR(EPA vs baseline) {bd:+.2f}%")


# 6 ------------------------------------------------------------------------------------------


def test_c06_online_updating(clips):
    c = cell(clips, "epa", 512, TRACE_GOP, OEU_FRAMES, OEU_CLIPS, OEU)
    p = [f for s in c.sequences for f in s.frames if f.frame_type == "P"]
    bounded = sum(f.loss <= f.loss0 for f in p)
    gain = float(np.mean([f.loss0 - f.loss for f in p]))
    rel = gain / float(np.mean([f.loss0 for f in p]))
    iters = float(np.mean([f.iterations for f in p]))
    ok = len(p) == 50 and bounded == len(p) and gain > 0 and iters <= 10
    verdict(6, ok, f"L_best <= L_0 on {bounded}/{len(p)} frames, mean improvement {gain:.3e} ({100 * rel:.2f}%), "
                   f"mean iterations {iters:.2f}")


# 7 ------------------------------------------------------------------------------------------


def test_c07_ablation_ordering(clips):
    loss = {}
    for label, kind, variant in (("baseline", "baseline", OFF), ("EPA", "epa", OFF), ("EPA+LLU", "epa", LLU),
                                 ("full", "epa", OEU)):
        loss[label] = cell(clips, kind, 512, TRACE_GOP, OEU_FRAMES, OEU_CLIPS, variant).mean_p_loss
    tol = 0.01 * loss["baseline"]
    chain_a = loss["full"] <= loss["EPA"] + tol and loss["EPA"] <= loss["baseline"] + tol
    chain_b = loss["full"] <= loss["EPA+LLU"] + tol and loss["EPA+LLU"] <= loss["EPA"] + tol
    verdict(7, chain_a and chain_b, "mean P loss " + ", ".join(f"{k} {v:.5f}" for k, v in loss.items())
            + f" (tol {tol:.5f})")


# 8 ------------------------------------------------------------------------------------------


def test_c08_unroll_sweep(clips):
    n = len(clips)
    l5 = cell(clips, "epa", 512, TRACE_GOP, TRACE_FRAMES, n, unroll=5).mean_p_loss
    l2 = cell(clips, "epa", 512, TRACE_GOP, TRACE_FRAMES, n, unroll=2).mean_p_loss
    l3 = cell(clips, "epa", 512, TRACE_GOP, TRACE_FRAMES, n, unroll=3).mean_p_loss
    ok = l5 <= l2 * 1.02
    verdict(8, ok, f"held-out rollout loss T=2 {l2:.5f}, T=3 {l3:.5f}, T=5 {l5:.5f} "
                   f"({100 * (l5 / l2 - 1):+.2f}% vs T=2, tol 2%)")


# 9 ------------------------------------------------------------------------------------------


def test_c09_gop_sweep(clips):
    bd = {g: bdbr(clips, g, SWEEP_FRAMES) for g in SWEEP_GOPS}
    ok = abs(bd[50]) >= abs(bd[10]) - 1.0
    verdict(9, ok, f"BDBR(EPA vs baseline) GoP 10 {bd[10]:+.2f}%, GoP 50 {bd[50]:+.2f}% "
                   f"(|50| >= |10| - 1)")


# 10 -----------------------------------------------------------------------------------------


def test_c10_metric_oracles():
    worst_bd = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        ra, rt = np.sort(rng.uniform(0.05, 1.0, 4)), np.sort(rng.uniform(0.05, 1.0, 4))
        qa, qt = np.sort(rng.uniform(30, 38, 4)), np.sort(rng.uniform(31, 39, 4))
        oracle = (10 ** dense_bd(qa, np.log10(ra), qt, np.log10(rt)) - 1) * 100
        worst_bd = max(worst_bd, abs(bd_rate(RDCurve.from_arrays(ra, qa), RDCurve.from_arrays(rt, qt)) - oracle))
    rng = np.random.default_rng(10)
    a = rng.uniform(0.2, 0.8, (64, 64))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    ssim_err = abs(ms_ssim(a[None], b[None]) - reference_ms_ssim(a, b))
    flat = np.full((1, 8, 8), 0.5)
    psnr_ok = (psnr(flat, flat) == 100.0 and psnr(np.zeros((1, 8, 8)), np.ones((1, 8, 8))) == 0.0
               and abs(psnr(flat, flat + 0.1) - 20.0) <= 1e-12)
    ok = worst_bd <= 0.1 and ssim_err <= 1e-6 and psnr_ok
    verdict(10, ok, f"BD-rate worst deviation {worst_bd:.2e} pp, MS-SSIM deviation {ssim_err:.1e}, "
                    f"PSNR analytic cases {'exact' if psnr_ok else 'WRONG'}")


# 11 -----------------------------------------------------------------------------------------


def test_c11_determinism(clips, tmp_path):
    checks = {}
    # 3: one clip re-encoded with the full online update
    if 3 not in _c3:
        _c3[3] = hashlib.sha256(encode_c3(clips, 3).blob).hexdigest()
    checks["c3 bitstream"] = hashlib.sha256(encode_c3(clips, 3).blob).hexdigest() == _c3[3]

    # 4 and stage 2: the opening steps of both training stages replay the cached runs exactly.
    # Every cached stage-1 step before the reference switch used the original previous frame,
    # so a short run that never switches walks the same path.
    cfg = lab.config(512)
    _, h1 = train_single_frame(CodecModel.create(512), lab.train_clips(),
                               replace(cfg, stage1_steps=25, warmup_fraction=1.0))
    checks["c4 stage-1 steps"] = h1.losses.tolist() == lab.stage1_history(512)["losses"][:25]
    _, h2 = train_epa(model("baseline"), lab.train_clips(), replace(cfg, stage2_steps=3))
    checks["stage-2 steps"] = h2.losses.tolist() == lab.epa_history(512)["losses"][:3]

    # 5-9: one fresh cell per criterion against the memoised one
    fresh = [("c5", ("baseline", 512, TRACE_GOP, TRACE_FRAMES, len(clips), OFF, 5)),
             ("c6/7", ("epa", 512, TRACE_GOP, OEU_FRAMES, OEU_CLIPS, OEU, 5)),
             ("c8", ("epa", 512, TRACE_GOP, TRACE_FRAMES, len(clips), OFF, 2)),
             ("c9", ("epa", 2048, 50, SWEEP_FRAMES, len(clips), OFF, 5))]
    for name, (kind, lam, gop, nf, nc, variant, unroll) in fresh:
        first = cell(clips, kind, lam, gop, nf, nc, variant, unroll)
        again = run_cell(model(kind, lam, unroll), clips[:nc], gop, nf, OnlineConfig(variant=variant), kind,
                         with_ms_ssim=False)
        checks[f"{name} cell"] = (blob_digest(first) == blob_digest(again)
                                  and stats_digest(first) == stats_digest(again))

    # full reports: a small plan over the trained checkpoints, run twice
    paths = {"baseline": lab.model_paths("stage1"), "epa": lab.model_paths("epa")}
    plan = ExperimentPlan(models=paths, out_dir=str(tmp_path / "plan"), n_clips=1, n_frames=6, gops=(5,),
                          variants=(OFF, LLU), online_iters=3)
    outputs = []
    for _ in range(2):
        run_plan(plan)
        out = tmp_path / "plan"
        outputs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    checks["plan reports"] = outputs[0] == outputs[1] and len(outputs[0]) > 6

    ok = all(checks.values())
    verdict(11, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in checks.items()))
