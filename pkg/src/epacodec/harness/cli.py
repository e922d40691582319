"""Command line entry point: ``epacodec {synth,train,encode,decode,eval,bdrate,ablate}``.

Failures print exactly one line to stderr, ``epacodec: error[<code>] <Kind>: <message>``,
and exit with 2 (usage), 3 (bad input data) or 4 (contract violation).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..autodiff import CheckpointError
from ..bitstream import BitstreamError, IncompatibleModelError, decode_sequence, scan_sequence
from ..codec.model import CodecModel
from ..data import DataError, SynthSpec, load_manifest_clips, load_raw, save_raw, synth_dataset
from ..metrics import MetricError, RDCurve, bd_psnr, bd_rate, ms_ssim, psnr
from ..oeu import VARIANTS, DecoderMutationError, OnlineConfig
from ..training import LAMBDAS, TrainConfig, TrainingError, train_epa, train_single_frame
from . import reports
from .experiments import ExperimentPlan, PlanError, run_plan
from .sequence import encode_sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONTRACT = 0, 2, 3, 4

log = logging.getLogger("epacodec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one line, exit 2
        raise UsageError(message)


def _fail(code: int, kind: str, message: str) -> int:
    text = " ".join(str(message).split())
    print(f"epacodec: error[{code}] {kind}: {text}", file=sys.stderr)
    return code


def _emit(obj) -> None:
    sys.stdout.write(reports.json_bytes(obj).decode())


def _lam_map(items: list[str] | None, flag: str) -> dict[int, str]:
    out = {}
    for item in items or []:
        lam, sep, path = item.partition("=")
        if not sep or not lam.strip().isdigit():
            raise UsageError(f"{flag} expects LAMBDA=CHECKPOINT, got {item!r}")
        out[int(lam)] = path
    return out


# subcommands -------------------------------------------------------------------------


def cmd_synth(a) -> int:
    spec = SynthSpec(width=a.width, height=a.height, frames=a.frames, test_frames=a.test_frames,
                     texture=a.texture, noise_sigma=a.noise, seed=a.seed)
    manifest = synth_dataset(spec, a.train, a.test, a.out)
    _emit({"manifest": str(Path(a.out) / "manifest.json"), "clips": len(manifest["clips"])})
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = TrainConfig.from_file(a.config) if a.config else TrainConfig(lam=a.lam)
    overrides = {"stage1_steps": a.steps1, "stage2_steps": a.steps2, "unroll": a.unroll, "lr": a.lr,
                 "stage2_lr": a.stage2_lr, "seed": a.seed}
    cfg = TrainConfig(**{**cfg.__dict__, **{k: v for k, v in overrides.items() if v is not None},
                         **({"lam": a.lam} if not a.config else {})})
    clips = load_manifest_clips(a.data, split="train")
    if not clips:
        raise DataError(f"{a.data} has no training clips")
    if a.stage in ("1", "both"):
        model = CodecModel.load(a.init) if a.init else CodecModel.create(cfg.lam, clips[0].frames.shape[1], cfg.seed)
        model, hist = train_single_frame(model, clips, cfg)
        if a.history:
            Path(a.history).write_text(hist.to_csv())
    else:
        if not a.init:
            raise UsageError("--stage 2 needs --init with a stage-1 checkpoint")
        model = CodecModel.load(a.init)
    if a.stage in ("2", "both"):
        model, hist2 = train_epa(model, clips, cfg)
        if a.history:
            path = a.history if a.stage == "2" else str(Path(a.history).with_suffix("")) + "_stage2.csv"
            Path(path).write_text(hist2.to_csv())
    model.save(a.out)
    _emit({"checkpoint": a.out, "lambda": model.lam, "decoder_hash": model.decoder_hash()})
    return EXIT_OK


def cmd_encode(a) -> int:
    model = CodecModel.load(a.model)
    frames = load_raw(a.clip)
    online = OnlineConfig(variant=a.variant, max_iters=a.online_iters, lr=a.online_lr, seed=a.seed)
    seq = encode_sequence(model, frames, a.gop, online, a.frames, path=a.out, with_ms_ssim=True)
    stats = seq.stats()
    stats.update({"bitstream": a.out, "checkpoint_sha256": reports.sha256_file(a.model),
                  "clip": a.clip, "bitstream_sha256": reports.sha256_bytes(seq.blob)})
    if a.stats:
        reports.write_json(a.stats, stats)
    _emit({k: stats[k] for k in ("bitstream", "bytes", "bpp", "psnr", "frames", "variant")})
    return EXIT_OK


def cmd_decode(a) -> int:
    model = CodecModel.load(a.model)
    blob = Path(a.bitstream).read_bytes()
    frames = decode_sequence(blob, model)
    save_raw(a.out, frames, {"decoded_from": a.bitstream}, sample_format=a.format)
    hdr = scan_sequence(blob).header
    _emit({"frames": hdr.frame_count, "out": a.out, "format": a.format})
    return EXIT_OK


def cmd_eval(a) -> int:
    orig = load_raw(a.original)
    dec = load_raw(a.decoded)
    n = dec.shape[0] if a.frames is None else a.frames
    if n > orig.shape[0] or n > dec.shape[0]:
        raise DataError(f"asked for {n} frames; original has {orig.shape[0]}, decoded has {dec.shape[0]}")
    if orig.shape[1:] != dec.shape[1:]:
        raise DataError(f"frame dimension mismatch: {orig.shape[1:]} vs {dec.shape[1:]}")
    per = [psnr(orig[t], dec[t]) for t in range(n)]
    out = {"frames": n, "psnr": float(np.mean(per)), "psnr_per_frame": per,
           "ms_ssim": float(np.mean([ms_ssim(orig[t], dec[t]) for t in range(n)]))}
    if a.json:
        reports.write_json(a.json, out)
    _emit(out)
    return EXIT_OK


def cmd_bdrate(a) -> int:
    anchor, test = RDCurve.from_csv(a.anchor), RDCurve.from_csv(a.test)
    _emit({"anchor": a.anchor, "test": a.test, "bd_rate_percent": bd_rate(anchor, test, a.metric),
           "bd_psnr_db": bd_psnr(anchor, test)})
    return EXIT_OK


def cmd_ablate(a) -> int:
    if a.plan:
        plan = ExperimentPlan.from_file(a.plan)
        if a.out:
            plan.out_dir = a.out
    else:
        models = {}
        if a.baseline:
            models["baseline"] = _lam_map(a.baseline, "--baseline")
        if a.epa:
            models["epa"] = _lam_map(a.epa, "--epa")
        if not models:
            raise UsageError("ablate needs --plan or at least one --baseline LAMBDA=CKPT")
        kw = {"models": models, "out_dir": a.out or "ablation", "data": a.data, "n_clips": a.clips, "seed": a.seed}
        if a.frames:
            kw["n_frames"] = a.frames
        if a.gops:
            kw["gops"] = tuple(a.gops)
        if a.variants:
            kw["variants"] = tuple(a.variants)
        plan = ExperimentPlan(**kw)
    report = run_plan(plan, jobs=a.jobs, figures=a.figures)
    _emit({"out_dir": plan.out_dir, "cells": len(report["rd"]), "bd_rows": len(report["bd"])})
    return EXIT_OK


# parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epacodec", description="Toy learned video codec: training, coding and experiment harness.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic clip set with ground-truth motion")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--train", type=int, default=200)
    s.add_argument("--test", type=int, default=20)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--frames", type=int, default=21, help="frames per training clip")
    s.add_argument("--test-frames", type=int, default=50, help="frames per held-out clip")
    s.add_argument("--texture", default="mixed", choices=["mixed", "smooth-blobs", "checker", "band-limited-noise"])
    s.add_argument("--noise", type=float, default=0.0, help="sensor noise sigma")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="stage-1 single-frame and/or stage-2 error-propagation-aware training")
    s.add_argument("--data", required=True, help="manifest.json written by synth")
    s.add_argument("--lam", type=int, default=512, choices=LAMBDAS)
    s.add_argument("--stage", default="both", choices=["1", "2", "both"])
    s.add_argument("--init", help="checkpoint to start from (required for --stage 2)")
    s.add_argument("--config", help="JSON training config (fields of TrainConfig)")
    s.add_argument("--steps1", type=int)
    s.add_argument("--steps2", type=int)
    s.add_argument("--unroll", type=int, help="T, frames per unrolled rollout")
    s.add_argument("--lr", type=float)
    s.add_argument("--stage2-lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--history", help="loss history CSV (step,L,D,R,bpp)")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="code a raw clip to a bitstream plus a stats JSON")
    s.add_argument("--model", required=True)
    s.add_argument("--clip", required=True, help="raw planar file with .json sidecar")
    s.add_argument("--gop", type=int, default=10)
    s.add_argument("--variant", default="OFF", choices=VARIANTS)
    s.add_argument("--frames", type=int, help="code only the first N frames")
    s.add_argument("--online-lr", type=float, default=1e-4)
    s.add_argument("--online-iters", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="bitstream path")
    s.add_argument("--stats", help="stats JSON path")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", help="reconstruct frames from a bitstream with the decoder only")
    s.add_argument("--model", required=True)
    s.add_argument("--bitstream", required=True)
    s.add_argument("--out", required=True, help="raw output (sidecar written alongside)")
    s.add_argument("--format", default="f64le-planar", choices=["f64le-planar", "u8-planar"],
                   help="f64le keeps reconstructions exact; u8 rounds to 8 bits")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="PSNR / MS-SSIM between an original and a decoded clip")
    s.add_argument("--original", required=True)
    s.add_argument("--decoded", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--json", help="also write the result here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bdrate", help="BD-rate / BD-PSNR between two RD CSVs (columns bpp, psnr)")
    s.add_argument("--anchor", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--metric", default="psnr", choices=["psnr", "ms_ssim"])
    s.set_defaults(func=cmd_bdrate)

    s = sub.add_parser("ablate", help="run an experiment plan: models x lambda x GoP x OEU variant")
    s.add_argument("--plan", help="plan JSON (fields of ExperimentPlan)")
    s.add_argument("--baseline", nargs="*", metavar="LAM=CKPT")
    s.add_argument("--epa", nargs="*", metavar="LAM=CKPT")
    s.add_argument("--data", help="manifest.json; default is the synthetic held-out set")
    s.add_argument("--clips", type=int, help="use only the first N held-out clips")
    s.add_argument("--frames", type=int)
    s.add_argument("--gops", type=int, nargs="*")
    s.add_argument("--variants", nargs="*", choices=VARIANTS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    s.add_argument("--figures", action="store_true", help="also render PNG figures next to the CSVs")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (IncompatibleModelError, DecoderMutationError) as exc:
        return _fail(EXIT_CONTRACT, type(exc).__name__, exc)
    except (DataError, CheckpointError, BitstreamError, MetricError, PlanError, TrainingError,
            OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
