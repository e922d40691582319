"""Experiment orchestration: RD grids, per-frame decay traces and GoP sweeps."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..codec.model import CodecModel
from ..data import Clip, SynthSpec, heldout_clips, load_manifest_clips
from ..metrics import MetricError, RDCurve, bd_psnr, bd_rate
from ..oeu import OFF, VARIANTS, OnlineConfig
from . import reports
from .sequence import EncodedSequence, encode_sequence

log = logging.getLogger(__name__)

DEFAULT_GOPS = (10, 20, 50)
ANCHOR = ("baseline", OFF)


class PlanError(ValueError):
    pass


@dataclass
class ExperimentPlan:
    """What to run. ``models`` maps a label ("baseline", "epa") to {lambda: checkpoint path}."""

    models: dict[str, dict[int, str]]
    out_dir: str = "ablation"
    data: str | None = None  # manifest.json; None means the default synthetic held-out set
    n_clips: int | None = None
    n_frames: int = 50
    gops: tuple[int, ...] = DEFAULT_GOPS
    variants: tuple[str, ...] = VARIANTS
    seed: int = 0
    online_lr: float = 1e-4
    online_iters: int = 10
    online_rel_eps: float = 1e-3
    synth: dict = field(default_factory=lambda: {"n_train": 200, "n_test": 20})

    def __post_init__(self):
        if not self.models:
            raise PlanError("plan lists no model checkpoints")
        self.models = {str(k): {int(lam): str(p) for lam, p in v.items()} for k, v in self.models.items()}
        self.gops = tuple(int(g) for g in self.gops)
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise PlanError(f"unknown OEU variants {bad}; expected a subset of {VARIANTS}")
        if any(g < 1 for g in self.gops):
            raise PlanError("GoP sizes must be >= 1")

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ExperimentPlan":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from exc
        try:
            return cls(**obj)
        except TypeError as exc:
            raise PlanError(f"bad plan {path}: {exc}") from exc

    def online(self, variant: str) -> OnlineConfig:
        return OnlineConfig(variant=variant, max_iters=self.online_iters, lr=self.online_lr,
                            rel_eps=self.online_rel_eps, seed=self.seed)

    def to_json(self) -> dict:
        return asdict(self)


def load_plan_models(plan: ExperimentPlan) -> dict[str, dict[int, CodecModel]]:
    models = {label: {lam: CodecModel.load(p) for lam, p in sorted(ck.items())}
              for label, ck in sorted(plan.models.items())}
    arch = {m.arch.digest() for per in models.values() for m in per.values()}
    if len(arch) != 1:
        raise PlanError("plan checkpoints do not share one architecture")
    for label, per in models.items():
        for lam, m in per.items():
            if int(m.lam) != lam:
                raise PlanError(f"checkpoint for {label} lambda={lam} was trained with lambda={m.lam}")
    return models


def plan_clips(plan: ExperimentPlan) -> list[Clip]:
    if plan.data:
        clips = load_manifest_clips(plan.data, split="test")
    else:
        spec = SynthSpec(test_frames=max(plan.n_frames, SynthSpec().test_frames), seed=plan.seed)
        clips = heldout_clips(spec, int(plan.synth["n_train"]), int(plan.synth["n_test"]))
    if plan.n_clips is not None:
        clips = clips[: plan.n_clips]
    if not clips:
        raise PlanError("no held-out clips to evaluate")
    short = [c.clip_id for c in clips if len(c) < plan.n_frames]
    if short:
        raise PlanError(f"clips {short} are shorter than n_frames={plan.n_frames}")
    return clips


# single cells ----------------------------------------------------------------------


@dataclass
class CellResult:
    model: str
    lam: int
    gop: int
    variant: str
    sequences: list[EncodedSequence]
    clip_ids: list[int]

    @property
    def total_bytes(self) -> int:
        return sum(len(s.blob) for s in self.sequences)

    @property
    def bpp(self) -> float:
        px = sum(s.header.width * s.header.height * s.header.frame_count for s in self.sequences)
        return 8.0 * self.total_bytes / px

    @property
    def psnr(self) -> float:
        return float(np.mean([f.psnr for s in self.sequences for f in s.frames]))

    @property
    def ms_ssim(self) -> float:
        return float(np.mean([f.ms_ssim for s in self.sequences for f in s.frames]))

    @property
    def mean_p_loss(self) -> float:
        vals = [f.loss for s in self.sequences for f in s.frames if f.frame_type == "P"]
        return float(np.mean(vals)) if vals else float("nan")

    def row(self) -> dict:
        return {"model": self.model, "lambda": self.lam, "gop": self.gop, "variant": self.variant,
                "bpp": self.bpp, "psnr": self.psnr, "ms_ssim": self.ms_ssim, "mean_p_loss": self.mean_p_loss,
                "bytes": self.total_bytes, "clips": len(self.sequences),
                "frames": sum(s.header.frame_count for s in self.sequences)}


def run_cell(model: CodecModel, clips: Sequence[Clip], gop: int, n_frames: int, online: OnlineConfig,
             label: str = "", with_ms_ssim: bool = True) -> CellResult:
    seqs = [encode_sequence(model, c.frames, gop, online, n_frames, with_ms_ssim=with_ms_ssim) for c in clips]
    return CellResult(label, int(model.lam), gop, online.variant, seqs, [c.clip_id for c in clips])


def _cell_job(args):
    path, clips, gop, n_frames, online, label = args
    return run_cell(CodecModel.load(path), clips, gop, n_frames, online, label)


# report assembly -------------------------------------------------------------------

RD_COLUMNS = ["model", "lambda", "gop", "variant", "bpp", "psnr", "ms_ssim", "mean_p_loss", "bytes", "clips", "frames"]
TRACE_COLUMNS = ["model", "lambda", "gop", "variant", "clip_id", "frame_index", "frame_type", "psnr", "bits_estimate"]
OEU_COLUMNS = ["model", "lambda", "gop", "variant", "clip_id", "frame_index", "iterations", "loss0", "loss_best",
               "bpp_before", "bpp_after", "flagged"]
BD_COLUMNS = ["gop", "model", "variant", "anchor", "bd_rate_percent", "bd_psnr_db", "note"]
FIG2_COLUMNS = ["frame_index", "frame_type", "psnr_baseline", "psnr_epa"]


def curve_of(cells: Sequence[CellResult], label: str) -> RDCurve:
    return RDCurve.from_arrays([c.bpp for c in cells], [c.psnr for c in cells], [c.ms_ssim for c in cells], label)


def bd_rows(cells: Sequence[CellResult], anchor=ANCHOR) -> list[dict]:
    rows = []
    by_key: dict[tuple, list[CellResult]] = {}
    for c in cells:
        by_key.setdefault((c.gop, c.model, c.variant), []).append(c)
    for gop in sorted({c.gop for c in cells}):
        ref = by_key.get((gop, *anchor))
        if ref is None or len(ref) < 4:
            continue
        for (g, model, variant), group in sorted(by_key.items()):
            if g != gop or len(group) < 4:
                continue
            row = {"gop": gop, "model": model, "variant": variant, "anchor": "+".join(anchor),
                   "bd_rate_percent": None, "bd_psnr_db": None, "note": ""}
            try:
                a = curve_of(sorted(ref, key=lambda c: c.lam), "anchor")
                t = curve_of(sorted(group, key=lambda c: c.lam), f"{model}+{variant}")
                row["bd_rate_percent"], row["bd_psnr_db"] = bd_rate(a, t), bd_psnr(a, t)
            except MetricError as exc:
                # e.g. an untrained model whose rate does not grow with lambda
                row["note"] = str(exc)
            rows.append(row)
    return rows


def run_plan(plan: ExperimentPlan, jobs: int = 1, figures: bool = False) -> dict:
    """Run every (model, lambda, GoP, variant) cell and write CSV + JSON (+ optional PNG) reports."""
    out = Path(plan.out_dir)
    (out / "bitstreams").mkdir(parents=True, exist_ok=True)
    models = load_plan_models(plan)
    clips = plan_clips(plan)
    keys = [(label, lam, gop, variant)
            for label in sorted(models) for lam in sorted(models[label])
            for gop in plan.gops for variant in plan.variants]
    if jobs > 1:
        args = [(plan.models[l][lam], clips, g, plan.n_frames, plan.online(v), l) for l, lam, g, v in keys]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_cell_job, args))
    else:
        cells = [run_cell(models[l][lam], clips, g, plan.n_frames, plan.online(v), l) for l, lam, g, v in keys]

    rd, traces, telemetry, streams = [], [], [], {}
    for cell in cells:
        rd.append(cell.row())
        for clip_id, seq in zip(cell.clip_ids, cell.sequences):
            name = f"{cell.model}_l{cell.lam}_g{cell.gop}_{cell.variant}_c{clip_id:04d}.epab"
            (out / "bitstreams" / name).write_bytes(seq.blob)
            streams[name] = reports.sha256_bytes(seq.blob)
            px = seq.header.width * seq.header.height
            for f in seq.frames:
                base = {"model": cell.model, "lambda": cell.lam, "gop": cell.gop, "variant": cell.variant,
                        "clip_id": clip_id, "frame_index": f.index}
                traces.append({**base, "frame_type": f.frame_type, "psnr": f.psnr, "bits_estimate": f.bits_estimate})
                if f.frame_type == "P" and cell.variant != OFF:
                    telemetry.append({**base, "iterations": f.iterations, "loss0": f.loss0, "loss_best": f.loss,
                                      "bpp_before": f.bits_estimate0 / px, "bpp_after": f.bits_estimate / px,
                                      "flagged": int(f.flagged)})
    bd = bd_rows(cells)
    fig2 = _fig2_from_cells(cells, plan)
    if fig2:
        reports.write_csv(out / "fig2.csv", FIG2_COLUMNS, fig2)
    sweep = [r for r in bd if r["model"] == "epa" and r["variant"] == OFF]
    if sweep:
        reports.write_csv(out / "gop_sweep.csv", BD_COLUMNS, sweep)
    reports.write_csv(out / "rd.csv", RD_COLUMNS, rd)
    reports.write_csv(out / "traces.csv", TRACE_COLUMNS, traces)
    reports.write_csv(out / "oeu.csv", OEU_COLUMNS, telemetry)
    reports.write_csv(out / "bd.csv", BD_COLUMNS, bd)
    report = {
        "schema_version": reports.SCHEMA_VERSION,
        "plan": plan.to_json(),
        "clip_ids": [c.clip_id for c in clips],
        "checkpoints": {label: {str(lam): reports.sha256_file(p) for lam, p in sorted(ck.items())}
                        for label, ck in sorted(plan.models.items())},
        "decoder_hashes": {label: {str(lam): m.decoder_hash() for lam, m in per.items()}
                           for label, per in models.items()},
        "bitstreams": streams,
        "rd": rd,
        "bd": bd,
        "fig2": fig2,
        "gop_sweep": sweep,
    }
    reports.write_json(out / "report.json", report)
    if figures:
        from . import plotting

        plotting.render_plan_figures(out, rd, traces)
    return report


def _fig2_from_cells(cells: Sequence[CellResult], plan: ExperimentPlan) -> list[dict]:
    """Baseline vs EPA decay trace at the largest GoP, plain encoder, lambda nearest 512."""
    if OFF not in plan.variants or not {"baseline", "epa"} <= set(plan.models):
        return []
    lams = sorted(set(plan.models["baseline"]) & set(plan.models["epa"]), key=lambda l: (abs(l - 512), l))
    if not lams:
        return []
    gop = max(plan.gops)
    pick = {c.model: c for c in cells if c.lam == lams[0] and c.gop == gop and c.variant == OFF}
    a, b = pick["baseline"], pick["epa"]
    return [
        {"frame_index": t, "frame_type": "I" if t % gop == 0 else "P",
         "psnr_baseline": float(np.mean([s.frames[t].psnr for s in a.sequences])),
         "psnr_epa": float(np.mean([s.frames[t].psnr for s in b.sequences]))}
        for t in range(plan.n_frames)
    ]


# decay traces and GoP sweeps --------------------------------------------------------


def fig2_trace(stage1: CodecModel, stage2: CodecModel, clips: Sequence[Clip], gop: int = 50,
               n_frames: int = 50) -> list[dict]:
    """Mean per-frame PSNR of both models over ``clips`` (plain encoder, no online updating)."""
    if stage1.lam != stage2.lam:
        raise PlanError(f"trace models differ in lambda: {stage1.lam} vs {stage2.lam}")
    off = OnlineConfig(variant=OFF)
    a = run_cell(stage1, clips, gop, n_frames, off, "baseline", with_ms_ssim=False)
    b = run_cell(stage2, clips, gop, n_frames, off, "epa", with_ms_ssim=False)
    rows = []
    for t in range(n_frames):
        rows.append({
            "frame_index": t,
            "frame_type": "I" if t % gop == 0 else "P",
            "psnr_baseline": float(np.mean([s.frames[t].psnr for s in a.sequences])),
            "psnr_epa": float(np.mean([s.frames[t].psnr for s in b.sequences])),
        })
    return rows


def gop_sweep(baseline: Mapping[int, CodecModel], epa: Mapping[int, CodecModel], clips: Sequence[Clip],
              gops: Sequence[int] = DEFAULT_GOPS, n_frames: int = 50) -> dict[int, dict]:
    """BD-rate of EPA against the baseline at each GoP size, with the underlying four-point curves."""
    if sorted(baseline) != sorted(epa):
        raise PlanError("baseline and EPA checkpoint sets cover different lambdas")
    off = OnlineConfig(variant=OFF)
    out = {}
    for gop in gops:
        base_cells = [run_cell(baseline[lam], clips, gop, n_frames, off, "baseline", False) for lam in sorted(baseline)]
        epa_cells = [run_cell(epa[lam], clips, gop, n_frames, off, "epa", False) for lam in sorted(epa)]
        a = RDCurve.from_arrays([c.bpp for c in base_cells], [c.psnr for c in base_cells], label="baseline")
        b = RDCurve.from_arrays([c.bpp for c in epa_cells], [c.psnr for c in epa_cells], label="epa")
        out[gop] = {
            "bd_rate_percent": bd_rate(a, b),
            "bd_psnr_db": bd_psnr(a, b),
            "curves": {
                "baseline": [{"lambda": c.lam, "bpp": c.bpp, "psnr": c.psnr} for c in base_cells],
                "epa": [{"lambda": c.lam, "bpp": c.bpp, "psnr": c.psnr} for c in epa_cells],
            },
        }
    return out
