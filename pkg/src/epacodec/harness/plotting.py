"""Static PNG figures next to the CSV reports (opt-in; the CSVs stay the source of truth)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
    # fixed metadata keeps PNG bytes stable across runs
    "savefig.format": "png",
}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def rd_figure(rows: Sequence[dict], gop: int, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        series: dict[str, list[tuple[float, float]]] = {}
        for r in rows:
            if int(r["gop"]) == gop:
                series.setdefault(f"{r['model']}+{r['variant']}", []).append((float(r["bpp"]), float(r["psnr"])))
        for label, pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, lw=1.2, label=label)
        ax.set_xlabel("bpp")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(f"RD curves, GoP {gop}")
        ax.legend(fontsize=7, frameon=False)
        return _save(fig, path)


def trace_figure(rows: Sequence[dict], path, columns: Sequence[str] = ("psnr_baseline", "psnr_epa")) -> Path:
    """Per-frame PSNR, one line per column of a decay-trace table."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = [int(r["frame_index"]) for r in rows]
        for col in columns:
            ax.plot(x, [float(r[col]) for r in rows], lw=1.2, label=col.replace("psnr_", ""))
        ax.set_xlabel("frame index")
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False)
        return _save(fig, path)


def gop_figure(sweep: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        gops = sorted(sweep)
        ax.bar([str(g) for g in gops], [sweep[g]["bd_rate_percent"] for g in gops], color="0.4")
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("GoP size")
        ax.set_ylabel("BD-rate vs baseline (%)")
        return _save(fig, path)


def render_plan_figures(out_dir, rd_rows: Sequence[dict], trace_rows: Sequence[dict]) -> list[Path]:
    out = Path(out_dir)
    paths = [rd_figure(rd_rows, g, out / f"rd_gop{g}.png") for g in sorted({int(r["gop"]) for r in rd_rows})]
    # mean trace per (model, variant) at the largest GoP and first lambda
    if trace_rows:
        gop = max(int(r["gop"]) for r in trace_rows)
        lam = min(int(r["lambda"]) for r in trace_rows)
        sums: dict[tuple[str, int], list[float]] = {}
        for r in trace_rows:
            if int(r["gop"]) == gop and int(r["lambda"]) == lam:
                sums.setdefault((f"{r['model']}+{r['variant']}", int(r["frame_index"])), []).append(float(r["psnr"]))
        labels = sorted({k[0] for k in sums})
        frames = sorted({k[1] for k in sums})
        table = [{"frame_index": t, **{f"psnr_{lab}": sum(sums[(lab, t)]) / len(sums[(lab, t)]) for lab in labels}}
                 for t in frames]
        paths.append(trace_figure(table, out / f"trace_gop{gop}_l{lam}.png", [f"psnr_{lab}" for lab in labels]))
    return paths
