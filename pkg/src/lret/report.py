"""Report rendering: plain-text tables, TSV, and matplotlib figures.

Every report path emits the delimited output and a rendered figure next
to each other, so results can be read in a terminal or dropped into a
write-up without rerunning anything.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataIOError
from .evaluation import METHODS, BenchmarkReport
from .retrieval import parse_heatmap_text


def method_label(method: str) -> str:
    return METHODS.get(method, method)


def format_benchmark_table(report: BenchmarkReport) -> str:
    """Methods x magnifications, mean +/- SE, staining then subtype block."""
    mags = report.magnifications
    name_w = max(len(method_label(m)) for m in report.methods) + 2
    lines = []
    for metric, getter in (("staining accuracy", "staining_stats"),
                           ("subtype accuracy", "subtype_stats")):
        lines.append(f"top-{report.k} {metric} (mean +/- SE, {report.n_folds}-fold)")
        header = "method".ljust(name_w) + "".join(m.center(17) for m in mags)
        lines.append(header)
        lines.append("-" * len(header))
        for method in report.methods:
            row = method_label(method).ljust(name_w)
            for mag in mags:
                mean, se = getattr(report.result(method, mag), getter)()
                row += f"{mean:.3f} +/- {se:.3f}".center(17)
            lines.append(row)
        lines.append("")
    ub = np.mean([report.result(report.methods[0], mag).mean_upper_bound() for mag in mags])
    lines.append(f"ideal-retrieval upper bound (mean over queries): {ub:.3f}")
    return "\n".join(lines) + "\n"


def benchmark_tsv_lines(report: BenchmarkReport) -> list[str]:
    lines = ["method\tmagnification\tstaining_mean\tstaining_se\tsubtype_mean\t"
             "subtype_se\tupper_bound_mean\tn_queries"]
    for method in report.methods:
        for mag in report.magnifications:
            res = report.result(method, mag)
            st_mean, st_se = res.staining_stats()
            sub_mean, sub_se = res.subtype_stats()
            lines.append(
                f"{method}\t{mag}\t{st_mean:.6f}\t{st_se:.6f}\t{sub_mean:.6f}\t"
                f"{sub_se:.6f}\t{res.mean_upper_bound():.6f}\t{len(res.queries)}"
            )
    return lines


def save_benchmark_figure(report: BenchmarkReport, path) -> None:
    """Grouped bars of staining accuracy with SE error bars."""
    mags = report.magnifications
    n_methods = len(report.methods)
    width = 0.8 / n_methods
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(mags))
    for i, method in enumerate(report.methods):
        means = []
        errs = []
        for mag in mags:
            mean, se = report.result(method, mag).staining_stats()
            means.append(mean)
            errs.append(se)
        ax.bar(x + (i - (n_methods - 1) / 2) * width, means, width,
               yerr=errs, capsize=3, label=method_label(method))
    ax.set_xticks(x)
    ax.set_xticklabels(mags)
    ax.set_xlabel("magnification")
    ax.set_ylabel(f"top-{report.k} staining accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_heatmap_figure(grid: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(grid, cmap="turbo", vmin=0.0, vmax=1.0, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_benchmark_report(report: BenchmarkReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / "benchmark.json",
        "table": out / "benchmark_table.txt",
        "tsv": out / "benchmark.tsv",
        "figure": out / "benchmark.png",
    }
    try:
        paths["json"].write_text(json.dumps(report.to_jsonable(), sort_keys=True) + "\n")
        paths["table"].write_text(format_benchmark_table(report))
        paths["tsv"].write_text("\n".join(benchmark_tsv_lines(report)) + "\n")
        save_benchmark_figure(report, paths["figure"])
    except OSError as exc:
        raise DataIOError(f"failed to write benchmark report under {out}: {exc}") from exc
    return paths


def render_query_figures(query_dir, out_dir=None) -> list[Path]:
    """Render heatmap PNGs for an exported query report directory."""
    qdir = Path(query_dir)
    out = Path(out_dir) if out_dir else qdir
    report_path = qdir / "report.json"
    if not report_path.exists():
        raise DataIOError(f"{qdir}: no report.json to render")
    doc = json.loads(report_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cid, rel in sorted(doc.get("heatmaps", {}).items()):
        grid = parse_heatmap_text((qdir / rel).read_text())
        role = "query" if cid == doc.get("query_case") else "retrieved"
        dest = out / f"heatmap_{cid}.png"
        save_heatmap_figure(grid, dest, title=f"{role} case {cid}")
        written.append(dest)
    return written
