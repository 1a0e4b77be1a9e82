"""Report emission: delimited output, a markdown grid, and rendered figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from ..errors import DataError
from .experiment import ExperimentReport, LeakReport

CSV_COLUMNS = ["query_id", "ap", "ssim", "backend", "attack", "transform", "T", "epsilon", "seed"]


def emit_report(report: ExperimentReport, path, fmt: str = "csv") -> None:
    """Write per-query rows as CSV, or a table-style markdown grid."""
    path = Path(path)
    if fmt == "csv":
        _emit_csv(report, path)
    elif fmt == "markdown":
        _emit_markdown(report, path)
    else:
        raise DataError(f"unknown report format {fmt!r}")


def _config_fields(report):
    cfg = report.config
    return (cfg["backend"], cfg["attack"], f"{cfg['transform']}({cfg['transform_amount']:g})",
            cfg["pire"]["iterations"], cfg["pire"]["epsilon"], cfg["seeds"]["attack"])


def _emit_csv(report: ExperimentReport, path: Path) -> None:
    backend, attack, transform, t, eps, seed = _config_fields(report)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in report.results:
            writer.writerow([row.query_id, repr(row.ap), repr(row.ssim),
                             backend, attack, transform, t, repr(eps), seed])


def parse_report_csv(path):
    """Read back rows written by _emit_csv, values exactly as emitted."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            out.append({
                "query_id": rec["query_id"],
                "ap": float(rec["ap"]),
                "ssim": float(rec["ssim"]),
                "backend": rec["backend"],
                "attack": rec["attack"],
                "transform": rec["transform"],
                "T": int(rec["T"]),
                "epsilon": float(rec["epsilon"]),
                "seed": int(rec["seed"]),
            })
    return out


def _emit_markdown(report: ExperimentReport, path: Path) -> None:
    backend, attack, transform, t, eps, _ = _config_fields(report)
    lines = [
        f"# {report.dataset}: {backend} / {attack} / {transform}",
        "",
        "| query | AP (%) | SSIM |",
        "|-------|--------|------|",
    ]
    for row in report.results:
        lines.append(f"| {row.query_id} | {100.0 * row.ap:.2f} | {row.ssim:.4f} |")
    lines.append(f"| **mAP** | **{report.map_percent:.2f}** | {report.mean_ssim:.4f} |")
    lines.append("")
    lines.append(f"T={t}, epsilon={eps:.6g}, runtime {report.runtime_s:.1f}s")
    if report.skipped_queries:
        lines.append(f"Skipped (no relevant images): {', '.join(report.skipped_queries)}")
    Path(path).write_text("\n".join(lines) + "\n")


def emit_leak_report(report: LeakReport, path, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["background", "query", "ap"])
            for row in report.rows:
                writer.writerow([row.background, row.query, repr(row.ap)])
    elif fmt == "markdown":
        lines = [f"# Leak experiment: {report.query_id} on {report.dataset}", "",
                 "| background | query | AP (%) |", "|---|---|---|"]
        for row in report.rows:
            lines.append(f"| {row.background} | {row.query} | {100.0 * row.ap:.2f} |")
        Path(path).write_text("\n".join(lines) + "\n")
    else:
        raise DataError(f"unknown report format {fmt!r}")


def render_report_figures(report: ExperimentReport, out_dir, stem: str = "report") -> list:
    """Per-query AP and SSIM bar charts written as PNGs next to the CSV output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backend, attack, transform, t, eps, _ = _config_fields(report)
    names = [r.query_id for r in report.results]
    aps = [100.0 * r.ap for r in report.results]
    ssims = [r.ssim for r in report.results]
    written = []

    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names)), 3.2))
    ax.bar(range(len(names)), aps, color="#4878a8")
    ax.axhline(report.map_percent, color="#c44e52", ls="--", lw=1,
               label=f"mAP {report.map_percent:.2f}")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("AP (%)")
    ax.set_ylim(0, 105)
    ax.set_title(f"{backend} / {attack} / {transform} (T={t})", fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    ap_path = out_dir / f"{stem}_ap.png"
    fig.savefig(ap_path, dpi=120)
    plt.close(fig)
    written.append(ap_path)

    if attack != "none":
        fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names)), 3.0))
        ax.bar(range(len(names)), ssims, color="#6aa56a")
        ax.axhline(report.mean_ssim, color="#c44e52", ls="--", lw=1,
                   label=f"mean {report.mean_ssim:.4f}")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("SSIM")
        ax.set_ylim(0, 1.02)
        ax.set_title(f"query quality after {attack}", fontsize=9)
        ax.legend(fontsize=7)
        fig.tight_layout()
        ssim_path = out_dir / f"{stem}_ssim.png"
        fig.savefig(ssim_path, dpi=120)
        plt.close(fig)
        written.append(ssim_path)
    return written


def render_leak_figure(report: LeakReport, out_dir, stem: str = "leak") -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [f"{r.background}\n{r.query}" for r in report.rows]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(range(len(labels)), [100.0 * r.ap for r in report.rows], color="#8172b2")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("AP (%)")
    ax.set_ylim(0, 105)
    ax.set_title(f"background replacement, query {report.query_id}", fontsize=9)
    fig.tight_layout()
    path = out_dir / f"{stem}_{report.query_id}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
