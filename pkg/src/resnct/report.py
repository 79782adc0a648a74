"""Evaluation report rendering: metric tables as text/CSV/JSON plus
matplotlib figures (line profiles, attenuation histograms, per-image metric
distributions) written under an output directory."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import (
    HISTOGRAM_BINS,
    HISTOGRAM_RANGE_HU,
    LineProfile,
    MetricsReport,
    attenuation_histogram,
)

METRIC_NAMES = ("psnr_db", "ssim", "ncc", "mae", "rmse")


def format_metrics_table(report: MetricsReport) -> str:
    """One-row summary table: each metric reported as mean +/- SD across
    the evaluated images."""
    summary = report.summary()
    header = "method  " + "  ".join(f"{n:>16}" for n in METRIC_NAMES)
    cells = []
    for name in METRIC_NAMES:
        s = summary[name]
        if s["mean"] is None:
            cells.append(f"{'n/a':>16}")
        else:
            cells.append(f"{s['mean']:10.3f} ± {s['sd']:.3f}".rjust(16))
    lines = [header, "ResNCT  " + "  ".join(cells),
             f"images: {summary['image_count']}"]
    if summary["psnr_excluded_count"]:
        lines.append(
            f"identical pairs excluded from PSNR mean: {summary['psnr_excluded_count']}"
        )
    return "\n".join(lines) + "\n"


def write_per_image_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(("image_index",) + METRIC_NAMES)
        for i in range(report.image_count):
            row = [i]
            for name in METRIC_NAMES:
                value = getattr(report, name)[i]
                row.append("inf" if isinstance(value, float) and math.isinf(value) else value)
            writer.writerow(row)


def write_line_profile_csv(profile: LineProfile, path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["sample_index", "hu"])
        for i, value in enumerate(profile.values_hu):
            writer.writerow([i, float(value)])


def plot_line_profiles(profiles: dict[str, LineProfile], path) -> None:
    """Overlayed attenuation-vs-position curves, one per labeled source."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, profile in profiles.items():
        ax.plot(np.arange(profile.sample_count), profile.values_hu, label=label)
    ax.set_xlabel("position along profile (samples)")
    ax.set_ylabel("attenuation (HU)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_attenuation_histograms(regions_hu: dict[str, np.ndarray], path,
                                bins: int = HISTOGRAM_BINS,
                                range_hu=HISTOGRAM_RANGE_HU) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    edges = np.linspace(range_hu[0], range_hu[1], bins + 1)
    centers = (edges[:-1] + edges[1:]) / 2
    for label, region in regions_hu.items():
        ax.plot(centers, attenuation_histogram(region, bins, range_hu),
                label=label, drawstyle="steps-mid")
    ax.set_xlabel("attenuation (HU)")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_distributions(report: MetricsReport, path) -> None:
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(3 * len(METRIC_NAMES), 3))
    for ax, name in zip(axes, METRIC_NAMES):
        values = [v for v in getattr(report, name) if math.isfinite(v)]
        if values:
            spread = max(values) - min(values)
            if spread <= 1e-9 * max(1.0, abs(values[0])):
                ax.hist(values, bins=1, range=(values[0] - 0.5, values[0] + 0.5))
            else:
                ax.hist(values, bins=min(20, max(3, len(values) // 2)))
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_eval_report(report: MetricsReport, out_dir,
                      profiles: dict[str, LineProfile] | None = None,
                      regions_hu: dict[str, np.ndarray] | None = None) -> list[Path]:
    """Write the full evaluation artifact set; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created = []

    path = out_dir / "metrics.json"
    path.write_text(report.to_json())
    created.append(path)

    path = out_dir / "metrics_table.txt"
    path.write_text(format_metrics_table(report))
    created.append(path)

    path = out_dir / "metrics_per_image.csv"
    write_per_image_csv(report, path)
    created.append(path)

    path = out_dir / "metric_distributions.png"
    plot_metric_distributions(report, path)
    created.append(path)

    if profiles:
        path = out_dir / "line_profiles.png"
        plot_line_profiles(profiles, path)
        created.append(path)
        for label, profile in profiles.items():
            path = out_dir / f"line_profile_{label}.csv"
            write_line_profile_csv(profile, path)
            created.append(path)

    if regions_hu:
        path = out_dir / "attenuation_histograms.png"
        plot_attenuation_histograms(regions_hu, path)
        created.append(path)

    return created
