"""Sweep reports: one CSV per curve plus an SVG line plot with stdev bands.

File names are `<sweep>_<fingerprint>.{csv,svg}` and re-emission is
byte-identical (fixed SVG hash salt, no embedded timestamps).
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "babelforge"

import matplotlib.pyplot as plt
import numpy as np

from .xferlab import SweepCurve, SweepPoint


def _point_groups(point: SweepPoint) -> tuple[set[str], set[str]]:
    if point.results:
        return set(point.results[0].hi_langs), set(point.results[0].lo_langs)
    return set(), set()


def _write_csv(curve: SweepCurve, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{curve.variable},lang,group,n_seeds,acc_mean,acc_std\n")
        for point in curve.points:
            hi, lo = _point_groups(point)
            for lang in sorted(point.per_lang_mean):
                group = "hi" if lang in hi else "lo" if lang in lo else "-"
                f.write(f"{point.x:g},{lang},{group},{curve.n_seeds},"
                        f"{point.per_lang_mean[lang]:.6f},"
                        f"{point.per_lang_std[lang]:.6f}\n")


def _band(ax, xs, means, stds, label, color):
    means = np.asarray(means)
    stds = np.asarray(stds)
    ax.plot(xs, means, marker="o", label=label, color=color)
    ax.fill_between(xs, means - stds, means + stds, alpha=0.2, color=color,
                    linewidth=0)


def _write_svg(curve: SweepCurve, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    xs = curve.xs()
    overall = [float(np.mean(list(p.per_lang_mean.values()))) for p in curve.points]
    overall_std = [float(np.mean(list(p.per_lang_std.values()))) for p in curve.points]
    _band(ax, xs, overall, overall_std, "all languages", "tab:gray")
    if not any(np.isnan(p.hi_mean) for p in curve.points):
        _band(ax, xs, [p.hi_mean for p in curve.points],
              [p.hi_std for p in curve.points], "high-resource", "tab:blue")
    if not any(np.isnan(p.lo_mean) for p in curve.points):
        _band(ax, xs, [p.lo_mean for p in curve.points],
              [p.lo_std for p in curve.points], "low-resource", "tab:red")
    widened = curve.extras.get("widened")
    if isinstance(widened, SweepPoint):
        ax.scatter([widened.x], [widened.lo_mean], marker="*", s=140,
                   color="tab:green", zorder=5,
                   label=f"widened (H={curve.extras.get('widened_hidden')})")
    if curve.variable == "target_v":
        ax.set_xscale("log", base=2)
    ax.set_xlabel(curve.variable)
    ax.set_ylabel("probe accuracy")
    ax.set_title(f"{curve.variable} sweep ({curve.n_seeds} seeds, "
                 f"cfg {curve.fingerprint})")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(curves: list[SweepCurve], out_dir: str) -> list[str]:
    """Render every curve to CSV + SVG under out_dir; returns the paths."""
    if not curves:
        raise ValueError("no curves to report")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for curve in curves:
        xs = curve.xs()
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("curve x values must be strictly increasing")
        stem = os.path.join(out_dir, f"{curve.variable}_{curve.fingerprint}")
        _write_csv(curve, stem + ".csv")
        _write_svg(curve, stem + ".svg")
        paths.extend([stem + ".csv", stem + ".svg"])
    return paths
