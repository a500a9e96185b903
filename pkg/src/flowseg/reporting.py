"""Result tables, trend checks, the summary report, an SVG chart, and overlays."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .datamodel import Image, InstanceMask
from .errors import FormatError
from .protocol import ABLATIONS, ResultRow

GOLDEN = 0.618033988749895

RESULTS_HEADER = "variant,k,seed,mean_ap,pooled_ap"
TIMINGS_HEADER = "variant,k,seed,wall_seconds"


def write_results_csv(rows, path) -> None:
    lines = [RESULTS_HEADER]
    for r in rows:
        lines.append(f"{r.variant},{r.k},{r.seed},{r.mean_ap:.6f},{r.pooled_ap:.6f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_timings_csv(rows, path) -> None:
    lines = [TIMINGS_HEADER]
    for r in rows:
        lines.append(f"{r.variant},{r.k},{r.seed},{r.wall_seconds:.3f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_results_csv(path):
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != RESULTS_HEADER:
            raise FormatError(f"unexpected results header {header!r}")
        for line in f:
            if not line.strip():
                continue
            variant, k, seed, mean_ap, pooled_ap = line.strip().split(",")
            rows.append(ResultRow(variant, int(k), int(seed), float(mean_ap), float(pooled_ap), 0.0))
    return rows


def mean_ap_table(rows):
    """(variant, k) -> mean over seeds of the per-run mean AP."""
    acc = {}
    for r in rows:
        acc.setdefault((r.variant, r.k), []).append(r.mean_ap)
    return {key: float(np.mean(v)) for key, v in acc.items()}


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str


def trend_checks(rows) -> list:
    """The Table-1/Table-2 analog assertions over a results table."""
    table = mean_ap_table(rows)
    ks = sorted({r.k for r in rows if r.variant == "ADAPT"})
    checks = []

    def ap(variant, k=None):
        if k is None:
            k = min(k2 for (v, k2) in table if v == variant)
        return table.get((variant, k))

    if ap("ADAPT", 1) is not None and ap("LB") is not None:
        lb, a1 = ap("LB"), ap("ADAPT", 1)
        checks.append(TrendCheck("adapt1_vs_lb", a1 >= lb + 0.10,
                                 f"ADAPT@1 {a1:.3f} vs LB {lb:.3f} + 0.10"))
    if ks and ap("UB") is not None:
        ub = ap("UB")
        bad = [k for k in ks if table[("ADAPT", k)] > ub]
        checks.append(TrendCheck("adapt_below_ub", not bad,
                                 f"UB {ub:.3f}; ADAPT exceeds at K={bad}" if bad else f"all ADAPT <= UB {ub:.3f}"))
    if ap("ADAPT", 5) is not None and ap("ADAPT", 1) is not None:
        a5, a1 = ap("ADAPT", 5), ap("ADAPT", 1)
        checks.append(TrendCheck("adapt5_vs_adapt1", a5 >= a1 - 0.03,
                                 f"ADAPT@5 {a5:.3f} vs ADAPT@1 {a1:.3f} - 0.03"))
    ft_ks = [k for k in (1, 3, 5) if ("FT", k) in table and ("ADAPT", k) in table]
    if ft_ks:
        bad = [k for k in ft_ks if table[("ADAPT", k)] < table[("FT", k)] - 0.02]
        detail = "; ".join(f"K={k}: ADAPT {table[('ADAPT', k)]:.3f} vs FT {table[('FT', k)]:.3f}" for k in ft_ks)
        checks.append(TrendCheck("adapt_vs_ft", not bad, detail))
    if all(("ADAPT", 1) in table and (v, 1) in table for v in ABLATIONS):
        full = table[("ADAPT", 1)]
        nocb, nocd, noboth = (table[(v, 1)] for v in ABLATIONS)
        checks.append(TrendCheck("full_vs_nocb", full >= nocb - 0.02,
                                 f"full {full:.3f} vs no-CB {nocb:.3f} - 0.02"))
        checks.append(TrendCheck("full_vs_nocd", full >= nocd - 0.02,
                                 f"full {full:.3f} vs no-CD {nocd:.3f} - 0.02"))
        checks.append(TrendCheck("full_vs_noboth", full >= noboth,
                                 f"full {full:.3f} vs no-both {noboth:.3f}"))
    return checks


def write_summary_md(rows, path, extra_lines=()) -> None:
    table = mean_ap_table(rows)
    variants = sorted({v for (v, _) in table})
    ks = sorted({k for (_, k) in table})
    lines = ["# Experiment summary", "", "Mean AP@0.5 over seeds:", ""]
    lines.append("| variant | " + " | ".join(f"K={k}" for k in ks) + " |")
    lines.append("|---" * (len(ks) + 1) + "|")
    for v in variants:
        cells = [f"{table[(v, k)]:.3f}" if (v, k) in table else "-" for k in ks]
        lines.append(f"| {v} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Trend checks:")
    for c in trend_checks(rows):
        lines.append(f"- {'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    lines.extend(extra_lines)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Hand-rolled SVG bar chart (no plotting dependency).


def svg_bar_chart(rows, path, title="AP@0.5 vs K") -> None:
    table = mean_ap_table(rows)
    variants = sorted({v for (v, _) in table})
    ks = sorted({k for (_, k) in table})
    width, height = 640, 360
    ml, mr, mt, mb = 50, 20, 30, 40
    plot_w, plot_h = width - ml - mr, height - mt - mb
    group_w = plot_w / max(len(ks), 1)
    bar_w = group_w / (len(variants) + 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.0f}" y="18" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = mt + plot_h * (1 - frac)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{width-mr}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{ml-6}" y="{y+4:.1f}" text-anchor="end" font-size="10">{frac:.2f}</text>')
    for vi, v in enumerate(variants):
        hue = (vi * GOLDEN) % 1.0
        r, g, b = (int(255 * c) for c in colorsys.hsv_to_rgb(hue, 0.65, 0.9))
        color = f"#{r:02x}{g:02x}{b:02x}"
        for ki, k in enumerate(ks):
            if (v, k) not in table:
                continue
            ap = max(0.0, min(1.0, table[(v, k)]))
            x = ml + ki * group_w + (vi + 0.5) * bar_w
            bh = plot_h * ap
            parts.append(
                f'<rect x="{x:.1f}" y="{mt + plot_h - bh:.1f}" width="{bar_w*0.9:.1f}" '
                f'height="{bh:.1f}" fill="{color}"/>'
            )
        ly = mt + 14 * vi
        parts.append(f'<rect x="{width-mr-130}" y="{ly}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{width-mr-115}" y="{ly+9}" font-size="10">{v}</text>')
    for ki, k in enumerate(ks):
        x = ml + (ki + 0.5) * group_w
        parts.append(f'<text x="{x:.1f}" y="{height-mb+16}" text-anchor="middle" font-size="11">K={k}</text>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt+plot_h}" stroke="#333"/>')
    parts.append(f'<line x1="{ml}" y1="{mt+plot_h}" x2="{width-mr}" y2="{mt+plot_h}" stroke="#333"/>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Color overlays (binary PPM, P6): instance hues walk the golden ratio.


def instance_colors(n: int) -> np.ndarray:
    cols = np.zeros((n + 1, 3), dtype=np.float32)
    for i in range(1, n + 1):
        cols[i] = colorsys.hsv_to_rgb((i * GOLDEN) % 1.0, 0.65, 1.0)
    return cols


def overlay_rgb(img: Image, mask: InstanceMask, alpha: float = 0.5) -> np.ndarray:
    cols = instance_colors(mask.n_instances)
    rgb = np.repeat(img.data[:, :, None], 3, axis=2)
    color = cols[mask.labels]
    cell = (mask.labels > 0)[:, :, None]
    out = np.where(cell, (1 - alpha) * rgb + alpha * color, rgb)
    return np.clip(out, 0.0, 1.0)


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w = rgb.shape[:2]
    payload = np.floor(rgb.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode() + payload.tobytes())
