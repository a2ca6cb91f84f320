"""Report generation: CSV, structured-text aggregate and static SVG bar charts.

``fig4.svg`` holds the standardized-accuracy panels (sub-total, total) and
``fig5.svg`` the raw-accuracy panels. Bars are grouped by model variant and
colored by regime; each bar is the mean over seeds. Rendering is plain string
formatting with fixed precision, so equal inputs give equal bytes.
"""

from __future__ import annotations

import logging
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import ReportError
from .metrics import EfficiencyReport, compare_regimes
from .records import RunRecord
from .regimes import REGIME_KINDS

log = logging.getLogger(__name__)

REGIME_COLORS = {"NoIncrease": "#7f7f7f", "Gradual": "#1f77b4", "Stepwise": "#ff7f0e"}
PANEL_W, PANEL_H = 360, 260
MARGIN_L, MARGIN_B, MARGIN_T = 50, 40, 30


def load_records(run_dir) -> list:
    """All valid ``*.record`` files in ``run_dir``, sorted by file name."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir} is not a directory")
    records = []
    for path in sorted(run_dir.glob("*.record")):
        try:
            rec = RunRecord.load(path)
            rec.validate()
        except (ValueError, TypeError, KeyError) as exc:
            log.warning("skipping invalid record %s: %s", path.name, exc)
            continue
        records.append(rec)
    if not records:
        raise ReportError(f"no valid run records in {run_dir}")
    return records


def _regime_order(regimes):
    known = [r for r in REGIME_KINDS if r in regimes]
    return known + sorted(r for r in regimes if r not in REGIME_KINDS)


def _nice_max(v: float) -> float:
    if v <= 0:
        return 1.0
    # round up to 1, 2 or 5 times a power of ten
    exp = 10 ** int(f"{v:e}".split("e")[1])
    for m in (1, 2, 5, 10):
        if v <= m * exp:
            return float(m * exp)
    return float(10 * exp)


def _panel(report: EfficiencyReport, column: str, title: str, x0: float) -> list:
    models = sorted({m for m, _ in report.means})
    regimes = _regime_order({g for _, g in report.means})
    values = [report.means[k][column] for k in report.means]
    ymax = _nice_max(max(values) if values else 1.0)
    plot_w = PANEL_W - MARGIN_L - 10
    plot_h = PANEL_H - MARGIN_T - MARGIN_B
    base_y = MARGIN_T + plot_h
    out = [f'<g transform="translate({x0:.0f},0)">',
           f'<text x="{PANEL_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{MARGIN_L}" y1="{base_y}" x2="{MARGIN_L + plot_w}" y2="{base_y}" stroke="black"/>',
           f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{base_y}" stroke="black"/>']
    for i in range(5):
        frac = i / 4
        y = base_y - frac * plot_h
        out.append(f'<text x="{MARGIN_L - 4}" y="{y + 4:.1f}" text-anchor="end" font-size="10">'
                   f'{ymax * frac:.3g}</text>')
    group_w = plot_w / max(len(models), 1)
    bar_w = group_w * 0.8 / max(len(regimes), 1)
    for gi, model in enumerate(models):
        gx = MARGIN_L + gi * group_w + group_w * 0.1
        out.append(f'<text x="{gx + group_w * 0.4:.1f}" y="{base_y + 16}" text-anchor="middle" '
                   f'font-size="11">{escape(model)}</text>')
        for ri, regime in enumerate(regimes):
            cell = report.means.get((model, regime))
            if cell is None:
                continue
            v = cell[column]
            h = plot_h * v / ymax
            x = gx + ri * bar_w
            out.append(f'<rect x="{x:.2f}" y="{base_y - h:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
                       f'fill="{REGIME_COLORS.get(regime, "#2ca02c")}">'
                       f'<title>{escape(model)} {escape(regime)}: {v:.6g}</title></rect>')
    out.append("</g>")
    return out


def render_svg(report: EfficiencyReport, panels) -> str:
    """Side-by-side panels; ``panels`` is a list of ``(column, title)``."""
    width = PANEL_W * len(panels)
    height = PANEL_H + 24
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for i, (column, title) in enumerate(panels):
        parts.extend(_panel(report, column, title, i * PANEL_W))
    regimes = _regime_order({g for _, g in report.means})
    for i, regime in enumerate(regimes):
        x = 10 + i * 110
        parts.append(f'<rect x="{x}" y="{PANEL_H + 8}" width="12" height="12" '
                     f'fill="{REGIME_COLORS.get(regime, "#2ca02c")}"/>')
        parts.append(f'<text x="{x + 16}" y="{PANEL_H + 18}" font-size="11">{escape(regime)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(run_dir, out_dir=None, time_unit: str | None = None) -> EfficiencyReport:
    """Write report.csv, report.txt, fig4.svg and fig5.svg for the records in ``run_dir``."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    report = compare_regimes(load_records(run_dir), time_unit)
    unit = "GMAC" if report.time_unit == "mac" else "s"
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    (out / "fig4.svg").write_text(render_svg(report, [
        ("A_s_subtotal", f"standardized sub-total accuracy (T in {unit})"),
        ("A_s_total", f"standardized total accuracy (T in {unit})"),
    ]))
    (out / "fig5.svg").write_text(render_svg(report, [
        ("A_subtotal", "sub-total accuracy"),
        ("A_total", "total accuracy"),
    ]))
    return report
