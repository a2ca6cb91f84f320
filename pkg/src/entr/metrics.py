"""Standardized accuracy, multiply-accumulate cost model and regime comparison.

The cost model counts MACs of convolution and linear layers only. A
backward pass through a layer is counted as twice its forward cost, and
only layers the gradient actually has to traverse are counted: everything
from the earliest trainable group up to the loss.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from .errors import ParameterError, ReportError

BACKWARD_FACTOR = 2


def standardized_accuracy(accuracy: float, time: float) -> float:
    """``sqrt(accuracy / time)``: accuracy per square-root unit of time."""
    if time <= 0 or not math.isfinite(time):
        raise ParameterError(f"time must be positive and finite, got {time}")
    if not 0 <= accuracy <= 1:
        raise ParameterError(f"accuracy must lie in [0, 1], got {accuracy}")
    return math.sqrt(accuracy / time)


@dataclass
class TimingRecord:
    label: str
    wall_seconds: float = 0.0
    mac_count: int = 0

    def __add__(self, other):
        return TimingRecord(self.label, self.wall_seconds + other.wall_seconds, self.mac_count + other.mac_count)


def mac_cost(model, resolution: int, batch_size: int = 1, backward: bool = False) -> int:
    """MACs of one forward pass over ``batch_size`` square images (plus backward if asked)."""
    if resolution < model.min_resolution:
        raise ParameterError(f"resolution {resolution} below model minimum {model.min_resolution}")
    rows = model.cost_profile(resolution, resolution)
    fwd = sum(m for _, _, m in rows)
    total = fwd * (1 + BACKWARD_FACTOR if backward else 1)
    return int(total) * int(batch_size)


def training_step_macs(model, resolution: int, batch_size: int) -> int:
    """Forward MACs plus backward MACs over the layers the gradient reaches."""
    rows = model.cost_profile(resolution, resolution)
    order = ("early", "late", "head")
    trainable = [g for g in order if not model.frozen[g]]
    fwd = sum(m for _, _, m in rows)
    if not trainable:
        return fwd * batch_size
    first = order.index(trainable[0])
    reached = sum(m for _, g, m in rows if order.index(g) >= first)
    return (fwd + BACKWARD_FACTOR * reached) * batch_size


def eval_macs(model, resolution: int, n_images: int) -> int:
    return mac_cost(model, resolution, 1) * n_images


# reports

REPORT_COLUMNS = (
    "dataset", "model", "regime", "seed", "time_unit",
    "A_subtotal", "A_total", "T", "A_s_subtotal", "A_s_total",
)


@dataclass
class EfficiencyReport:
    rows: list
    time_unit: str
    means: dict = field(default_factory=dict)
    best_regime: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EfficiencyReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ReportError(f"unexpected report columns {reader.fieldnames}")
        rows = []
        for r in reader:
            row = dict(r)
            row["seed"] = int(row["seed"])
            for c in ("A_subtotal", "A_total", "T", "A_s_subtotal", "A_s_total"):
                row[c] = float(row[c])
            rows.append(row)
        units = {r["time_unit"] for r in rows}
        if len(units) > 1:
            raise ReportError(f"mixed time units {sorted(units)}")
        return _aggregate(rows, units.pop() if units else "mac")

    def to_text(self) -> str:
        """Structured-text (JSON) form with rows, per-cell means and best regimes."""
        doc = {
            "time_unit": self.time_unit,
            "rows": self.rows,
            "means": [{"model": m, "regime": g, **v} for (m, g), v in sorted(self.means.items())],
            "best_regime": self.best_regime,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EfficiencyReport":
        doc = json.loads(text)
        return _aggregate(doc["rows"], doc["time_unit"])

    def __eq__(self, other):
        return isinstance(other, EfficiencyReport) and self.to_text() == other.to_text()


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _aggregate(rows, unit) -> EfficiencyReport:
    cells = {}
    for r in rows:
        cells.setdefault((r["model"], r["regime"]), []).append(r)
    means = {}
    for key, rs in cells.items():
        n = len(rs)
        means[key] = {
            c: math.fsum(r[c] for r in rs) / n
            for c in ("A_subtotal", "A_total", "T", "A_s_subtotal", "A_s_total")
        }
        means[key]["runs"] = n
    best = {}
    for model in sorted({m for m, _ in means}):
        candidates = sorted((g for m, g in means if m == model))
        best[model] = max(candidates, key=lambda g: (means[(model, g)]["A_s_total"], g))
    return EfficiencyReport(list(rows), unit, means, best)


def compare_regimes(records, time_unit: str | None = None) -> EfficiencyReport:
    """Tabulate standardized accuracies per run and per (model, regime) cell."""
    records = list(records)
    if not records:
        raise ReportError("no records to compare")
    if time_unit is None:
        units = {r.time_unit for r in records}
        if len(units) > 1:
            raise ReportError(f"records use inconsistent time units {sorted(units)}")
        time_unit = units.pop()
    rows = []
    for r in sorted(records, key=lambda r: (r.dataset, r.model, r.regime, r.seed)):
        t = r.T(time_unit)
        rows.append({
            "dataset": r.dataset,
            "model": r.model,
            "regime": r.regime,
            "seed": r.seed,
            "time_unit": time_unit,
            "A_subtotal": r.subtotal_accuracy,
            "A_total": r.total_accuracy,
            "T": t,
            "A_s_subtotal": standardized_accuracy(r.subtotal_accuracy, t),
            "A_s_total": standardized_accuracy(r.total_accuracy, t),
        })
    return _aggregate(rows, time_unit)
