"""Run records: the per-run unit of persistence and reporting.

A record is stored as one JSON document (``*.record``) with sorted keys, so
two runs with equal content produce equal bytes. Fields ending in
``wall_seconds`` hold wall-clock measurements and are the only
machine-dependent values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
GMAC = 1e9
TIME_UNITS = ("mac", "wall")


@dataclass
class PhaseRecord:
    name: str
    stage: str
    resolution: int
    epochs: int
    steps: int = 0
    losses: list = field(default_factory=list)
    mac_count: int = 0
    wall_seconds: float = 0.0
    skipped: bool = False


@dataclass
class RunRecord:
    regime: str
    model: str
    seed: int
    dataset: str = ""
    time_unit: str = "mac"
    base_lr: float = 0.0
    phases: list = field(default_factory=list)
    subtotal_accuracy: float = 0.0
    total_accuracy: float = 0.0
    subtotal_after_phase: int = -1
    mac_total: int = 0
    wall_seconds: float = 0.0
    checkpoint_sha256: str = ""
    schema_version: int = SCHEMA_VERSION

    # time in the record's unit: giga-MACs or seconds
    def T(self, unit: str | None = None) -> float:
        unit = unit or self.time_unit
        if unit == "mac":
            return self.mac_total / GMAC
        if unit == "wall":
            return self.wall_seconds
        raise ValueError(f"unknown time unit {unit!r}")

    def standardized(self, unit: str | None = None) -> dict:
        from .metrics import standardized_accuracy

        t = self.T(unit)
        return {
            "subtotal": standardized_accuracy(self.subtotal_accuracy, t),
            "total": standardized_accuracy(self.total_accuracy, t),
        }

    @property
    def A_s_subtotal(self) -> float:
        return self.standardized()["subtotal"]

    @property
    def A_s_total(self) -> float:
        return self.standardized()["total"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T"] = {u: self.T(u) for u in TIME_UNITS}
        d["A_s"] = {u: self.standardized(u) for u in TIME_UNITS}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = {k: v for k, v in d.items() if k not in ("T", "A_s")}
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {d.get('schema_version')}")
        d["phases"] = [PhaseRecord(**p) for p in d.get("phases", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(Path(path).read_text())

    def deterministic_view(self) -> dict:
        """The record without wall-clock fields, for equality checks across reruns."""
        d = self.to_dict()
        d.pop("wall_seconds")
        d["T"].pop("wall")
        d["A_s"].pop("wall")
        for p in d["phases"]:
            p.pop("wall_seconds")
        return d

    def validate(self) -> None:
        for name in ("subtotal_accuracy", "total_accuracy"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.mac_total <= 0 or not math.isfinite(self.wall_seconds):
            raise ValueError("record has no positive time")
