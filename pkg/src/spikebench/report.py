"""Cost reports shared by both backends, plus JSON/CSV writers.

All energies are per-inference means in pJ and latencies in ns.  Rows are
keyed by (layer, timestep); timestep 0 holds one-off setup costs (e.g. weight
loads that tick-batching performs once per layer), so a report over T
timesteps has ``layers * (T + 1)`` rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContractError, LoadError

REPORT_VERSION = 1
DIGITAL_COMPONENTS = ("compute", "spad", "sram", "dram", "lif", "leakage", "entropy")
ANALOG_COMPONENTS = ("crossbar", "adc", "dac", "diff", "htree", "noc", "neuronal", "buffers",
                     "pool", "entropy")


@dataclass
class CostRow:
    layer: int
    name: str
    timestep: int
    energy_pj: dict[str, float]
    latency_ns: float

    @property
    def total_pj(self) -> float:
        return math.fsum(self.energy_pj.values())


@dataclass
class CostReport:
    backend: str
    components: tuple[str, ...]
    rows: list[CostRow]
    area_mm2: dict[str, float]
    accuracy: dict[str, float | None]
    avg_timesteps: float
    max_timesteps: int
    samples: int
    config: dict[str, Any] = field(default_factory=dict)
    run: dict[str, Any] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def energy_breakdown(self) -> dict[str, float]:
        return {c: math.fsum(r.energy_pj[c] for r in self.rows) for c in self.components}

    @property
    def energy_pj(self) -> float:
        return math.fsum(r.total_pj for r in self.rows)

    @property
    def latency_ns(self) -> float:
        return math.fsum(r.latency_ns for r in self.rows)

    @property
    def edp(self) -> float:
        """Energy-delay product of the per-inference means, pJ*ns."""
        return self.energy_pj * self.latency_ns

    @property
    def area_total_mm2(self) -> float:
        return math.fsum(self.area_mm2.values())

    def per_timestep_energy(self) -> np.ndarray:
        out = np.zeros(self.max_timesteps + 1)
        for r in self.rows:
            out[r.timestep] += r.total_pj
        return out

    def summary(self) -> str:
        acc = self.accuracy.get("nonideal")
        if acc is None:
            acc = self.accuracy.get("ideal")
        return (f"{self.backend}: accuracy={acc:.4f} energy={self.energy_pj:.6g} pJ "
                f"latency={self.latency_ns:.6g} ns edp={self.edp:.6g} pJ*ns "
                f"avg_timesteps={self.avg_timesteps:.4g}")

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "backend": self.backend,
            "samples": self.samples,
            "max_timesteps": self.max_timesteps,
            "avg_timesteps": self.avg_timesteps,
            "accuracy": dict(self.accuracy),
            "totals": {
                "energy_pj": self.energy_pj,
                "energy_breakdown_pj": self.energy_breakdown(),
                "latency_ns": self.latency_ns,
                "edp_pj_ns": self.edp,
                "area_mm2": self.area_total_mm2,
            },
            "area_mm2": dict(self.area_mm2),
            "rows": [{"layer": r.layer, "name": r.name, "timestep": r.timestep,
                      "energy_pj": dict(r.energy_pj), "latency_ns": r.latency_ns}
                     for r in self.rows],
            "config": self.config,
            "run": self.run,
            "diagnostics": self.diagnostics,
        }


def _close(a: float, b: float, rel: float = 1e-9) -> bool:
    return abs(a - b) <= rel * max(abs(a), abs(b), 1e-300)


def validate_report(d: dict) -> None:
    """Check that serialized totals equal the sum of the per-row entries."""
    rows = d["rows"]
    tot = d["totals"]
    comps = tot["energy_breakdown_pj"]
    for c, v in comps.items():
        s = math.fsum(r["energy_pj"][c] for r in rows)
        if not _close(s, v):
            raise ContractError(f"report total for {c!r} ({v}) != row sum ({s})")
    s = math.fsum(math.fsum(r["energy_pj"].values()) for r in rows)
    if not _close(s, tot["energy_pj"]):
        raise ContractError(f"report energy total {tot['energy_pj']} != row sum {s}")
    if not _close(math.fsum(comps.values()), tot["energy_pj"]):
        raise ContractError("energy breakdown does not add up to the total")
    s = math.fsum(r["latency_ns"] for r in rows)
    if not _close(s, tot["latency_ns"]):
        raise ContractError(f"report latency {tot['latency_ns']} != row sum {s}")
    if not _close(math.fsum(d["area_mm2"].values()), tot["area_mm2"]):
        raise ContractError("area breakdown does not add up to the total")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def report_json(report: CostReport) -> str:
    d = _jsonable(report.to_dict())
    validate_report(d)
    return json.dumps(d, sort_keys=True, indent=2) + "\n"


def report_csv(report: CostReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "name", "timestep", *report.components, "energy_pj", "latency_ns"])
    for r in report.rows:
        w.writerow([r.layer, r.name, r.timestep,
                    *(repr(float(r.energy_pj[c])) for c in report.components),
                    repr(float(r.total_pj)), repr(float(r.latency_ns))])
    return buf.getvalue()


def write_report(report: CostReport, path: str | Path, fmt: str = "json") -> Path:
    """Write ``report`` after validating its totals.

    ``csv`` writes the per-(layer, timestep) table; the JSON form carries
    totals, accuracy, area and the configuration snapshot.
    """
    path = Path(path)
    if fmt == "json":
        text = report_json(report)
    elif fmt == "csv":
        validate_report(_jsonable(report.to_dict()))
        text = report_csv(report)
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    path.write_text(text)
    return path


def read_report(path: str | Path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("version") != REPORT_VERSION:
        raise LoadError(f"unsupported report version {d.get('version')!r}")
    validate_report(d)
    return d
