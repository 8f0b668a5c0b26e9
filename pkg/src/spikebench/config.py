"""Hardware configuration files (YAML).

A file declares ``backend: digital`` or ``backend: analog`` plus one section
per parameter table.  Every field of every section is required, so a config
file is a complete, reviewable record of the hardware that was simulated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .analog.crossbar import CrossbarConfig
from .analog.sim import AnalogCostModel
from .digital import DigitalAreaTable, DigitalEnergyTable, SystolicConfig
from .errors import ContractError, LoadError

SECTIONS = {
    "digital": {"array": SystolicConfig, "energy": DigitalEnergyTable, "area": DigitalAreaTable},
    "analog": {"crossbar": CrossbarConfig, "cost": AnalogCostModel},
}


@dataclass(frozen=True)
class DigitalHardware:
    array: SystolicConfig
    energy: DigitalEnergyTable
    area: DigitalAreaTable
    backend: str = "digital"


@dataclass(frozen=True)
class AnalogHardware:
    crossbar: CrossbarConfig
    cost: AnalogCostModel
    backend: str = "analog"


HardwareConfig = DigitalHardware | AnalogHardware


def _build(section: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ContractError(f"section {section!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ContractError(f"unknown key {section}.{unknown[0]}")
    missing = [n for n in fields if n not in raw]
    if missing:
        raise ContractError(f"missing key {section}.{missing[0]}")
    vals = {}
    for name, f in fields.items():
        v = raw[name]
        default = f.default
        if isinstance(default, bool) or isinstance(default, str):
            if not isinstance(v, type(default)):
                raise ContractError(f"{section}.{name} must be a {type(default).__name__}")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ContractError(f"{section}.{name} must be an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ContractError(f"{section}.{name} must be a number")
            v = float(v)
        vals[name] = v
    try:
        return cls(**vals)
    except ContractError as exc:
        raise ContractError(f"section {section!r}: {exc}") from exc


def hardware_from_dict(d: Any) -> HardwareConfig:
    if not isinstance(d, dict):
        raise ContractError("hardware config must be a mapping")
    backend = d.get("backend")
    if backend not in SECTIONS:
        raise ContractError(f"backend must be 'digital' or 'analog', got {backend!r}")
    extra = sorted(set(d) - set(SECTIONS[backend]) - {"backend"})
    if extra:
        raise ContractError(f"unknown section {extra[0]!r} for backend {backend}")
    parts = {}
    for name, cls in SECTIONS[backend].items():
        if name not in d:
            raise ContractError(f"missing section {name!r} for backend {backend}")
        parts[name] = _build(name, cls, d[name])
    return DigitalHardware(**parts) if backend == "digital" else AnalogHardware(**parts)


def hardware_to_dict(hw: HardwareConfig) -> dict:
    out = {"backend": hw.backend}
    for name in SECTIONS[hw.backend]:
        out[name] = dataclasses.asdict(getattr(hw, name))
    return out


def load_hardware_config(path: str | Path) -> HardwareConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LoadError(f"cannot read hardware config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise LoadError(f"hardware config {path} is not valid YAML: {exc}") from exc
    return hardware_from_dict(data)


def default_config_path(backend: str) -> Path:
    if backend not in SECTIONS:
        raise ContractError(f"unknown backend {backend!r}")
    return Path(str(resources.files("spikebench") / "configs" / f"{backend}.yaml"))


def default_hardware(backend: str) -> HardwareConfig:
    return load_hardware_config(default_config_path(backend))
