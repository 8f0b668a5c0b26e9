"""Systolic-array (SATA-style) SNN inference cost model.

Each weighted layer is unrolled to a (fan_in x out_channels) reduction and
tiled onto the PE array: fan-in along PE rows, output channels along PE
columns.  Every pass streams all output positions through the array.  The
dataflow decides how often weights travel through the DRAM -> SRAM -> spad
hierarchy; spikes are fetched densely (sparsity only gates PE compute).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .report import DIGITAL_COMPONENTS, CostReport, CostRow
from .runtime import SimOptions, mean_over_inputs, parallel_map, trace_input
from .snn import LayerSpec, SnnModel, exact_mvm, im2col

DATAFLOWS = ("output_stationary", "weight_stationary", "tick_batch_ws")
LEVELS = ("dram", "sram", "spad")


@dataclass(frozen=True)
class SystolicConfig:
    pe_rows: int = 16
    pe_cols: int = 8
    spad_bytes_per_pe: int = 64
    sram_bytes: int = 256 * 1024
    dataflow: str = "output_stationary"
    lif_units: int = 128
    membrane_bits: int = 16
    act_bits: int = 8        # non-binary activations (direct input, pooled spikes)
    psum_bits: int = 16

    def __post_init__(self):
        for f in ("pe_rows", "pe_cols", "spad_bytes_per_pe", "sram_bytes", "lif_units",
                  "membrane_bits", "act_bits", "psum_bits"):
            if getattr(self, f) <= 0:
                raise ContractError(f"{f} must be > 0")
        if self.dataflow not in DATAFLOWS:
            raise ContractError(f"dataflow must be one of {DATAFLOWS}, got {self.dataflow!r}")
        if self.lif_units > self.pe_rows * self.pe_cols:
            raise ContractError("lif_units cannot exceed the PE count")

    @property
    def n_pe(self) -> int:
        return self.pe_rows * self.pe_cols


@dataclass(frozen=True)
class DigitalEnergyTable:
    e_ac_pj: float = 0.03
    e_spad_access_pj_per_byte: float = 0.05
    e_sram_access_pj_per_byte: float = 1.0
    e_dram_access_pj_per_byte: float = 40.0
    e_lif_update_pj: float = 0.1
    leakage_pw_per_pe: float = 1.0e5
    clock_ghz: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) >= 0:
                raise ContractError(f"{f.name} must be >= 0")
        if self.clock_ghz <= 0:
            raise ContractError("clock_ghz must be > 0")
        if not (self.e_dram_access_pj_per_byte > self.e_sram_access_pj_per_byte
                > self.e_spad_access_pj_per_byte):
            raise ContractError("per-byte access energy must satisfy dram > sram > spad")


@dataclass(frozen=True)
class DigitalAreaTable:
    a_pe_mm2: float = 0.0008
    a_sram_mm2_per_byte: float = 1.2e-6
    a_lif_mm2_per_bit: float = 2.0e-6

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) >= 0:
                raise ContractError(f"{f.name} must be >= 0")


# ----------------------------------------------------------------------------
# tiling

@dataclass(frozen=True)
class PassTile:
    rows: int        # fan-in slice mapped on PE rows
    cols: int        # output channels mapped on PE columns
    positions: int   # output positions streamed through the pass
    count: int       # passes with this shape

    @property
    def ops(self) -> int:
        return self.rows * self.cols * self.positions


@dataclass(frozen=True)
class LoopNest:
    index: int
    fan_in: int
    out_channels: int
    positions: int
    array: tuple[int, int]
    row_tiles: int
    col_tiles: int
    tiles: tuple[PassTile, ...]
    weight_bits: int
    input_bits: int
    in_elems: int
    membrane_entries: int
    output_bits: int
    external_input: bool = False

    @property
    def passes(self) -> int:
        return sum(t.count for t in self.tiles)

    @property
    def ops(self) -> int:
        return sum(t.ops * t.count for t in self.tiles)

    @property
    def weight_bytes(self) -> float:
        return sum(t.rows * t.cols * t.count for t in self.tiles) * self.weight_bits / 8

    @property
    def latency_cycles(self) -> int:
        """Per timestep: passes serialized, each with fill/drain."""
        r, c = self.array
        return sum(t.count * (r + c + t.positions - 2) for t in self.tiles)


def _splits(n: int, size: int) -> list[tuple[int, int]]:
    full, rem = divmod(n, size)
    out = [(size, full)] if full else []
    if rem:
        out.append((rem, 1))
    return out


def tile_layer(layer: LayerSpec, config: SystolicConfig, index: int = 0, input_bits: int = 1,
               external_input: bool = False) -> LoopNest:
    if not layer.is_weighted:
        raise ContractError("only weighted layers are tiled onto the PE array")
    k, cout, p = layer.fan_in, layer.out_channels, layer.positions
    if min(k, cout, p) <= 0:
        raise ContractError("degenerate layer with a zero dimension")
    R, C = config.pe_rows, config.pe_cols
    tiles = tuple(PassTile(kr, cc, p, nr * nc)
                  for kr, nr in _splits(k, R) for cc, nc in _splits(cout, C))
    if layer.neuron is not None:
        entries, out_bits = layer.shared_neurons, 1
    else:
        entries, out_bits = int(np.prod(layer.out_shape)), config.psum_bits
    return LoopNest(index, k, cout, p, (R, C), math.ceil(k / R), math.ceil(cout / C), tiles,
                    layer.weight_bits, input_bits, int(np.prod(layer.in_shape)), entries,
                    out_bits, external_input)


def input_bits_per_layer(model: SnnModel, config: SystolicConfig) -> list[int]:
    """1 for binary spike inputs, act_bits for the direct input and pooled maps."""
    bits, cur = [], config.act_bits
    for layer in model.layers:
        bits.append(cur)
        if layer.kind == "avgpool":
            cur = config.act_bits
        elif layer.neuron is not None:
            cur = 1
    return bits


def tile_model(model: SnnModel, config: SystolicConfig) -> dict[int, LoopNest]:
    bits = input_bits_per_layer(model, config)
    return {i: tile_layer(l, config, i, bits[i], external_input=(i == 0))
            for i, l in enumerate(model.layers) if l.is_weighted}


# ----------------------------------------------------------------------------
# memory traffic

def _zero_levels() -> dict[str, dict[str, float]]:
    return {lv: {} for lv in LEVELS}


def _add(d, level, cat, nbytes):
    d[level][cat] = d[level].get(cat, 0.0) + float(nbytes)


@dataclass
class Traffic:
    """Byte counts per memory level and data category."""

    setup: dict[str, dict[str, float]]
    per_timestep: dict[str, dict[str, float]]
    timesteps: int

    def level(self, level: str, category: str | None = None, timesteps: int | None = None) -> float:
        T = self.timesteps if timesteps is None else timesteps

        def pick(d):
            return sum(d[level].values()) if category is None else d[level].get(category, 0.0)

        return pick(self.setup) + T * pick(self.per_timestep)

    def weight_bytes(self, level: str) -> float:
        return self.level(level, "weights")

    def energy_pj(self, table: DigitalEnergyTable, part: str = "all") -> dict[str, float]:
        src = {"setup": [self.setup], "per_timestep": [self.per_timestep]}.get(part)
        out = {}
        e = {"dram": table.e_dram_access_pj_per_byte, "sram": table.e_sram_access_pj_per_byte,
             "spad": table.e_spad_access_pj_per_byte}
        for lv in LEVELS:
            if src is None:
                out[lv] = self.level(lv) * e[lv]
            else:
                out[lv] = sum(src[0][lv].values()) * e[lv]
        return out


def memory_traffic(nest: LoopNest, dataflow: str, timesteps: int,
                   spikes: Sequence | None = None, *, weights_resident: bool = False,
                   config: SystolicConfig | None = None) -> Traffic:
    """Bytes moved for one layer and one inference of ``timesteps`` steps.

    ``spikes`` (the per-timestep layer inputs) may be given but never changes
    the result: activations are fetched densely, 1 bit per spike element.
    ``weights_resident`` means all model weights fit the SRAM, so OS/WS only
    bring them from DRAM once.
    """
    if dataflow not in DATAFLOWS:
        raise ContractError(f"unknown dataflow {dataflow!r}")
    if timesteps < 1:
        raise ContractError("timesteps must be >= 1")
    if spikes is not None and len(spikes) > timesteps:
        raise ContractError("more spike tensors than timesteps")
    cfg = config or SystolicConfig()
    W = nest.weight_bytes
    setup, per = _zero_levels(), _zero_levels()

    if nest.external_input:
        in_bytes = nest.in_elems * cfg.act_bits / 8
        _add(setup, "dram", "inputs", in_bytes)
        _add(setup, "sram", "inputs", in_bytes)

    if dataflow == "tick_batch_ws":
        # timestep loop innermost: each pass tile is pinned once for all T
        for lv in ("dram", "spad"):
            _add(setup, lv, "weights", W)
        _add(setup, "sram", "weights", 2 * W)   # write from DRAM, read to the array
    else:
        if weights_resident:
            _add(setup, "dram", "weights", W)
            _add(setup, "sram", "weights", W)
            _add(per, "sram", "weights", W)
        else:
            _add(per, "dram", "weights", W)
            _add(per, "sram", "weights", 2 * W)
        if dataflow == "weight_stationary":
            _add(per, "spad", "weights", W)

    # dense activation fetch: every pass streams its fan-in slice for all positions
    _add(per, "sram", "inputs", nest.col_tiles * nest.fan_in * nest.positions * nest.input_bits / 8)
    _add(per, "sram", "outputs", nest.out_channels * nest.positions * nest.output_bits / 8)
    _add(per, "sram", "membrane", 2 * nest.membrane_entries * cfg.membrane_bits / 8)

    psum = cfg.psum_bits / 8
    if dataflow == "output_stationary":
        _add(per, "spad", "psum", nest.ops * 2 * psum)
    else:
        # operand reads of the pinned weights, not weight movement
        _add(per, "spad", "operands", nest.ops * nest.weight_bits / 8)
        _add(per, "spad", "psum", nest.row_tiles * nest.out_channels * nest.positions * 2 * psum)
    return Traffic(setup, per, timesteps)


def weights_resident(model: SnnModel, config: SystolicConfig) -> bool:
    total = sum(l.weights.q.size * l.weight_bits / 8 for l in model.layers if l.is_weighted)
    return total <= config.sram_bytes


# ----------------------------------------------------------------------------
# compute and LIF

def gated_ops(layer: LayerSpec, x: np.ndarray) -> int:
    """AC operations whose activation operand is non-zero."""
    if layer.kind == "avgpool":
        return int(np.count_nonzero(x))
    return int(np.count_nonzero(im2col(layer, x))) * layer.out_channels


def compute_energy(nest: LoopNest, active_ops, table: DigitalEnergyTable) -> float:
    """e_ac times the non-zero-operand op count; zero-operand ops are skipped."""
    ops = np.asarray(active_ops, dtype=np.float64)
    if np.any(ops < 0) or np.any(ops > nest.ops):
        raise ContractError("active op count outside [0, layer ops]")
    return float(table.e_ac_pj * ops.sum())


@dataclass
class LifCost:
    lif_pj: float
    lif_units: int
    lif_area_units: int
    updates: int


def lif_cost(model: SnnModel, config: SystolicConfig, table: DigitalEnergyTable,
             timesteps: float | None = None) -> LifCost:
    """LIF energy and hardware units under C#n sharing.

    A layer with sharing n keeps neurons/n membrane entries and needs
    lif_units/n physical units; energy is proportional to updates.
    """
    spiking = [l for l in model.layers if l.neuron is not None]
    T = model.timesteps if timesteps is None else timesteps
    n_min = min((l.lif_share for l in spiking), default=1)
    if config.lif_units % n_min:
        raise ContractError(f"lif_units {config.lif_units} not divisible by sharing factor {n_min}")
    units = config.lif_units // n_min
    per_step = sum(l.shared_neurons for l in spiking)
    return LifCost(table.e_lif_update_pj * per_step * T, units, units * config.membrane_bits,
                   int(round(per_step * T)))


def digital_area(model: SnnModel, config: SystolicConfig, area: DigitalAreaTable,
                 table: DigitalEnergyTable | None = None) -> dict[str, float]:
    lif = lif_cost(model, config, table or DigitalEnergyTable())
    return {
        "pe_array": config.n_pe * area.a_pe_mm2,
        "spad": config.n_pe * config.spad_bytes_per_pe * area.a_sram_mm2_per_byte,
        "sram": config.sram_bytes * area.a_sram_mm2_per_byte,
        "lif": lif.lif_area_units * area.a_lif_mm2_per_bit,
    }


# ----------------------------------------------------------------------------
# end-to-end

@dataclass
class DigitalLayerPlan:
    """Content-independent per-layer costs: setup and per-timestep dense parts."""

    setup: dict[str, float]
    per_timestep: dict[str, float]
    latency_ns: float
    traffic: Traffic | None = field(default=None, repr=False)


def _empty() -> dict[str, float]:
    return {c: 0.0 for c in DIGITAL_COMPONENTS}


def plan_layers(model: SnnModel, config: SystolicConfig, table: DigitalEnergyTable,
                timesteps: int | None = None) -> list[DigitalLayerPlan]:
    T = timesteps or model.timesteps
    nests = tile_model(model, config)
    resident = weights_resident(model, config)
    plans = []
    for i, layer in enumerate(model.layers):
        setup, per = _empty(), _empty()
        if i in nests:
            tr = memory_traffic(nests[i], config.dataflow, T, weights_resident=resident,
                                config=config)
            for lv, e in tr.energy_pj(table, "setup").items():
                setup[lv] += e
            for lv, e in tr.energy_pj(table, "per_timestep").items():
                per[lv] += e
            cycles = nests[i].latency_cycles
        else:
            tr = None
            in_elems, out_elems = int(np.prod(layer.in_shape)), int(np.prod(layer.out_shape))
            per["sram"] += (in_elems * 1 + out_elems * config.act_bits) / 8 \
                * table.e_sram_access_pj_per_byte
            cycles = math.ceil(in_elems / config.n_pe)
        if layer.neuron is not None:
            per["lif"] += table.e_lif_update_pj * layer.shared_neurons
        lat = cycles / table.clock_ghz
        per["leakage"] += table.leakage_pw_per_pe * config.n_pe * lat * 1e-9
        plans.append(DigitalLayerPlan(setup, per, lat, tr))
    return plans


def simulate_digital(model: SnnModel, dataset, config: SystolicConfig,
                     table: DigitalEnergyTable, options: SimOptions | None = None,
                     area: DigitalAreaTable | None = None) -> CostReport:
    """Energy, latency and area of running ``dataset`` on the PE array.

    Functional results come from exact arithmetic.  Costs of timestep t are
    charged only for inputs still running at t (DT-SNN early exit).
    """
    opts = options or SimOptions()
    area = area or DigitalAreaTable()
    T = model.timesteps
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    plans = plan_layers(model, config, table)

    def one(idx):
        return trace_input(model, dataset.samples[idx], exact_mvm, opts.dt_snn_threshold,
                           lambda i, layer, x: gated_ops(layer, x))

    traces = parallel_map(one, list(range(len(dataset))), opts.workers)
    alive, ops = mean_over_inputs(traces, T)
    correct = sum(int(tr.prediction == int(y)) for tr, y in zip(traces, dataset.labels))

    rows = []
    cls = model.classifier_index
    for i, (layer, pl) in enumerate(zip(model.layers, plans)):
        rows.append(CostRow(i, layer.name, 0, dict(pl.setup), 0.0))
    for t in range(T):
        compute_t = table.e_ac_pj * ops[:, t]
        for i, (layer, pl) in enumerate(zip(model.layers, plans)):
            e = {c: alive[t] * v for c, v in pl.per_timestep.items()}
            e["compute"] = float(compute_t[i])
            if opts.charges_entropy and i == cls:
                e["entropy"] = opts.entropy_overhead * float(compute_t.sum())
            rows.append(CostRow(i, layer.name, t + 1, e, alive[t] * pl.latency_ns))
    rows.sort(key=lambda r: (r.layer, r.timestep))

    lif = lif_cost(model, config, table)
    acc = correct / len(dataset)
    return CostReport(
        backend="digital",
        components=DIGITAL_COMPONENTS,
        rows=rows,
        area_mm2=digital_area(model, config, area, table),
        accuracy={"ideal": acc, "nonideal": None},
        avg_timesteps=float(np.mean([tr.timesteps_used for tr in traces])),
        max_timesteps=T,
        samples=len(dataset),
        config={"backend": "digital", "array": dataclasses.asdict(config),
                "energy": dataclasses.asdict(table), "area": dataclasses.asdict(area)},
        run={"dt_snn_threshold": opts.dt_snn_threshold, "seed": opts.seed,
             "timesteps": T, "lif_share": [l.lif_share for l in model.layers]},
        diagnostics={"lif_units": lif.lif_units, "lif_area_units": lif.lif_area_units,
                     "weights_resident": weights_resident(model, config),
                     "timesteps_used": [tr.timesteps_used for tr in traces]},
    )
