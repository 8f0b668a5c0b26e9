"""SpikeSim-style cost model for a tiled crossbar accelerator.

Costs per weighted layer and timestep, with ``A`` activated (row, plane)
inputs, ``CT`` column tiles, ``S`` weight slices, ``B`` input bit planes and
``P`` output positions:

* crossbar / dac: A * CT * S row activations
* adc, diff, htree: one conversion per used column per crossbar access,
  P * B * row_tiles * S * out conversions
* noc: partial sums to the neuronal module and spikes back, Manhattan hops
  on the smallest square tile grid with the module at its center
* neuronal: LIF update plus u^t cache read/write per (shared) neuron
* buffers: dense input fetch from the tile buffer and output write-back
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..report import ANALOG_COMPONENTS, CostReport, CostRow
from ..runtime import SimOptions, mean_over_inputs, parallel_map, trace_input
from ..snn import LayerSpec, SnnModel, im2col
from .crossbar import CrossbarConfig, CrossbarMvm, LayerMapping, TilePlan, map_model


@dataclass(frozen=True)
class AnalogCostModel:
    e_xbar_read_pj: float = 0.4          # per activated row per crossbar
    e_adc_pj_per_level: float = 0.008    # conversion energy = this * 2**adc_bits
    e_dac_pj: float = 0.05               # per driven row per crossbar
    e_diff_pj: float = 0.08              # digital offset subtract / shift-add per conversion
    e_htree_pj_per_bit_per_hop: float = 0.02
    e_noc_pj_per_bit_per_hop: float = 0.1
    e_lif_pj: float = 0.4
    e_sram_pj_per_byte: float = 1.6      # u^t cache
    e_buffer_pj_per_bit: float = 0.05
    e_pool_pj_per_op: float = 0.05
    t_read_ns: float = 10.0              # one crossbar access incl. conversion
    t_lif_ns: float = 1.0
    lif_lanes: int = 64
    xbars_per_tile: int = 16
    cols_per_adc: int = 8
    membrane_bits: int = 16
    psum_bits: int = 16
    tile_buffer_bytes: int = 4096
    a_xbar_mm2: float = 4.0e-4
    a_adc_mm2_per_level: float = 1.2e-5
    a_lif_logic_mm2: float = 0.01
    a_sram_mm2_per_bit: float = 5.0e-7

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) >= 0:
                raise ContractError(f"{f.name} must be >= 0")
        for f in ("lif_lanes", "xbars_per_tile", "cols_per_adc", "membrane_bits", "psum_bits"):
            if getattr(self, f) < 1:
                raise ContractError(f"{f} must be >= 1")

    def adc_energy(self, bits: int) -> float:
        return self.e_adc_pj_per_level * 2 ** bits


def _htree_hops(cost: AnalogCostModel) -> int:
    return max(1, math.ceil(math.log2(cost.xbars_per_tile)))


def tile_counts(plan: TilePlan, cost: AnalogCostModel) -> dict[int, int]:
    return {i: math.ceil(m.crossbars / cost.xbars_per_tile) for i, m in plan.layers.items()}


def noc_hops(plan: TilePlan, cost: AnalogCostModel) -> dict[int, float]:
    """Mean Manhattan distance from each layer's tiles to the central neuronal module."""
    counts = tile_counts(plan, cost)
    total = sum(counts.values())
    side = math.ceil(math.sqrt(total))
    c = (side - 1) / 2
    hops, k = {}, 0
    for i in sorted(counts):
        d = [abs(j // side - c) + abs(j % side - c) for j in range(k, k + counts[i])]
        hops[i] = max(1.0, float(np.mean(d)))
        k += counts[i]
    return hops


def activated_rows(m: LayerMapping, layer: LayerSpec, x: np.ndarray) -> float:
    """Driven (row, input plane) pairs for one layer evaluation."""
    cols = im2col(layer, x)
    if m.input_levels == 1:
        return float(np.count_nonzero(cols))
    xi = np.clip(np.rint(cols * m.input_levels), 0, m.input_levels).astype(np.int64)
    return float(sum(np.count_nonzero((xi >> b) & 1) for b in range(m.input_planes)))


def _empty() -> dict[str, float]:
    return {c: 0.0 for c in ANALOG_COMPONENTS}


@dataclass
class AnalogLayerPlan:
    setup: dict[str, float]
    per_timestep: dict[str, float]   # content-independent part
    per_row: dict[str, float]        # energy per activated row (crossbar, dac)
    latency_ns: float


def plan_costs(model: SnnModel, plan: TilePlan, cost: AnalogCostModel) -> list[AnalogLayerPlan]:
    cfg = plan.config
    hops = noc_hops(plan, cost)
    h_hops = _htree_hops(cost)
    out = []
    for i, layer in enumerate(model.layers):
        setup, per, row = _empty(), _empty(), _empty()
        lat = 0.0
        if i == 0:
            setup["buffers"] += int(np.prod(layer.in_shape)) * 8 * cost.e_buffer_pj_per_bit
        if layer.kind == "avgpool":
            per["pool"] += int(np.prod(layer.in_shape)) * cost.e_pool_pj_per_op
        else:
            m = plan.layers[i]
            P, B = layer.positions, m.input_planes
            conv = P * B * m.row_tiles * m.slices * m.out
            per["adc"] += conv * cost.adc_energy(cfg.adc_bits)
            per["diff"] += conv * cost.e_diff_pj
            per["htree"] += conv * cost.psum_bits * h_hops * cost.e_htree_pj_per_bit_per_hop
            firing = layer.neuron is not None
            back = m.out * P if firing else 0
            per["noc"] += (m.row_tiles * m.out * P * cost.psum_bits + back) * hops[i] \
                * cost.e_noc_pj_per_bit_per_hop
            units = layer.shared_neurons if firing else int(np.prod(layer.out_shape))
            per["neuronal"] += units * (cost.e_lif_pj
                                        + 2 * cost.membrane_bits / 8 * cost.e_sram_pj_per_byte)
            out_bits = 1 if firing else cost.psum_bits
            per["buffers"] += (m.fan_in * P * B * m.col_tiles + m.out * P * out_bits) \
                * cost.e_buffer_pj_per_bit
            row["crossbar"] = m.col_tiles * m.slices * cost.e_xbar_read_pj
            row["dac"] = m.col_tiles * m.slices * cost.e_dac_pj
            lat = P * B * cost.t_read_ns + math.ceil(units / cost.lif_lanes) * cost.t_lif_ns
        out.append(AnalogLayerPlan(setup, per, row, lat))
    return out


def neuronal_area(model: SnnModel, cost: AnalogCostModel) -> float:
    """Fixed LIF logic plus the u^t cache sized by the (shared) neuron count."""
    entries = sum(l.shared_neurons if l.neuron is not None else int(np.prod(l.out_shape))
                  for l in model.layers if l.is_weighted)
    return cost.a_lif_logic_mm2 + entries * cost.membrane_bits * cost.a_sram_mm2_per_bit


def analog_area(model: SnnModel, plan: TilePlan, cost: AnalogCostModel) -> dict[str, float]:
    cfg = plan.config
    n_x = plan.crossbars
    adcs = n_x * math.ceil(cfg.cols / cost.cols_per_adc)
    tiles = sum(tile_counts(plan, cost).values())
    return {
        "crossbars": n_x * cost.a_xbar_mm2,
        "adcs": adcs * cost.a_adc_mm2_per_level * 2 ** cfg.adc_bits,
        "neuronal": neuronal_area(model, cost),
        "buffers": tiles * cost.tile_buffer_bytes * 8 * cost.a_sram_mm2_per_bit,
    }


COMPUTE_PARTS = ("crossbar", "adc", "dac", "diff")


def simulate_analog(model: SnnModel, dataset, config: CrossbarConfig, cost: AnalogCostModel,
                    options: SimOptions | None = None, plan: TilePlan | None = None) -> CostReport:
    """Run ``dataset`` through crossbar providers and integrate analog costs.

    The ideal pipeline always runs (for the ideal accuracy); with
    ``options.nonideal`` the noisy pipeline also runs and drives the costs.
    Input ``k`` draws its read noise from ``default_rng([seed, k])``.
    """
    opts = options or SimOptions()
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    plan = plan if plan is not None else map_model(model, config)
    if plan.config != config:
        raise ContractError("tile plan was built for a different crossbar configuration")
    T = model.timesteps

    def activity(i, layer, x):
        return activated_rows(plan.layers[i], layer, x) if layer.is_weighted else 0.0

    def run(nonideal):
        def one(idx):
            mvm = CrossbarMvm(plan, nonideal=nonideal,
                              rng=np.random.default_rng([opts.seed, idx]) if nonideal else None)
            tr = trace_input(model, dataset.samples[idx], mvm, opts.dt_snn_threshold, activity)
            return tr, mvm.stats
        return parallel_map(one, list(range(len(dataset))), opts.workers)

    def accuracy(res):
        return sum(int(tr.prediction == int(y)) for (tr, _), y in zip(res, dataset.labels)) \
            / len(dataset)

    ideal = run(False)
    noisy = run(True) if opts.nonideal else None
    deployed = noisy if noisy is not None else ideal
    traces = [tr for tr, _ in deployed]
    alive, rows_act = mean_over_inputs(traces, T)

    plans = plan_costs(model, plan, cost)
    rows = [CostRow(i, l.name, 0, dict(pl.setup), 0.0) for i, (l, pl) in
            enumerate(zip(model.layers, plans))]
    cls = model.classifier_index
    for t in range(T):
        step_rows = []
        for i, (layer, pl) in enumerate(zip(model.layers, plans)):
            e = {c: alive[t] * v for c, v in pl.per_timestep.items()}
            for c, v in pl.per_row.items():
                e[c] += v * rows_act[i, t]
            step_rows.append(CostRow(i, layer.name, t + 1, e, alive[t] * pl.latency_ns))
        if opts.charges_entropy:
            compute = sum(r.energy_pj[c] for r in step_rows for c in COMPUTE_PARTS)
            step_rows[cls].energy_pj["entropy"] = opts.entropy_overhead * compute
        rows.extend(step_rows)
    rows.sort(key=lambda r: (r.layer, r.timestep))

    sat = sum(s.saturated for _, s in deployed)
    clipped = sum(s.clipped_inputs for _, s in deployed)
    return CostReport(
        backend="analog",
        components=ANALOG_COMPONENTS,
        rows=rows,
        area_mm2=analog_area(model, plan, cost),
        accuracy={"ideal": accuracy(ideal), "nonideal": accuracy(noisy) if noisy is not None else None},
        avg_timesteps=float(np.mean([tr.timesteps_used for tr in traces])),
        max_timesteps=T,
        samples=len(dataset),
        config={"backend": "analog", "crossbar": dataclasses.asdict(config),
                "cost": dataclasses.asdict(cost)},
        run={"dt_snn_threshold": opts.dt_snn_threshold, "seed": opts.seed,
             "nonideal": opts.nonideal, "timesteps": T,
             "lif_share": [l.lif_share for l in model.layers],
             "encoding": sorted({m.encoding_mode for m in plan.layers.values()})},
        diagnostics={"crossbars": plan.crossbars,
                     "tiles": sum(tile_counts(plan, cost).values()),
                     "high_resistance_fraction": plan.high_resistance_fraction(),
                     "adc_saturated": sat, "dac_clipped_inputs": clipped,
                     "timesteps_used": [tr.timesteps_used for tr in traces]},
    )
