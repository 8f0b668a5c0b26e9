import math

import numpy as np
import pytest

from builders import random_cnn, random_mlp
from spikebench.digital import (DigitalAreaTable, DigitalEnergyTable, SystolicConfig,
                                compute_energy, gated_ops, lif_cost, memory_traffic,
                                simulate_digital, tile_layer, tile_model, weights_resident)
from spikebench.errors import ContractError
from spikebench.mitigations import share_lif
from spikebench.report import report_json
from spikebench.runtime import SimOptions
from spikebench.workload import Dataset, generate_synthetic_workload


def _loop_passes(k, cout, R, C):
    """Explicit pass enumeration: (rows used, cols used) per pass."""
    out = []
    for r0 in range(0, k, R):
        for c0 in range(0, cout, C):
            out.append((min(R, k - r0), min(C, cout - c0)))
    return out


@pytest.mark.parametrize("k,cout,R,C", [(12, 16, 4, 8), (13, 5, 4, 2), (3, 3, 8, 8), (64, 10, 16, 8)])
def test_tiling_matches_loop_enumeration(k, cout, R, C):
    model = random_mlp(0, sizes=(k, cout, 3))
    nest = tile_layer(model.layers[0], SystolicConfig(pe_rows=R, pe_cols=C, lif_units=R * C))
    passes = _loop_passes(k, cout, R, C)
    assert nest.passes == len(passes) == math.ceil(k / R) * math.ceil(cout / C)
    assert nest.ops == sum(r * c for r, c in passes) == k * cout
    assert nest.weight_bytes == sum(r * c for r, c in passes)
    assert nest.latency_cycles == len(passes) * (R + C + 1 - 2)


def test_conv_tiling_streams_positions():
    model = random_cnn(0)
    nest = tile_model(model, SystolicConfig(pe_rows=8, pe_cols=2, lif_units=16))[0]
    assert nest.positions == 36 and nest.fan_in == 18 and nest.out_channels == 4
    assert nest.ops == 36 * 18 * 4
    assert nest.input_bits == 8 and nest.external_input


@pytest.mark.parametrize("dataflow", ["output_stationary", "weight_stationary"])
def test_weight_traffic_scales_with_timesteps_when_not_resident(dataflow):
    nest = tile_layer(random_mlp(0, sizes=(40, 24, 3)).layers[0], SystolicConfig())
    W = nest.weight_bytes
    for T in (1, 2, 4, 8):
        tr = memory_traffic(nest, dataflow, T)
        assert tr.weight_bytes("dram") == T * W
        assert tr.weight_bytes("sram") == 2 * T * W


def test_resident_weights_are_loaded_once():
    nest = tile_layer(random_mlp(0).layers[0], SystolicConfig())
    tr = memory_traffic(nest, "output_stationary", 4, weights_resident=True)
    assert tr.weight_bytes("dram") == nest.weight_bytes


def test_tick_batch_weight_traffic_is_timestep_invariant():
    nest = tile_layer(random_mlp(0, sizes=(40, 24, 3)).layers[0], SystolicConfig())
    ref = memory_traffic(nest, "tick_batch_ws", 1)
    for T in (2, 4, 16):
        tr = memory_traffic(nest, "tick_batch_ws", T)
        for lv in ("dram", "sram", "spad"):
            assert tr.weight_bytes(lv) == ref.weight_bytes(lv)


def test_spike_payload_does_not_change_traffic():
    nest = tile_layer(random_mlp(0).layers[1], SystolicConfig())
    rng = np.random.default_rng(0)
    a = memory_traffic(nest, "weight_stationary", 3, [rng.integers(0, 2, 16) for _ in range(3)])
    b = memory_traffic(nest, "weight_stationary", 3, [np.zeros(16)] * 3)
    assert a.setup == b.setup and a.per_timestep == b.per_timestep
    with pytest.raises(ContractError):
        memory_traffic(nest, "row_stationary", 3)


def test_gated_ops_and_compute_energy():
    model = random_mlp(0)
    layer = model.layers[1]
    x = np.zeros(16)
    x[[1, 5, 9]] = 1
    assert gated_ops(layer, x) == 3 * 8
    nest = tile_layer(layer, SystolicConfig())
    table = DigitalEnergyTable()
    assert compute_energy(nest, 24, table) == pytest.approx(24 * table.e_ac_pj)
    with pytest.raises(ContractError):
        compute_energy(nest, nest.ops + 1, table)


def test_energy_table_ordering():
    with pytest.raises(ContractError):
        DigitalEnergyTable(e_dram_access_pj_per_byte=0.5)
    with pytest.raises(ContractError):
        DigitalEnergyTable(e_ac_pj=-1.0)


def test_lif_units_shrink_with_sharing():
    model, _ = generate_synthetic_workload(0, "tiny-mlp")
    cfg, table = SystolicConfig(), DigitalEnergyTable()
    base = lif_cost(model, cfg, table)
    for n in (2, 4):
        c = lif_cost(share_lif(model, n), cfg, table)
        assert base.lif_units == n * c.lif_units
        assert c.lif_pj == pytest.approx(base.lif_pj / n, rel=1e-12)


def test_weights_resident_threshold():
    model = random_mlp(0)
    total = sum(l.weights.q.size for l in model.layers)
    assert weights_resident(model, SystolicConfig(sram_bytes=total))
    assert not weights_resident(model, SystolicConfig(sram_bytes=total - 1))


@pytest.fixture(scope="module")
def cnn_workload():
    return generate_synthetic_workload(1, "tiny-cnn")


def test_simulate_digital_report(cnn_workload):
    model, ds = cnn_workload
    rep = simulate_digital(model, ds, SystolicConfig(), DigitalEnergyTable(),
                           area=DigitalAreaTable())
    assert rep.accuracy["ideal"] == 1.0
    assert len(rep.rows) == len(model.layers) * (model.timesteps + 1)
    assert rep.energy_pj > 0 and rep.latency_ns > 0
    assert rep.edp == pytest.approx(rep.energy_pj * rep.latency_ns)
    assert all(r.latency_ns == 0 for r in rep.rows if r.timestep == 0)
    assert rep.energy_breakdown()["entropy"] == 0
    report_json(rep)


@pytest.mark.parametrize("dataflow", ["output_stationary", "weight_stationary", "tick_batch_ws"])
def test_simulate_digital_dataflows_agree_on_function(cnn_workload, dataflow):
    model, ds = cnn_workload
    ds = ds.subset(slice(0, 8))
    rep = simulate_digital(model, ds, SystolicConfig(dataflow=dataflow), DigitalEnergyTable())
    assert rep.accuracy["ideal"] == 1.0
    assert rep.run["dt_snn_threshold"] is None


def test_worker_count_does_not_change_report(cnn_workload):
    model, ds = cnn_workload
    ds = ds.subset(slice(0, 12))
    a = simulate_digital(model, ds, SystolicConfig(), DigitalEnergyTable(), SimOptions(workers=1))
    b = simulate_digital(model, ds, SystolicConfig(), DigitalEnergyTable(), SimOptions(workers=4))
    assert report_json(a) == report_json(b)


def test_empty_dataset_rejected(cnn_workload):
    model, ds = cnn_workload
    with pytest.raises(ContractError):
        simulate_digital(model, Dataset(ds.samples[:0], ds.labels[:0]), SystolicConfig(),
                         DigitalEnergyTable())
