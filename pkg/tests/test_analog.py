import math

import numpy as np
import pytest

from spikebench.analog.crossbar import CrossbarConfig, map_model
from spikebench.analog.sim import (AnalogCostModel, activated_rows, analog_area, neuronal_area,
                                   noc_hops, plan_costs, simulate_analog, tile_counts)
from spikebench.errors import ContractError
from spikebench.mitigations import share_lif
from spikebench.report import report_json
from spikebench.runtime import SimOptions
from spikebench.workload import generate_synthetic_workload


@pytest.fixture(scope="module")
def mlp():
    return generate_synthetic_workload(2, "tiny-mlp")


def test_activated_rows_counts_bit_planes(mlp):
    model, ds = mlp
    plan = map_model(model, CrossbarConfig())
    x = np.zeros(16)
    x[0] = 3 / 255      # bits 0 and 1
    x[1] = 128 / 255    # bit 7
    assert activated_rows(plan.layers[0], model.layers[0], x) == 3
    s = np.zeros(32)
    s[:5] = 1
    assert activated_rows(plan.layers[1], model.layers[1], s) == 5


def test_conversion_counts_drive_adc_energy(mlp):
    model, _ = mlp
    cfg, cost = CrossbarConfig(), AnalogCostModel()
    plan = map_model(model, cfg)
    plans = plan_costs(model, plan, cost)
    m = plan.layers[1]
    conv = m.input_planes * m.row_tiles * m.slices * m.out
    assert plans[1].per_timestep["adc"] == pytest.approx(conv * cost.adc_energy(cfg.adc_bits))
    assert plans[1].per_row["crossbar"] == pytest.approx(m.col_tiles * m.slices * cost.e_xbar_read_pj)


def test_noc_hops_center_model():
    model, _ = generate_synthetic_workload(0, "tiny-mlp")
    plan = map_model(model, CrossbarConfig())
    cost = AnalogCostModel(xbars_per_tile=1)
    counts = tile_counts(plan, cost)
    assert counts == {0: 2, 1: 2}
    hops = noc_hops(plan, cost)
    # 4 tiles on a 2x2 grid, every tile is one row and one column from the center
    assert hops == {0: 1.0, 1: 1.0}


def test_neuronal_area_decreases_with_sharing(mlp):
    model, _ = mlp
    cost = AnalogCostModel()
    a1 = neuronal_area(model, cost)
    a2 = neuronal_area(share_lif(model, 2), cost)
    a4 = neuronal_area(share_lif(model, 4), cost)
    assert a1 > a2 > a4
    assert a1 / a2 <= 2 and a1 / a4 <= 4


def test_area_breakdown(mlp):
    model, _ = mlp
    cfg, cost = CrossbarConfig(), AnalogCostModel()
    plan = map_model(model, cfg)
    area = analog_area(model, plan, cost)
    assert area["crossbars"] == pytest.approx(plan.crossbars * cost.a_xbar_mm2)
    assert area["adcs"] == pytest.approx(plan.crossbars * math.ceil(cfg.cols / cost.cols_per_adc)
                                         * cost.a_adc_mm2_per_level * 256)


def test_cost_model_validation():
    with pytest.raises(ContractError):
        AnalogCostModel(e_adc_pj_per_level=-1.0)
    with pytest.raises(ContractError):
        AnalogCostModel(lif_lanes=0)


def test_simulate_analog_ideal_and_nonideal(mlp):
    model, ds = mlp
    ds = ds.subset(slice(0, 16))
    cfg = CrossbarConfig(read_noise_sigma=0.2, r_wire_ohm=2.0)
    ideal = simulate_analog(model, ds, cfg, AnalogCostModel())
    assert ideal.accuracy == {"ideal": 1.0, "nonideal": None}
    noisy = simulate_analog(model, ds, cfg, AnalogCostModel(), SimOptions(nonideal=True, seed=3))
    assert noisy.accuracy["ideal"] == 1.0
    assert 0.0 <= noisy.accuracy["nonideal"] <= 1.0
    again = simulate_analog(model, ds, cfg, AnalogCostModel(), SimOptions(nonideal=True, seed=3))
    assert report_json(noisy) == report_json(again)
    assert len(noisy.rows) == len(model.layers) * (model.timesteps + 1)
    assert noisy.diagnostics["crossbars"] == map_model(model, cfg).crossbars


def test_simulate_analog_rejects_foreign_plan(mlp):
    model, ds = mlp
    plan = map_model(model, CrossbarConfig(rows=32))
    with pytest.raises(ContractError):
        simulate_analog(model, ds, CrossbarConfig(), AnalogCostModel(), plan=plan)


def test_energy_grows_with_input_activity(mlp):
    model, ds = mlp
    cfg, cost = CrossbarConfig(), AnalogCostModel()
    dark = ds.subset(slice(0, 4))
    dark = type(dark)(dark.samples * 0.0, dark.labels)
    lit = ds.subset(slice(0, 4))
    e_dark = simulate_analog(model, dark, cfg, cost).energy_breakdown()["crossbar"]
    e_lit = simulate_analog(model, lit, cfg, cost).energy_breakdown()["crossbar"]
    assert e_lit > e_dark
