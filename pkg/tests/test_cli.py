import csv
import io
import json

import pytest
import yaml

from spikebench.cli import main
from spikebench.config import default_config_path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--seed", "3", "--profile", "tiny-mlp", "--samples-per-class", "4",
                 "--out", str(d / "w")]) == 0
    return d


def _io(workdir, backend="digital"):
    return ["--model", str(workdir / "w" / "model.json"), "--data", str(workdir / "w" / "data.snnb"),
            "--hw", str(default_config_path(backend))]


def test_gen_is_deterministic(tmp_path, workdir):
    assert main(["gen", "--seed", "3", "--profile", "tiny-mlp", "--samples-per-class", "4",
                 "--out", str(tmp_path)]) == 0
    for name in ("model.json", "data.snnb"):
        assert (tmp_path / name).read_bytes() == (workdir / "w" / name).read_bytes()


def test_simulate_is_byte_deterministic(workdir):
    outs = []
    for k in range(2):
        p = workdir / f"sim{k}.json"
        assert main(["simulate", *_io(workdir), "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]
    d = json.loads(outs[0])
    assert {"version", "backend", "totals", "rows", "area_mm2", "accuracy", "config", "run"} <= set(d)
    assert {"energy_pj", "energy_breakdown_pj", "latency_ns", "edp_pj_ns", "area_mm2"} <= set(d["totals"])


def test_analog_nonideal_reports_both_accuracies(workdir):
    p = workdir / "analog.json"
    assert main(["simulate", *_io(workdir, "analog"), "--nonideal", "--out", str(p)]) == 0
    acc = json.loads(p.read_text())["accuracy"]
    assert acc["ideal"] is not None and acc["nonideal"] is not None


def test_csv_output(workdir):
    p = workdir / "sim.csv"
    assert main(["simulate", *_io(workdir), "--format", "csv", "--out", str(p)]) == 0
    rows = list(csv.DictReader(io.StringIO(p.read_text())))
    assert rows and {"layer", "timestep", "energy_pj", "latency_ns"} <= set(rows[0])


def test_sweep_rows(workdir):
    p = workdir / "sweep.csv"
    assert main(["sweep", *_io(workdir), "--axis", "timesteps", "--values", "1,2,4",
                 "--out", str(p)]) == 0
    rows = list(csv.DictReader(io.StringIO(p.read_text())))
    assert [r["timesteps"] for r in rows] == ["1", "2", "4"]
    e = [float(r["energy_pj"]) for r in rows]
    assert e[0] < e[1] < e[2]


def test_estimate(workdir, capsys):
    p = workdir / "est.json"
    assert main(["estimate", *_io(workdir), "--out", str(p)]) == 0
    d = json.loads(p.read_text())
    assert 0 <= d["sparsity"] <= 1
    assert d["e_est_pj"] == pytest.approx(d["flops"] * d["timesteps"] * (1 - d["sparsity"])
                                          * d["e_ac_pj"])
    assert d["divergence_ratio"] > 1
    assert "E_est" in capsys.readouterr().out


def test_estimate_zero_energy_per_op(workdir):
    args = _io(workdir)[:4]
    assert main(["estimate", *args, "--e-ac", "0"]) == 0
    assert main(["estimate", *args, "--e-ac", "-1"]) == 1


def test_mitigate_share(workdir, capsys):
    out = workdir / "shared.json"
    assert main(["mitigate", *_io(workdir)[:4], "--share-lif", "4", "--out", str(out)]) == 0
    assert "LIF units" in capsys.readouterr().out
    assert main(["simulate", "--model", str(out), *_io(workdir)[2:]]) == 0


@pytest.mark.parametrize("extra", [
    ["--share-lif", "3"],             # does not divide the layer widths
    ["--dt-snn-threshold", "-1"],
    ["--backend", "analog"],          # disagrees with the digital config
    ["--ni-aware"],                   # analog-only flag on a digital config
    ["--timesteps", "0"],
])
def test_usage_errors_exit_1(workdir, extra):
    assert main(["simulate", *_io(workdir), *extra]) == 1


def test_missing_required_flag_exits_1(workdir):
    assert main(["simulate", *_io(workdir)[:4]]) == 1


def test_io_errors_exit_2(workdir, tmp_path):
    args = _io(workdir)
    args[1] = str(tmp_path / "nope.json")
    assert main(["simulate", *args]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("backend: [\n")
    assert main(["simulate", *_io(workdir)[:4], "--hw", str(bad)]) == 2


def test_bad_config_field_exits_1(workdir, tmp_path):
    d = yaml.safe_load(default_config_path("digital").read_text())
    d["array"]["bogus"] = 1
    p = tmp_path / "hw.yaml"
    p.write_text(yaml.safe_dump(d))
    assert main(["simulate", *_io(workdir)[:4], "--hw", str(p)]) == 1
