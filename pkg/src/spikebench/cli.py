"""``spikebench`` command line: workload generation, simulation, estimation,
parameter sweeps and model mitigations.

Exit codes: 0 success, 1 invalid arguments or contract violation, 2 I/O or
file-format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analog.crossbar import TilePlan, map_model
from .analog.sim import neuronal_area, simulate_analog
from .config import AnalogHardware, DigitalHardware, HardwareConfig, load_hardware_config
from .digital import simulate_digital
from .errors import ContractError, LoadError, ModelError, NumericalError, SpikebenchError
from .estimator import EstimateInputs, count_flops, estimate_energy
from .mitigations import (NoiseCalibrationSpec, bn_adapt, ni_aware_encode, share_lif,
                          tune_dt_threshold)
from .report import CostReport, write_report
from .runtime import SimOptions
from .snn import SnnModel, exact_mvm, sparsity_profile
from .workload import (PROFILES, Dataset, generate_synthetic_workload, load_dataset, load_model,
                       save_dataset, save_model)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_AXES = ("timesteps", "share_n", "noise_sigma", "r_wire")
DEFAULT_GRIDS = {
    "timesteps": "1,2,3,4",
    "share_n": "1,2,4",
    "noise_sigma": "0,0.05,0.1,0.2",
    "r_wire": "0,1,2,5",
}
SWEEP_COLUMNS = ("value", "energy_pj", "latency_ns", "edp_pj_ns", "accuracy", "area_mm2")


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunSpec:
    command: str
    model: Path
    data: Path
    hw: Path | None
    backend: str | None = None
    timesteps: int | None = None
    dt_snn_threshold: float | None = None
    dt_snn_auto: bool = False
    dt_target_drop: float = 1.0
    share_lif: int | None = None
    ni_aware: bool = False
    bn_adapt: int | None = None
    nonideal: bool = False
    seed: int = 0
    workers: int | None = None
    out: Path | None = None
    fmt: str = "json"

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        vals = {k: v for k, v in vars(args).items() if k in names}
        for k in ("model", "data", "hw", "out"):
            if vals.get(k) is not None:
                vals[k] = Path(vals[k])
        return cls(**vals)

    def validate(self) -> None:
        if self.dt_snn_threshold is not None and self.dt_snn_auto:
            raise UsageError("--dt-snn-threshold and --dt-snn-auto are mutually exclusive")
        if self.dt_snn_threshold is not None and self.dt_snn_threshold < 0:
            raise UsageError("--dt-snn-threshold must be >= 0")
        if self.timesteps is not None and self.timesteps < 1:
            raise UsageError("--timesteps must be >= 1")
        if self.share_lif is not None and self.share_lif < 1:
            raise UsageError("--share-lif must be >= 1")
        if self.bn_adapt is not None and self.bn_adapt < 1:
            raise UsageError("--bn-adapt must be >= 1")
        if self.workers is not None and self.workers < 1:
            raise UsageError("--workers must be >= 1")


# ----------------------------------------------------------------------------
# shared plumbing

def _hardware(spec: RunSpec) -> HardwareConfig:
    if spec.hw is None:
        raise UsageError("--hw is required")
    hw = load_hardware_config(spec.hw)
    if spec.backend is not None and spec.backend != hw.backend:
        raise UsageError(f"--backend {spec.backend} does not match the {hw.backend} config in --hw")
    analog_only = [f for f, on in (("--ni-aware", spec.ni_aware), ("--bn-adapt", spec.bn_adapt),
                                   ("--nonideal", spec.nonideal)) if on]
    if analog_only and hw.backend != "analog":
        raise UsageError(f"{analog_only[0]} requires an analog hardware config")
    return hw


def _load(spec: RunSpec) -> tuple[SnnModel, Dataset]:
    model = load_model(spec.model)
    data = load_dataset(spec.data)
    if data.samples.shape[1:] != tuple(model.input_shape):
        raise ModelError(f"dataset sample shape {data.samples.shape[1:]} does not match model "
                         f"input shape {tuple(model.input_shape)}")
    return model, data


def _prepare(spec: RunSpec, model: SnnModel, data: Dataset, hw: HardwareConfig
             ) -> tuple[SnnModel, TilePlan | None, float | None]:
    """Apply timestep override and mitigations; returns model, tile plan, DT threshold."""
    if spec.timesteps is not None:
        model = model.with_timesteps(spec.timesteps)
    if spec.share_lif is not None:
        model = share_lif(model, spec.share_lif)
    plan = None
    if isinstance(hw, AnalogHardware):
        plan = map_model(model, hw.crossbar)
        if spec.ni_aware:
            plan = ni_aware_encode(plan, model)
        if spec.bn_adapt is not None:
            model = bn_adapt(model, data.samples, hw.crossbar, NoiseCalibrationSpec(spec.bn_adapt),
                             seed=spec.seed, plan=plan)
    threshold = spec.dt_snn_threshold
    if spec.dt_snn_auto:
        # ideal crossbars with exact readout reproduce exact arithmetic
        threshold = tune_dt_threshold(model, data.samples, data.labels, spec.dt_target_drop,
                                      exact_mvm).threshold
    return model, plan, threshold


def _simulate(model: SnnModel, data: Dataset, hw: HardwareConfig, options: SimOptions,
              plan: TilePlan | None = None) -> CostReport:
    if isinstance(hw, DigitalHardware):
        return simulate_digital(model, data, hw.array, hw.energy, options, hw.area)
    return simulate_analog(model, data, hw.crossbar, hw.cost, options, plan)


def _options(spec: RunSpec, threshold: float | None) -> SimOptions:
    return SimOptions(dt_snn_threshold=threshold, nonideal=spec.nonideal, seed=spec.seed,
                      workers=spec.workers)


def _accuracy(report: CostReport) -> float:
    acc = report.accuracy.get("nonideal")
    return report.accuracy["ideal"] if acc is None else acc


# ----------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    model, data = generate_synthetic_workload(args.seed, args.profile,
                                              samples_per_class=args.samples_per_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    save_dataset(data, out / "data.snnb")
    counts = np.bincount(data.labels.astype(np.int64), minlength=model.num_classes)
    print(f"{args.profile} seed={args.seed}: {len(data)} samples of shape "
          f"{tuple(data.samples.shape[1:])}, {model.num_classes} classes "
          f"(per class {counts.tolist()}), {len(model.layers)} layers, T={model.timesteps} "
          f"-> {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = RunSpec.from_args(args)
    spec.validate()
    hw = _hardware(spec)
    model, data = _load(spec)
    model, plan, threshold = _prepare(spec, model, data, hw)
    report = _simulate(model, data, hw, _options(spec, threshold), plan)
    if spec.out is not None:
        write_report(report, spec.out, spec.fmt)
    print(report.summary())
    return EXIT_OK



def cmd_estimate(args) -> int:
    spec = RunSpec.from_args(args)
    spec.validate()
    if args.e_ac < 0:
        raise UsageError("--e-ac must be >= 0")
    hw = _hardware(spec) if spec.hw is not None else None
    model, data = _load(spec)
    if spec.timesteps is not None:
        model = model.with_timesteps(spec.timesteps)
    prof = sparsity_profile(model, data.samples)
    flops = count_flops(model)
    inputs = EstimateInputs(float(flops.total), float(model.timesteps), prof.aggregate, args.e_ac)
    e_est = estimate_energy(inputs)
    result = {"flops": flops.total, "timesteps": model.timesteps, "sparsity": prof.aggregate,
              "e_ac_pj": args.e_ac, "e_est_pj": e_est,
              "per_layer_sparsity": {str(i): float(s) for i, s in zip(prof.layers, prof.per_layer)}}
    line = (f"E_est = {flops.total} FLOPs x T={model.timesteps} x (1 - {prof.aggregate:.6g}) "
            f"x {args.e_ac:g} pJ = {e_est:.6g} pJ")
    if hw is not None:
        report = _simulate(model, data, hw, _options(spec, None))
        ratio = report.energy_pj / e_est if e_est > 0 else float("inf")
        result.update(backend=hw.backend, simulated_pj=report.energy_pj,
                      divergence_ratio=ratio)
        line += f"; simulated {hw.backend} = {report.energy_pj:.6g} pJ (ratio {ratio:.4g}x)"
    if spec.out is not None:
        Path(spec.out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    print(line)
    return EXIT_OK


def _sweep_values(axis: str, text: str) -> list:
    try:
        if axis in ("timesteps", "share_n"):
            vals = [int(v) for v in text.split(",")]
        else:
            vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--values: cannot parse {text!r} for axis {axis}") from None
    if not vals:
        raise UsageError("--values is empty")
    if any(v < 0 for v in vals):
        raise UsageError("--values must be non-negative")
    return vals


def sweep(spec: RunSpec, axis: str, values: Sequence, hw: HardwareConfig, model: SnnModel,
          data: Dataset) -> list[dict]:
    """One report per axis value.

    ``noise_sigma`` points run with zero parasitics and ``r_wire`` points set
    wire, source and sink resistance together with read noise off, so each
    analog axis isolates one non-ideality.
    """
    if axis in ("noise_sigma", "r_wire") and not isinstance(hw, AnalogHardware):
        raise UsageError(f"sweep axis {axis} requires an analog hardware config")
    rows = []
    for v in values:
        m, h, s = model, hw, spec
        if axis == "timesteps":
            if v < 1:
                raise UsageError("--values: timesteps must be >= 1")
            s = dataclasses.replace(spec, timesteps=v)
        elif axis == "share_n":
            s = dataclasses.replace(spec, share_lif=v)
        elif axis == "noise_sigma":
            xb = dataclasses.replace(hw.crossbar, read_noise_sigma=v, r_wire_ohm=0.0,
                                     r_source_ohm=0.0, r_sink_ohm=0.0)
            h = dataclasses.replace(hw, crossbar=xb)
            s = dataclasses.replace(spec, nonideal=True)
        else:
            xb = dataclasses.replace(hw.crossbar, read_noise_sigma=0.0, r_wire_ohm=v,
                                     r_source_ohm=v, r_sink_ohm=v)
            h = dataclasses.replace(hw, crossbar=xb)
            s = dataclasses.replace(spec, nonideal=True)
        m, plan, threshold = _prepare(s, m, data, h)
        rep = _simulate(m, data, h, _options(s, threshold), plan)
        rows.append({"value": v, "energy_pj": rep.energy_pj, "latency_ns": rep.latency_ns,
                     "edp_pj_ns": rep.edp, "accuracy": _accuracy(rep),
                     "area_mm2": rep.area_total_mm2,
                     "report": rep})
    return rows


def cmd_sweep(args) -> int:
    spec = RunSpec.from_args(args)
    spec.validate()
    if args.axis == "timesteps" and spec.timesteps is not None:
        raise UsageError("--timesteps cannot be combined with --axis timesteps")
    if args.axis == "share_n" and spec.share_lif is not None:
        raise UsageError("--share-lif cannot be combined with --axis share_n")
    values = _sweep_values(args.axis, args.values or DEFAULT_GRIDS[args.axis])
    hw = _hardware(spec)
    model, data = _load(spec)
    rows = sweep(spec, args.axis, values, hw, model, data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([args.axis if c == "value" else c for c in SWEEP_COLUMNS])
    for r in rows:
        w.writerow([r["value"], *(repr(float(r[c])) for c in SWEEP_COLUMNS[1:])])
    if spec.out is not None:
        Path(spec.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    print(f"sweep {args.axis}: {len(rows)} points", file=sys.stderr if spec.out is None
          else sys.stdout)
    return EXIT_OK


def cmd_mitigate(args) -> int:
    """Write a transformed model (LIF sharing, BN adaptation) and report tuned thresholds."""
    spec = RunSpec.from_args(args)
    spec.validate()
    if spec.out is None:
        raise UsageError("--out is required")
    if spec.share_lif is None and spec.bn_adapt is None and not spec.dt_snn_auto:
        raise UsageError("nothing to do: give --share-lif, --bn-adapt or --dt-snn-auto")
    hw = _hardware(spec) if spec.hw is not None else None
    if spec.bn_adapt is not None and hw is None:
        raise UsageError("--bn-adapt requires --hw with an analog config")
    model, data = _load(spec)
    before = model
    if spec.timesteps is not None:
        model = model.with_timesteps(spec.timesteps)
    if spec.share_lif is not None:
        model = share_lif(model, spec.share_lif)
    if spec.bn_adapt is not None:
        plan = map_model(model, hw.crossbar)
        if spec.ni_aware:
            plan = ni_aware_encode(plan, model)
        model = bn_adapt(model, data.samples, hw.crossbar, NoiseCalibrationSpec(spec.bn_adapt),
                         seed=spec.seed, plan=plan)
    save_model(model, spec.out)
    parts = [f"wrote {spec.out}"]
    if spec.share_lif is not None:
        n_before = sum(l.shared_neurons for l in before.layers if l.neuron is not None)
        n_after = sum(l.shared_neurons for l in model.layers if l.neuron is not None)
        parts.append(f"LIF units {n_before} -> {n_after}")
        if isinstance(hw, AnalogHardware):
            parts.append(f"neuronal area {neuronal_area(before, hw.cost):.6g} -> "
                         f"{neuronal_area(model, hw.cost):.6g} mm2")
    if spec.bn_adapt is not None:
        parts.append(f"BN adapted on {spec.bn_adapt} samples")
    if spec.dt_snn_auto:
        res = tune_dt_threshold(model, data.samples, data.labels, spec.dt_target_drop)
        parts.append(f"dt-snn threshold {res.threshold:.6g} (accuracy {res.accuracy:.4f} vs "
                     f"static {res.static_accuracy:.4f}, mean timesteps {res.mean_timesteps:.4g})")
    print("; ".join(parts))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser

def _add_io(p, hw_required: bool = True):
    p.add_argument("--model", required=True, help="model manifest (.json)")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--hw", required=hw_required, default=None, help="hardware config (.yaml)")
    p.add_argument("--backend", choices=("digital", "analog"), default=None,
                   help="must match the backend declared in --hw")
    p.add_argument("--timesteps", type=int, default=None, help="override the model's T")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (env SPIKEBENCH_THREADS overrides)")
    p.add_argument("--out", default=None, help="output file")


def _add_mitigations(p):
    p.add_argument("--dt-snn-threshold", type=float, default=None, dest="dt_snn_threshold")
    p.add_argument("--dt-snn-auto", action="store_true", dest="dt_snn_auto",
                   help="tune the entropy threshold on the dataset")
    p.add_argument("--dt-target-drop", type=float, default=1.0, dest="dt_target_drop",
                   help="allowed accuracy drop in percentage points for --dt-snn-auto")
    p.add_argument("--share-lif", type=int, default=None, dest="share_lif")
    p.add_argument("--ni-aware", action="store_true", dest="ni_aware")
    p.add_argument("--bn-adapt", type=int, default=None, dest="bn_adapt", metavar="N")
    p.add_argument("--nonideal", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spikebench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic workload")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=PROFILES, default="tiny-mlp")
    p.add_argument("--samples-per-class", type=int, default=16, dest="samples_per_class")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="simulate a model on a hardware backend")
    _add_io(p)
    _add_mitigations(p)
    p.add_argument("--format", choices=("json", "csv"), default="json", dest="fmt")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="FLOPs-based energy estimate (optionally vs simulation)")
    _add_io(p, hw_required=False)
    p.add_argument("--e-ac", type=float, default=0.03, dest="e_ac", help="pJ per accumulation")
    p.add_argument("--nonideal", action="store_true")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", help="sweep one parameter and write a CSV")
    _add_io(p)
    _add_mitigations(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mitigate", help="write a transformed model")
    _add_io(p, hw_required=False)
    _add_mitigations(p)
    p.set_defaults(func=cmd_mitigate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except NumericalError as exc:
        print(f"spikebench: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, OSError) as exc:
        print(f"spikebench: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ModelError, SpikebenchError, ValueError) as exc:
        print(f"spikebench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
