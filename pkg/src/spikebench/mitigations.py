"""Inference-time mitigations usable by both hardware backends.

* DT-SNN: entropy-gated early exit over timesteps.
* C#n LIF sharing along the output-channel dimension.
* Non-ideality-aware (complement) column encoding on crossbars.
* Batchnorm statistic adaptation against noisy crossbar activations.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .analog.crossbar import (CrossbarConfig, CrossbarMvm, SliceFormat, TilePlan, map_layer,
                              map_model)
from .errors import ContractError
from .snn import (MvmProvider, SnnModel, StepResult, argmax, exact_mvm,
                  run_timesteps)


# ----------------------------------------------------------------------------
# DT-SNN

def entropy(logits: np.ndarray) -> float:
    """Shannon entropy (nats) of softmax(logits)."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size < 2:
        raise ContractError("entropy needs at least two classes")
    if not np.all(np.isfinite(z)):
        raise ContractError("logits must be finite")
    with np.errstate(over="ignore"):
        z = z - z.max()
    e = np.exp(z)
    s = e.sum()
    p = e / s
    # H = log(s) - sum p z, stable for large logit gaps; p = 0 terms contribute nothing
    nz = p > 0
    return float(max(0.0, math.log(s) - float(np.dot(p[nz], z[nz]))))


@dataclass(frozen=True)
class DtSnnPolicy:
    entropy_threshold: float
    max_timesteps: int

    def __post_init__(self):
        if not self.entropy_threshold >= 0:
            raise ContractError("entropy_threshold must be >= 0")
        if self.max_timesteps < 1:
            raise ContractError("max_timesteps must be >= 1")

    def should_exit(self, h: float, num_classes: int) -> bool:
        # entropy never exceeds ln K, so any threshold at or above it exits at once
        return h < self.entropy_threshold or self.entropy_threshold >= math.log(num_classes)


@dataclass
class DtResult:
    prediction: int
    timesteps_used: int
    logits: np.ndarray
    entropies: list[float]


StepHook = Callable[[int, StepResult], None]


def dt_snn_infer(model: SnnModel, x: np.ndarray, policy: DtSnnPolicy,
                 mvm: MvmProvider = exact_mvm, on_step: StepHook | None = None) -> DtResult:
    """Run timesteps until the running-mean logits are confident enough.

    ``on_step(t, step)`` is called for every executed timestep (t from 1).
    With threshold 0 this is exactly ``infer`` with ``policy.max_timesteps``.
    """
    run_model = model if model.timesteps == policy.max_timesteps else model.with_timesteps(
        policy.max_timesteps)
    acc, ents = [], []
    for t, step in enumerate(run_timesteps(run_model, x, mvm), start=1):
        if on_step is not None:
            on_step(t, step)
        acc.append(step.logits)
        mean = np.sum(acc, axis=0) / t
        ents.append(entropy(mean))
        if policy.should_exit(ents[-1], model.num_classes):
            break
    return DtResult(argmax(mean), t, mean, ents)


def threshold_grid(num_classes: int) -> np.ndarray:
    return np.array([0.05 * k * math.log(num_classes) for k in range(1, 20)])


@dataclass
class TuneResult:
    threshold: float
    feasible: bool
    static_accuracy: float
    accuracy: float
    mean_timesteps: float
    grid: np.ndarray = field(repr=False)
    grid_accuracy: np.ndarray = field(repr=False)
    grid_timesteps: np.ndarray = field(repr=False)


def tune_dt_threshold(model: SnnModel, samples: Sequence[np.ndarray], labels: Sequence[int],
                      target_accuracy_drop: float = 1.0,
                      mvm: MvmProvider = exact_mvm) -> TuneResult:
    """Largest grid threshold whose validation accuracy drop is within ``target`` pp.

    Each sample is run once for all T timesteps; because the exit decision at t
    only depends on logits up to t, every grid value is then evaluated offline.
    """
    if len(samples) == 0:
        raise ContractError("validation set is empty")
    labels = np.asarray(labels)
    T, K = model.timesteps, model.num_classes
    preds = np.zeros((len(samples), T), dtype=np.int64)
    ents = np.zeros((len(samples), T))
    for n, x in enumerate(samples):
        acc = []
        for t, step in enumerate(run_timesteps(model, x, mvm)):
            acc.append(step.logits)
            mean = np.sum(acc, axis=0) / (t + 1)
            preds[n, t] = argmax(mean)
            ents[n, t] = entropy(mean)
    static = float(np.mean(preds[:, -1] == labels))
    grid = threshold_grid(K)
    g_acc, g_steps = np.zeros(grid.size), np.zeros(grid.size)
    for j, th in enumerate(grid):
        pol = DtSnnPolicy(float(th), T)
        used = np.full(len(samples), T)
        for n in range(len(samples)):
            for t in range(T):
                if pol.should_exit(ents[n, t], K):
                    used[n] = t + 1
                    break
        g_acc[j] = np.mean(preds[np.arange(len(samples)), used - 1] == labels)
        g_steps[j] = used.mean()
    ok = np.flatnonzero((static - g_acc) * 100.0 <= target_accuracy_drop + 1e-9)
    if ok.size == 0:
        warnings.warn("no DT-SNN threshold meets the accuracy target; early exit disabled",
                      stacklevel=2)
        return TuneResult(0.0, False, static, static, float(T), grid, g_acc, g_steps)
    j = int(ok.max())
    return TuneResult(float(grid[j]), True, static, float(g_acc[j]), float(g_steps[j]),
                      grid, g_acc, g_steps)


# ----------------------------------------------------------------------------
# LIF sharing

@dataclass(frozen=True)
class ShareSpec:
    n: int
    dimension: str = "channel"

    def __post_init__(self):
        if self.n < 1:
            raise ContractError("sharing factor n must be >= 1")
        if self.dimension != "channel":
            raise ContractError("only channel-dimension sharing is supported")


def share_lif(model: SnnModel, spec: ShareSpec | int) -> SnnModel:
    """Let every group of n output channels of each spiking layer share one neuron."""
    spec = spec if isinstance(spec, ShareSpec) else ShareSpec(int(spec))
    out = model
    for i, layer in enumerate(model.layers):
        if layer.neuron is None:
            continue
        if layer.out_channels % spec.n:
            raise ContractError(
                f"layer {i}: sharing factor {spec.n} does not divide {layer.out_channels} channels")
        out = out.replace_layer(i, lif_share=spec.n)
    return out


# ----------------------------------------------------------------------------
# non-ideality-aware encoding

def complement_flags(q: np.ndarray, cfg: CrossbarConfig, bits: int) -> np.ndarray:
    """Per (slice, row tile, column) choice of complement encoding.

    A column is mirrored when that leaves strictly more of its cells below the
    midpoint conductance; ties keep the direct encoding.
    """
    fmt = SliceFormat.for_bits(bits, cfg.bits_per_cell)
    d = fmt.digits(q)  # (slices, fan_in, out)
    n_rt = max(1, math.ceil(q.shape[0] / cfg.rows))
    flags = np.zeros((fmt.slices, n_rt, q.shape[1]), dtype=bool)
    for rt in range(n_rt):
        blk = d[:, rt * cfg.rows:(rt + 1) * cfg.rows]
        low = (2 * blk < fmt.digit_max).sum(axis=1)
        high = (2 * blk > fmt.digit_max).sum(axis=1)
        flags[:, rt] = high > low
    return flags


def ni_aware_encode(plan: TilePlan, model: SnnModel) -> TilePlan:
    cfg = plan.config
    out = TilePlan(cfg)
    for i, m in plan.layers.items():
        layer = model.layers[i]
        q = layer.matrix().T
        out.layers[i] = map_layer(i, layer, cfg, m.input_levels,
                                  complement_flags(q, cfg, layer.weight_bits))
    return out


# ----------------------------------------------------------------------------
# batchnorm adaptation

@dataclass(frozen=True)
class NoiseCalibrationSpec:
    """Calibration schedule.  ``batch_size=None`` uses all samples per batch;
    with several epochs, deeper layers settle after the layers feeding them."""

    sample_count: int
    momentum: float = 0.5
    batch_size: int | None = None
    epochs: int = 4

    def __post_init__(self):
        if self.sample_count < 1:
            raise ContractError("sample_count must be >= 1")
        if not 0 < self.momentum <= 1:
            raise ContractError("momentum must lie in (0, 1]")
        if (self.batch_size is not None and self.batch_size < 1) or self.epochs < 1:
            raise ContractError("batch_size and epochs must be >= 1")


MvmFactory = Callable[[int], MvmProvider]


CALIBRATION_STREAM = 1


def crossbar_factory(plan: TilePlan, seed: int, stream: int = CALIBRATION_STREAM) -> MvmFactory:
    """Non-ideal crossbar provider for sample ``idx`` with its own noise stream.

    The stream tag keeps calibration noise independent of the ``[seed, idx]``
    streams that simulation uses for evaluation.
    """
    def make(idx: int) -> MvmProvider:
        return CrossbarMvm(plan, nonideal=True, rng=np.random.default_rng([seed, stream, idx]))
    return make


def bn_adapt(model: SnnModel, samples: Sequence[np.ndarray], cfg: CrossbarConfig | None,
             spec: NoiseCalibrationSpec, seed: int = 0, plan: TilePlan | None = None,
             mvm_factory: MvmFactory | None = None) -> SnnModel:
    """Re-estimate BN running statistics from activations seen on noisy crossbars.

    Mini-batches run in inference mode with the current statistics; per-channel
    batch moments are pooled over samples, timesteps and positions and folded
    into the running values with exponential momentum.  Weights, gamma and beta
    are left untouched.
    """
    bn_layers = [i for i, l in enumerate(model.layers) if l.bn is not None]
    if not bn_layers:
        warnings.warn("model has no batchnorm layers; bn_adapt is a no-op", stacklevel=2)
        return model
    if len(samples) == 0:
        raise ContractError("bn_adapt needs calibration samples")
    if mvm_factory is None:
        if cfg is None and plan is None:
            raise ContractError("bn_adapt needs an analog configuration or an mvm factory")
        mvm_factory = crossbar_factory(plan if plan is not None else map_model(model, cfg), seed)
    idx = [k % len(samples) for k in range(spec.sample_count)]
    bs = spec.batch_size or len(idx)
    cur = model
    for _ in range(spec.epochs):
        for b0 in range(0, len(idx), bs):
            batch = idx[b0:b0 + bs]
            sums = {i: [] for i in bn_layers}

            def observe(i, z, sums=sums):
                if i in sums:
                    sums[i].append(z.reshape(z.shape[0], -1))

            for k in batch:
                for _step in run_timesteps(cur, samples[k], mvm_factory(k), observer=observe):
                    pass
            for i in bn_layers:
                z = np.concatenate(sums[i], axis=1)
                bn = cur.layers[i].bn
                m = spec.momentum
                new = dataclasses.replace(
                    bn,
                    running_mean=(1 - m) * bn.running_mean + m * z.mean(axis=1),
                    running_var=(1 - m) * bn.running_var + m * z.var(axis=1))
                cur = cur.replace_layer(i, bn=new)
    return cur


def bn_checksum(model: SnnModel) -> str:
    """Digest of everything bn_adapt must not touch: weights, gamma, beta."""
    h = hashlib.sha256()
    for layer in model.layers:
        if layer.weights is not None:
            h.update(np.ascontiguousarray(layer.weights.q).tobytes())
            h.update(np.float64(layer.weights.scale).tobytes())
        if layer.bn is not None:
            h.update(np.ascontiguousarray(layer.bn.gamma, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(layer.bn.beta, dtype=np.float64).tobytes())
    return h.hexdigest()
