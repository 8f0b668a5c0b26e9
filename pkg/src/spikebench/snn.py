"""Functional SNN inference: LIF dynamics, direct encoding and the timestep loop.

Weighted layers are evaluated through a pluggable *MVM provider* so the same
engine runs with exact arithmetic or with a crossbar pipeline::

    provider(layer_index, layer, cols) -> weighted sums, shape (out_channels, positions)

where ``cols`` is the im2col matrix of the layer input, shape (fan_in, positions).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, LayerError, ModelError

LAYER_KINDS = ("conv2d", "fc", "avgpool")


@dataclass(frozen=True)
class NeuronParams:
    leak: float = 1.0
    threshold: float = 1.0
    reset_mode: str = "zero"

    def __post_init__(self):
        if not 0.0 <= self.leak <= 1.0:
            raise ModelError(f"leak must lie in [0, 1], got {self.leak}")
        if not self.threshold > 0:
            raise ModelError(f"threshold must be positive, got {self.threshold}")
        if self.reset_mode != "zero":
            raise ModelError(f"unsupported reset_mode {self.reset_mode!r}")


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("running_mean", "running_var", "gamma", "beta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.running_mean.shape
        if any(getattr(self, k).shape != n for k in ("running_var", "gamma", "beta")):
            raise ModelError("batchnorm parameter shapes disagree")
        if np.any(self.running_var < 0):
            raise ModelError("running_var must be non-negative")
        if not self.epsilon > 0:
            raise ModelError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        shape = (-1,) + (1,) * (x.ndim - 1)
        inv = self.gamma / np.sqrt(self.running_var + self.epsilon)
        return (x - self.running_mean.reshape(shape)) * inv.reshape(shape) + self.beta.reshape(shape)


@dataclass(frozen=True, eq=False)
class QuantizedWeights:
    """Symmetric per-layer quantized weights: ``w = scale * q``."""

    q: np.ndarray
    scale: float
    bits: int = 8

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ModelError(f"weight_bits must be 4 or 8, got {self.bits}")
        q = np.asarray(self.q)
        if not np.issubdtype(q.dtype, np.integer):
            raise ModelError("quantized weights must be integers")
        if q.size and np.abs(q).max() > self.qmax:
            raise ModelError(f"weights exceed the {self.bits}-bit symmetric range")
        object.__setattr__(self, "q", q.astype(np.int8))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def dequantize(self) -> np.ndarray:
        return self.scale * self.q.astype(np.float64)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    weights: QuantizedWeights | None = None
    bn: BatchNormParams | None = None
    neuron: NeuronParams | None = None
    lif_share: int = 1
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(d) for d in self.in_shape))
        object.__setattr__(self, "out_shape", tuple(int(d) for d in self.out_shape))
        if self.kind not in LAYER_KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.lif_share < 1 or self.out_channels % self.lif_share:
            raise ModelError(
                f"lif_share {self.lif_share} must divide {self.out_channels} output channels")
        if self.kind == "avgpool":
            if self.weights is not None or self.neuron is not None:
                raise ModelError("avgpool layers carry neither weights nor neurons")
        elif self.weights is None:
            raise ModelError(f"{self.kind} layer requires weights")
        elif self.weights.q.shape != self.weight_shape:
            raise ModelError(
                f"weight shape {self.weights.q.shape} does not match geometry {self.weight_shape}")
        if self.bn is not None and self.bn.channels != self.out_channels:
            raise ModelError("batchnorm channel count differs from layer output channels")
        if self.expected_out_shape() != self.out_shape:
            raise ModelError(
                f"out_shape {self.out_shape} inconsistent with geometry "
                f"(expected {self.expected_out_shape()})")

    @property
    def is_weighted(self) -> bool:
        return self.kind != "avgpool"

    @property
    def out_channels(self) -> int:
        return self.out_shape[0]

    @property
    def fan_in(self) -> int:
        if self.kind == "conv2d":
            return self.in_shape[0] * self.kernel * self.kernel
        return int(np.prod(self.in_shape))

    @property
    def positions(self) -> int:
        """Output positions per channel (1 for fully connected layers)."""
        return int(np.prod(self.out_shape[1:])) if len(self.out_shape) > 1 else 1

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_shape[0], self.kernel, self.kernel)
        return (self.out_channels, int(np.prod(self.in_shape)))

    @property
    def weight_bits(self) -> int:
        return self.weights.bits if self.weights is not None else 0

    @property
    def neurons(self) -> int:
        return int(np.prod(self.out_shape)) if self.neuron is not None else 0

    @property
    def shared_neurons(self) -> int:
        return self.neurons // self.lif_share

    def expected_out_shape(self) -> tuple[int, ...]:
        if self.kind == "fc":
            return (self.weights.q.shape[0],) if self.weights is not None else self.out_shape
        if len(self.in_shape) != 3:
            raise ModelError(f"{self.kind} expects (C, H, W) input, got {self.in_shape}")
        c, h, w = self.in_shape
        k, s, p = self.kernel, self.stride, self.padding
        if k < 1 or s < 1 or p < 0:
            raise ModelError("kernel/stride must be >= 1 and padding >= 0")
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ModelError("kernel larger than padded input")
        cout = self.weights.q.shape[0] if self.kind == "conv2d" and self.weights is not None else c
        return (cout, ho, wo)

    def matrix(self) -> np.ndarray:
        """Integer weights unrolled to (out_channels, fan_in)."""
        return self.weights.q.reshape(self.out_channels, -1)


@dataclass(frozen=True, eq=False)
class SnnModel:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    timesteps: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ModelError("model has no layers")
        if self.timesteps < 1:
            raise ModelError("timesteps must be >= 1")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if int(np.prod(layer.in_shape)) != int(np.prod(shape)) or (
                    layer.kind != "fc" and layer.in_shape != shape):
                raise ModelError(f"layer {i}: input shape {layer.in_shape} does not chain from {shape}")
            shape = layer.out_shape
        last = self.layers[-1]
        if not last.is_weighted or last.neuron is not None:
            raise ModelError("final layer must be a non-firing weighted classifier")
        if last.out_shape != (self.num_classes,):
            raise ModelError(f"classifier width {last.out_shape} != num_classes {self.num_classes}")
        for i, layer in enumerate(self.layers[:-1]):
            if layer.is_weighted and layer.neuron is None:
                raise ModelError(f"layer {i}: hidden weighted layers need neuron parameters")

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 1

    def with_timesteps(self, timesteps: int) -> "SnnModel":
        return dataclasses.replace(self, timesteps=timesteps)

    def replace_layer(self, index: int, **changes) -> "SnnModel":
        layers = list(self.layers)
        layers[index] = dataclasses.replace(layers[index], **changes)
        return dataclasses.replace(self, layers=tuple(layers))


class SpikeTensor:
    """Bit-packed binary activations for one layer and one timestep."""

    __slots__ = ("dims", "bits")

    def __init__(self, dims: Sequence[int], bits: bytes):
        self.dims = tuple(int(d) for d in dims)
        n = int(np.prod(self.dims))
        if len(bits) != (n + 7) // 8:
            raise ContractError(f"payload length {len(bits)} != ceil({n}/8)")
        self.bits = bytes(bits)

    @classmethod
    def from_array(cls, spikes: np.ndarray) -> "SpikeTensor":
        arr = np.asarray(spikes)
        if not np.all((arr == 0) | (arr == 1)):
            raise ContractError("spike tensors must be binary")
        return cls(arr.shape, np.packbits(arr.astype(bool).ravel(), bitorder="little").tobytes())

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def to_array(self) -> np.ndarray:
        flat = np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8), bitorder="little")
        return flat[: self.size].reshape(self.dims).astype(np.float64)

    def count(self) -> int:
        return int(np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8)).sum())

    def sparsity(self) -> float:
        return 1.0 - self.count() / self.size if self.size else 1.0

    def __eq__(self, other):
        return isinstance(other, SpikeTensor) and self.dims == other.dims and self.bits == other.bits

    def __repr__(self):
        return f"SpikeTensor(dims={self.dims}, sparsity={self.sparsity():.3f})"


MvmProvider = Callable[[int, LayerSpec, np.ndarray], np.ndarray]


def exact_mvm(index: int, layer: LayerSpec, cols: np.ndarray) -> np.ndarray:
    return layer.weights.scale * (layer.matrix().astype(np.float64) @ cols)


def im2col(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Unroll a layer input to a (fan_in, positions) matrix."""
    if layer.kind == "fc":
        return np.asarray(x, dtype=np.float64).reshape(-1, 1)
    k, s, p = layer.kernel, layer.stride, layer.padding
    x = np.asarray(x, dtype=np.float64).reshape(layer.in_shape)
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    ho, wo = layer.out_shape[1:]
    # (C, Ho, Wo, k, k) -> (C, k, k, Ho, Wo) to match the (Cout, Cin, k, k) weight order
    return win[:, :ho, :wo].transpose(0, 3, 4, 1, 2).reshape(layer.fan_in, ho * wo)


def avgpool(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    k, s = layer.kernel, layer.stride
    x = np.asarray(x, dtype=np.float64).reshape(layer.in_shape)
    if layer.padding:
        p = layer.padding
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    ho, wo = layer.out_shape[1:]
    return win[:, :ho, :wo].mean(axis=(3, 4))


def _fire(u: np.ndarray, drive: np.ndarray, params: NeuronParams) -> tuple[np.ndarray, np.ndarray]:
    v = params.leak * u + drive
    spikes = v > params.threshold
    return np.where(spikes, 0.0, v), spikes.astype(np.float64)


def lif_step(u: np.ndarray, weighted_input: np.ndarray,
             params: NeuronParams) -> tuple[np.ndarray, SpikeTensor]:
    """One leaky integrate-and-fire update with hard reset to zero."""
    u = np.asarray(u, dtype=np.float64)
    weighted_input = np.asarray(weighted_input, dtype=np.float64)
    if u.shape != weighted_input.shape:
        raise ContractError(f"shape mismatch: u {u.shape} vs input {weighted_input.shape}")
    u_next, spikes = _fire(u, weighted_input, params)
    return u_next, SpikeTensor.from_array(spikes)


def direct_encode(x: np.ndarray, timesteps: int) -> list[np.ndarray]:
    if timesteps < 1:
        raise ContractError(f"timesteps must be >= 1, got {timesteps}")
    x = np.asarray(x, dtype=np.float64)
    return [x] * timesteps


@dataclass
class MembraneState:
    """Per-layer membrane potentials; ``None`` for layers without neurons."""

    potentials: list[np.ndarray | None]

    @classmethod
    def zeros(cls, model: SnnModel) -> "MembraneState":
        pots = []
        for layer in model.layers:
            if layer.neuron is None:
                pots.append(None)
            else:
                shape = (layer.out_channels // layer.lif_share,) + layer.out_shape[1:]
                pots.append(np.zeros(shape))
        return cls(pots)


@dataclass
class StepResult:
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    spikes: dict[int, SpikeTensor]
    logits: np.ndarray
    state: MembraneState


Observer = Callable[[int, np.ndarray], None]


def forward_timestep(model: SnnModel, drive: np.ndarray, state: MembraneState,
                     mvm: MvmProvider = exact_mvm, observer: Observer | None = None) -> StepResult:
    """Run every layer once.  ``observer(i, pre_bn)`` sees each weighted layer's raw sums."""
    x = np.asarray(drive, dtype=np.float64).reshape(model.input_shape)
    inputs, outputs, spikes = [], [], {}
    potentials = list(state.potentials)
    logits = None
    for i, layer in enumerate(model.layers):
        inputs.append(x)
        if layer.kind == "avgpool":
            x = avgpool(layer, x)
            outputs.append(x)
            continue
        try:
            z = mvm(i, layer, im2col(layer, x))
        except Exception as exc:  # provider failures are reported per layer
            raise LayerError(i, exc) from exc
        z = np.asarray(z, dtype=np.float64).reshape(layer.out_shape)
        if observer is not None:
            observer(i, z)
        if layer.bn is not None:
            z = layer.bn.apply(z)
        if layer.neuron is None:
            logits = z.reshape(-1)
            outputs.append(logits)
            continue
        n = layer.lif_share
        if n > 1:
            z = z.reshape((layer.out_channels // n, n) + layer.out_shape[1:]).mean(axis=1)
        potentials[i], s = _fire(potentials[i], z, layer.neuron)
        if n > 1:
            s = np.repeat(s, n, axis=0)
        spikes[i] = SpikeTensor.from_array(s)
        outputs.append(s)
        x = s
    return StepResult(inputs, outputs, spikes, logits, MembraneState(potentials))


def run_timesteps(model: SnnModel, x: np.ndarray, mvm: MvmProvider = exact_mvm,
                  observer: Observer | None = None) -> Iterator[StepResult]:
    """Yield one StepResult per timestep; callers may stop early."""
    state = MembraneState.zeros(model)
    for drive in direct_encode(x, model.timesteps):
        step = forward_timestep(model, drive, state, mvm, observer)
        state = step.state
        yield step


def argmax(logits: np.ndarray) -> int:
    return int(np.argmax(logits))  # first maximum wins ties


@dataclass
class InferenceResult:
    prediction: int
    logits: np.ndarray
    sparsity: dict[int, float]
    steps: list[StepResult] = field(default_factory=list, repr=False)


def infer(model: SnnModel, x: np.ndarray, mvm: MvmProvider = exact_mvm,
          keep_steps: bool = False) -> InferenceResult:
    steps = list(run_timesteps(model, x, mvm))
    logits = np.sum([s.logits for s in steps], axis=0) / len(steps)
    sparsity = {}
    for i in steps[0].spikes:
        total = sum(s.spikes[i].count() for s in steps)
        sparsity[i] = 1.0 - total / (steps[0].spikes[i].size * len(steps))
    return InferenceResult(argmax(logits), logits, sparsity, steps if keep_steps else [])


@dataclass
class SparsityProfile:
    layers: list[int]
    per_timestep: np.ndarray  # (len(layers), T), mean sparsity over samples
    sizes: list[int]

    @property
    def per_layer(self) -> np.ndarray:
        return self.per_timestep.mean(axis=1)

    @property
    def aggregate(self) -> float:
        """Element-count-weighted mean sparsity over spiking layers and timesteps."""
        if not self.layers:
            return 1.0
        w = np.asarray(self.sizes, dtype=np.float64)
        return float((self.per_layer * w).sum() / w.sum())


def sparsity_profile(model: SnnModel, samples: Sequence[np.ndarray],
                     mvm: MvmProvider = exact_mvm) -> SparsityProfile:
    if len(samples) == 0:
        raise ContractError("sparsity_profile needs a non-empty dataset")
    spiking = [i for i, l in enumerate(model.layers) if l.neuron is not None]
    acc = np.zeros((len(spiking), model.timesteps))
    for x in samples:
        for t, step in enumerate(run_timesteps(model, x, mvm)):
            for r, i in enumerate(spiking):
                acc[r, t] += step.spikes[i].sparsity()
    sizes = [model.layers[i].neurons for i in spiking]
    return SparsityProfile(spiking, acc / len(samples), sizes)


def model_accuracy(model: SnnModel, samples: Sequence[np.ndarray], labels: Sequence[int],
                   mvm: MvmProvider = exact_mvm) -> float:
    hits = sum(infer(model, x, mvm).prediction == int(y) for x, y in zip(samples, labels))
    return hits / len(labels)
