"""Model manifests, weight blobs, datasets and synthetic workloads.

On-disk formats (all little-endian, row-major):

* model manifest: canonical JSON (sorted keys) pointing at a headerless weight
  blob; layers are stored back to back as int8 or packed int4 (low nibble first).
* dataset: ``b"SNNB"``, u32 version, u32 dtype tag, u32 ndim, u32 dims...,
  u32 sample count, payload, then one u16 label per sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError, LoadError, ModelError
from .snn import (
    BatchNormParams,
    LayerSpec,
    NeuronParams,
    QuantizedWeights,
    SnnModel,
    exact_mvm,
    infer,
    run_timesteps,
)

FORMAT_VERSION = 1
DATASET_MAGIC = b"SNNB"
DATASET_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
PROFILES = ("tiny-mlp", "tiny-cnn")


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray  # (N, *dims)
    labels: np.ndarray   # (N,) uint16

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ContractError("sample and label counts differ")

    def __len__(self):
        return len(self.labels)

    def split(self, n: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.samples[:n], self.labels[:n]),
                Dataset(self.samples[n:], self.labels[n:]))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.samples[idx], self.labels[idx])


# ----------------------------------------------------------------------------
# weight packing

def _pack_int4(q: np.ndarray) -> bytes:
    nib = (q.ravel().astype(np.int16) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).tobytes()


def _unpack_int4(buf: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    nib = np.empty(raw.size * 2, dtype=np.int8)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    nib = nib[:count]
    return np.where(nib >= 8, nib - 16, nib).astype(np.int8)


def _weight_nbytes(count: int, dtype: str) -> int:
    return count if dtype == "int8" else (count + 1) // 2


def _dtype_for_bits(bits: int) -> str:
    return "int8" if bits == 8 else "int4-packed"


# ----------------------------------------------------------------------------
# model manifest

def _layer_to_dict(layer: LayerSpec, offset: int, dtype: str) -> dict:
    d = {
        "kind": layer.kind,
        "name": layer.name,
        "in_shape": list(layer.in_shape),
        "out_shape": list(layer.out_shape),
        "kernel": layer.kernel,
        "stride": layer.stride,
        "padding": layer.padding,
        "lif_share": layer.lif_share,
    }
    if layer.weights is not None:
        n = layer.weights.q.size
        d.update(weight_bits=layer.weights.bits, scale=layer.weights.scale,
                 weight_offset=offset, weight_nbytes=_weight_nbytes(n, dtype))
    if layer.neuron is not None:
        d["neuron"] = {"leak": layer.neuron.leak, "threshold": layer.neuron.threshold,
                       "reset_mode": layer.neuron.reset_mode}
    if layer.bn is not None:
        d["bn"] = {k: getattr(layer.bn, k).tolist()
                   for k in ("running_mean", "running_var", "gamma", "beta")}
        d["bn"]["epsilon"] = layer.bn.epsilon
    return d


def model_to_manifest(model: SnnModel, blob_name: str = "weights.bin") -> tuple[dict, bytes]:
    bits = {l.weights.bits for l in model.layers if l.weights is not None}
    if len(bits) != 1:
        raise ModelError(f"a manifest needs one weight precision, found {sorted(bits)}")
    dtype = _dtype_for_bits(bits.pop())
    layers, chunks, offset = [], [], 0
    for layer in model.layers:
        layers.append(_layer_to_dict(layer, offset, dtype))
        if layer.weights is not None:
            q = layer.weights.q
            chunk = q.astype("<i1").tobytes(order="C") if dtype == "int8" else _pack_int4(q)
            chunks.append(chunk)
            offset += len(chunk)
    manifest = {
        "format_version": FORMAT_VERSION,
        "weight_blob": blob_name,
        "weight_dtype": dtype,
        "model": {
            "input_shape": list(model.input_shape),
            "timesteps": model.timesteps,
            "num_classes": model.num_classes,
            "layers": layers,
        },
    }
    return manifest, b"".join(chunks)


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_model(model: SnnModel, path: str | Path) -> Path:
    """Write ``<path>`` (manifest) and its sibling ``.bin`` blob; returns the manifest path."""
    path = Path(path)
    blob_name = path.with_suffix(".bin").name
    manifest, blob = model_to_manifest(model, blob_name)
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / blob_name).write_bytes(blob)
    path.write_text(canonical_json(manifest))
    return path


def _layer_from_dict(i: int, d: dict, blob: bytes, dtype: str) -> LayerSpec:
    try:
        kind = d["kind"]
        weights = None
        if kind != "avgpool":
            bits = int(d.get("weight_bits", 8))
            if _dtype_for_bits(bits) != dtype:
                raise LoadError(f"layer {i}: weight_bits {bits} disagrees with weight_dtype {dtype}")
            if kind == "conv2d":
                shape = (d["out_shape"][0], d["in_shape"][0], d["kernel"], d["kernel"])
            else:
                shape = (d["out_shape"][0], int(np.prod(d["in_shape"])))
            count = int(np.prod(shape))
            off, nbytes = int(d["weight_offset"]), int(d["weight_nbytes"])
            if nbytes != _weight_nbytes(count, dtype):
                raise LoadError(
                    f"layer {i}: weight_nbytes {nbytes} does not match shape {shape}")
            chunk = blob[off:off + nbytes]
            if len(chunk) != nbytes:
                raise LoadError(f"layer {i}: weight blob truncated")
            if dtype == "int8":
                q = np.frombuffer(chunk, dtype="<i1").reshape(shape)
            else:
                q = _unpack_int4(chunk, count).reshape(shape)
            weights = QuantizedWeights(q.copy(), float(d["scale"]), bits)
        neuron = NeuronParams(**d["neuron"]) if d.get("neuron") else None
        bn = BatchNormParams(**d["bn"]) if d.get("bn") else None
        return LayerSpec(kind=kind, in_shape=tuple(d["in_shape"]), out_shape=tuple(d["out_shape"]),
                         kernel=int(d.get("kernel", 1)), stride=int(d.get("stride", 1)),
                         padding=int(d.get("padding", 0)), weights=weights, bn=bn, neuron=neuron,
                         lif_share=int(d.get("lif_share", 1)), name=d.get("name", ""))
    except LoadError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"layer {i}: {type(exc).__name__}: {exc}") from exc


def load_model(path: str | Path) -> SnnModel:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    dtype = manifest.get("weight_dtype")
    if dtype not in ("int8", "int4-packed"):
        raise LoadError(f"{path}: unknown weight_dtype {dtype!r}")
    blob_path = path.parent / manifest["weight_blob"]
    if not blob_path.exists():
        raise LoadError(f"{path}: weight blob {blob_path} is missing")
    blob = blob_path.read_bytes()
    spec = manifest["model"]
    expected = sum(int(l.get("weight_nbytes", 0)) for l in spec["layers"])
    if len(blob) != expected:
        raise LoadError(
            f"{blob_path}: weight blob holds {len(blob)} bytes, manifest declares {expected}")
    layers = [_layer_from_dict(i, d, blob, dtype) for i, d in enumerate(spec["layers"])]
    try:
        return SnnModel(tuple(layers), tuple(spec["input_shape"]), int(spec["timesteps"]),
                        int(spec["num_classes"]))
    except ModelError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def normalize_manifest(path: str | Path) -> None:
    """Rewrite a manifest in canonical key order without touching its blob."""
    path = Path(path)
    path.write_text(canonical_json(json.loads(path.read_text())))


# ----------------------------------------------------------------------------
# datasets

def save_dataset(ds: Dataset, path: str | Path, dtype_tag: int = 2) -> Path:
    path = Path(path)
    if dtype_tag not in DTYPE_TAGS:
        raise ContractError(f"unsupported dtype tag {dtype_tag}")
    dims = ds.samples.shape[1:]
    header = DATASET_MAGIC + struct.pack("<III", DATASET_VERSION, dtype_tag, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<I", len(ds))
    payload = np.ascontiguousarray(ds.samples, dtype=DTYPE_TAGS[dtype_tag]).tobytes()
    labels = np.asarray(ds.labels, dtype="<u2").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload + labels)
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise LoadError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, tag, ndim = struct.unpack_from("<III", buf, 4)
        if version != DATASET_VERSION:
            raise LoadError(f"{path}: unsupported dataset version {version}")
        if tag not in DTYPE_TAGS:
            raise LoadError(f"{path}: unsupported dtype tag {tag}")
        dims = struct.unpack_from(f"<{ndim}I", buf, 16)
        (count,) = struct.unpack_from("<I", buf, 16 + 4 * ndim)
    except struct.error as exc:
        raise LoadError(f"{path}: truncated header") from exc
    start = 20 + 4 * ndim
    dt = DTYPE_TAGS[tag]
    nbytes = count * int(np.prod(dims)) * dt.itemsize
    if len(buf) != start + nbytes + 2 * count:
        raise LoadError(
            f"{path}: size {len(buf)} does not match header dims {dims} x {count} samples")
    samples = np.frombuffer(buf, dtype=dt, count=count * int(np.prod(dims)), offset=start)
    labels = np.frombuffer(buf, dtype="<u2", count=count, offset=start + nbytes)
    return Dataset(samples.reshape((count,) + tuple(dims)).astype(np.float64), labels.astype(np.uint16))


# ----------------------------------------------------------------------------
# synthetic workloads

def _quantize(w: np.ndarray, bits: int) -> QuantizedWeights:
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.abs(w).max()) or 1.0
    scale = peak / qmax
    return QuantizedWeights(np.round(w / scale).astype(np.int8), scale, bits)


def _identity_bn(z: np.ndarray, axes: tuple[int, ...], eps: float = 1e-5) -> BatchNormParams:
    """Statistics of ``z`` with gamma/beta chosen so clean data passes unchanged."""
    mean = z.mean(axis=axes)
    var = z.var(axis=axes)
    return BatchNormParams(mean, var, np.sqrt(var + eps), mean.copy(), eps)


def _calibrate_bn(model: SnnModel, samples: np.ndarray) -> SnnModel:
    """Fit identity batchnorm to every weighted layer, front to back, on clean data."""
    for i, layer in enumerate(model.layers):
        if not layer.is_weighted:
            continue
        seen = []

        def grab(j, z, seen=seen, i=i):
            if j == i:
                seen.append(z)

        probe = model.replace_layer(i, bn=None)
        for x in samples:
            for _ in run_timesteps(probe, x, exact_mvm, grab):
                pass
        z = np.stack(seen)  # (N*T, C, ...)
        axes = (0,) + tuple(range(2, z.ndim))
        model = model.replace_layer(i, bn=_identity_bn(z, axes))
    return model


def _templates(rng: np.random.Generator, classes: int, size: int, flips: int) -> np.ndarray:
    """Binary class templates sharing a base pattern; each class flips distinct pixels."""
    while True:
        base = np.zeros(size, dtype=bool)
        base[rng.choice(size, size // 2 + 2, replace=False)] = True
        t = np.repeat(base[None], classes, axis=0)
        for c in range(classes):
            t[c, rng.choice(size, flips, replace=False)] ^= True
        dist = (t[:, None] != t[None]).sum(-1) + np.eye(classes, dtype=int) * size
        if dist.min() >= 3:
            return t


def _draw_samples(rng, templates, per_class, on, off, noise, grid=255):
    k, size = templates.shape
    labels = np.repeat(np.arange(k), per_class)
    rng.shuffle(labels)
    base = np.where(templates[labels], on, off)
    x = base + rng.uniform(-noise, noise, size=base.shape)
    return np.round(np.clip(x, 0.0, 1.0) * grid) / grid, labels


def _keep_correct(model: SnnModel, x: np.ndarray, y: np.ndarray, target: int):
    keep = [i for i in range(len(y)) if infer(model, x[i]).prediction == y[i]]
    keep = keep[:target]
    return x[keep], y[keep]


def _discriminative(tmpl: np.ndarray, alpha: float = 0.85) -> np.ndarray:
    """Matched filters with most of the shared base pattern removed."""
    sign = np.where(tmpl, 1.0, -1.0)
    return sign - alpha * sign.mean(axis=0, keepdims=True)


def _hidden_weights(rng, tmpl, per, chan=None):
    filt = _discriminative(tmpl)
    rows = []
    for c in range(len(tmpl)):
        for j in range(per):
            mag = rng.uniform(0.6, 1.0, size=filt.shape[1])
            rows.append(filt[c] * mag)
    w = np.array(rows)
    if chan is not None:  # broadcast the spatial filter over input channels
        w = (w[:, None, :] * chan[None, :, None]).reshape(len(rows), -1)
    return w


def _layer_input_mean(model: SnnModel, index: int, samples: np.ndarray) -> np.ndarray:
    acc = []
    for x in samples:
        steps = list(run_timesteps(model, x))
        acc.append(np.mean([s.inputs[index].reshape(-1) for s in steps], axis=0))
    return np.array(acc)


def _one_hot_classifier(k: int, per: int, bits: int) -> QuantizedWeights:
    w = np.zeros((k, k * per))
    for c in range(k):
        w[c, c * per:(c + 1) * per] = 1.0
    return _quantize(w, bits)


def _scaled(w: np.ndarray, inputs: np.ndarray, per: int, gains: np.ndarray, target: float,
            bits: int) -> QuantizedWeights:
    """Row-normalize so neuron j of class c sees ``target * gains[j]`` on clean class c."""
    w = w.copy()
    for r in range(len(w)):
        w[r] *= target * gains[r % per] / float(inputs[r // per] @ w[r])
    return _quantize(w, bits)


def _mlp(rng, bits):
    k, d, per, t_steps = 4, 16, 8, 4
    tmpl = _templates(rng, k, d, flips=4)
    gains = np.linspace(1.0, 0.4, per)
    w1 = _hidden_weights(rng, tmpl, per)
    clean = np.where(tmpl, 0.8, 0.1)
    nrn = NeuronParams(1.0, 1.0)
    layers = (
        LayerSpec("fc", (d,), (k * per,), weights=_scaled(w1, clean, per, gains, 1.8, bits),
                  neuron=nrn, name="fc1"),
        LayerSpec("fc", (k * per,), (k,), weights=_one_hot_classifier(k, per, bits),
                  name="classifier"),
    )
    model = SnnModel(layers, (d,), t_steps, k)
    return model, lambda n, nz: _draw_samples(rng, tmpl, n, 0.8, 0.1, nz)


def _cnn(rng, bits):
    k, per, t_steps = 4, 4, 4
    coarse = _templates(rng, k, 16, flips=4)  # 4x4 templates, upsampled to 8x8
    tmpl = np.stack([np.kron(c.reshape(4, 4), np.ones((2, 2))).astype(bool).ravel() for c in coarse])
    chan_gain = np.array([1.0, 0.8, 0.6, 0.45])
    w1 = np.zeros((4, 1, 3, 3))
    for ch, g in enumerate(chan_gain):
        w1[ch, 0] = g * 0.08
        w1[ch, 0, 1, 1] = g
    nrn = NeuronParams(1.0, 1.0)
    conv = LayerSpec("conv2d", (1, 8, 8), (4, 8, 8), kernel=3, padding=1,
                     weights=_quantize(w1 * 1.5, bits), neuron=nrn, name="conv1")
    pool = LayerSpec("avgpool", (4, 8, 8), (4, 4, 4), kernel=2, stride=2, name="pool1")
    gains = np.linspace(1.0, 0.5, per)
    w2 = _hidden_weights(rng, coarse, per, chan=chan_gain)
    cls = LayerSpec("fc", (k * per,), (k,), weights=_one_hot_classifier(k, per, bits),
                    name="classifier")
    probe = SnnModel((conv, pool, LayerSpec("fc", (4, 4, 4), (k * per,), weights=_quantize(w2, bits),
                                            neuron=nrn, name="fc1"), cls), (1, 8, 8), t_steps, k)
    clean = np.where(tmpl, 0.8, 0.1).reshape(k, 1, 8, 8)
    pooled = _layer_input_mean(probe, 2, clean)
    fc1 = LayerSpec("fc", (4, 4, 4), (k * per,), weights=_scaled(w2, pooled, per, gains, 1.8, bits),
                    neuron=nrn, name="fc1")
    model = SnnModel((conv, pool, fc1, cls), (1, 8, 8), t_steps, k)

    def draw(n, nz):
        x, y = _draw_samples(rng, tmpl, n, 0.8, 0.1, nz)
        return x.reshape(-1, 1, 8, 8), y

    return model, draw


def generate_synthetic_workload(seed: int, profile: str = "tiny-mlp", *, samples_per_class: int = 16,
                                noise: float = 0.25, weight_bits: int = 8) -> tuple[SnnModel, Dataset]:
    """Template-matching model plus a labeled dataset it classifies perfectly.

    Samples are class templates plus bounded uniform noise on a 1/255 grid;
    draws the exact model misclassifies are rejected, so accuracy under exact
    arithmetic is 1.0 by construction.
    """
    if profile not in PROFILES:
        raise ContractError(f"unknown profile {profile!r}; choose from {PROFILES}")
    rng = np.random.default_rng([seed, PROFILES.index(profile)])
    build = _mlp if profile == "tiny-mlp" else _cnn
    model, draw = build(rng, weight_bits)
    calib, _ = draw(8, noise)
    model = _calibrate_bn(model, calib)
    k = model.num_classes
    xs, ys = [], []
    for c in range(k):
        got = 0
        while got < samples_per_class:
            x, y = draw(2 * samples_per_class, noise)
            sel = y == c
            x, y = _keep_correct(model, x[sel], y[sel], samples_per_class - got)
            xs.append(x)
            ys.append(y)
            got += len(y)
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(len(y))
    return model, Dataset(x[order], y[order].astype(np.uint16))


def vgg9_shaped(seed: int = 0, input_hw: int = 32, num_classes: int = 10,
                weight_bits: int = 8, timesteps: int = 4) -> SnnModel:
    """Random-weight model with the VGG9 layer stack, for cost studies only."""
    rng = np.random.default_rng([seed, 99])
    plan = [64, 64, "P", 128, 128, "P", 256, 256, 256, "P"]
    layers, shape = [], (3, input_hw, input_hw)
    for idx, item in enumerate(plan):
        c, h, w = shape
        if item == "P":
            out = (c, h // 2, w // 2)
            layers.append(LayerSpec("avgpool", shape, out, kernel=2, stride=2, name=f"pool{idx}"))
        else:
            wt = rng.normal(0.0, 1.0, size=(item, c, 3, 3)) * np.sqrt(2.0 / (9 * c))
            out = (item, h, w)
            layers.append(LayerSpec("conv2d", shape, out, kernel=3, padding=1,
                                    weights=_quantize(wt, weight_bits),
                                    neuron=NeuronParams(1.0, 0.5), name=f"conv{idx}"))
        shape = out
    flat = int(np.prod(shape))
    for name, width, nrn in (("fc1", 1024, NeuronParams(1.0, 0.5)), ("classifier", num_classes, None)):
        wt = rng.normal(0.0, 1.0, size=(width, flat)) * np.sqrt(2.0 / flat)
        layers.append(LayerSpec("fc", shape if len(layers) and layers[-1].kind != "fc" else (flat,),
                                (width,), weights=_quantize(wt, weight_bits), neuron=nrn, name=name))
        shape, flat = (width,), width
    return SnnModel(tuple(layers), (3, input_hw, input_hw), timesteps, num_classes)


def random_inputs(seed: int, shape: Iterable[int], count: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return np.round(rng.uniform(0, 1, size=(count,) + tuple(shape)) * 255) / 255
