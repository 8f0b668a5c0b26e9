"""Small hand-built models for unit tests."""

from __future__ import annotations

import numpy as np

from spikebench.snn import (BatchNormParams, LayerSpec, NeuronParams, QuantizedWeights,
                            SnnModel)


def fc(q, scale=1.0, bits=8, neuron=None, bn=None, share=1, name="fc"):
    q = np.asarray(q)
    return LayerSpec("fc", (q.shape[1],), (q.shape[0],), weights=QuantizedWeights(q, scale, bits),
                     neuron=neuron, bn=bn, lif_share=share, name=name)


def conv(q, in_shape, stride=1, padding=0, scale=1.0, bits=8, neuron=None, bn=None, name="conv"):
    q = np.asarray(q)
    c, h, w = in_shape
    k = q.shape[2]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return LayerSpec("conv2d", in_shape, (q.shape[0], ho, wo), kernel=k, stride=stride,
                     padding=padding, weights=QuantizedWeights(q, scale, bits), neuron=neuron,
                     bn=bn, name=name)


def pool(in_shape, k=2):
    c, h, w = in_shape
    return LayerSpec("avgpool", in_shape, (c, h // k, w // k), kernel=k, stride=k, name="pool")


def identity_bn(c):
    return BatchNormParams(np.zeros(c), np.ones(c) - 1e-5, np.ones(c), np.zeros(c))


def random_mlp(seed, sizes=(12, 16, 8, 3), T=3, threshold=1.0, leak=0.9, bits=8, bn=False):
    rng = np.random.default_rng(seed)
    qmax = 2 ** (bits - 1) - 1
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        q = rng.integers(-qmax, qmax + 1, size=(b, a))
        layers.append(fc(q, scale=2.0 / (qmax * np.sqrt(a)), bits=bits,
                         neuron=None if last else NeuronParams(leak, threshold),
                         bn=identity_bn(b) if bn else None, name=f"fc{i}"))
    return SnnModel(layers, (sizes[0],), T, sizes[-1])


def random_cnn(seed, T=2, bits=8):
    rng = np.random.default_rng(seed)
    qmax = 2 ** (bits - 1) - 1
    c1 = conv(rng.integers(-qmax, qmax + 1, size=(4, 2, 3, 3)), (2, 6, 6), padding=1,
              scale=1.0 / qmax, bits=bits, neuron=NeuronParams(0.8, 0.5), bn=identity_bn(4),
              name="c1")
    p = pool((4, 6, 6))
    f = fc(rng.integers(-qmax, qmax + 1, size=(3, 36)), scale=1.0 / qmax, bits=bits,
           bn=identity_bn(3), name="cls")
    return SnnModel([c1, p, f], (2, 6, 6), T, 3)
