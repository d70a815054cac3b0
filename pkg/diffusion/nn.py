# -*- coding: utf-8 -*-
"""Layers the toy network is assembled from."""

import math

import numpy as np

from common.tensor import DimensionError, as_tensor, parameter
from quant.reparam import conv_forward

__all__ = ['Conv2d', 'Linear', 'timestep_embedding']


class Conv2d:
    """Stride-1 ``k × k`` convolution on NHWC tensors, with ``k // 2`` zero padding.

    The kernel is stored as the ``c_out × (k·k·c_in)`` matrix that im2col
    columns multiply, so a quantizer can wrap it without reshaping.
    """

    def __init__(self, c_in, c_out, k, rng, name='', bias_init=0., gain=1.):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.name = name
        std = gain * math.sqrt(2. / (k * k * c_in))
        self.weight = parameter(rng.normal(0., std, size=(c_out, k * k * c_in)), name=name + '.weight')
        self.bias = parameter(np.full(c_out, float(bias_init)), name=name + '.bias')

    def __repr__(self):
        return 'Conv2d({}, {}->{}, k={})'.format(self.name, self.c_in, self.c_out, self.k)

    def __call__(self, x):
        return conv_forward(as_tensor(x), self.weight, self.bias, self.k)

    def parameters(self):
        return [self.weight, self.bias]

    def param_count(self):
        return self.weight.size + self.bias.size

    def macs(self, height, width):
        """Multiply-accumulates for one image of the given output size."""
        return height * width * self.weight.size

    def set_identity(self, scale=1.):
        """Make the layer copy input channel ``i`` to output channel ``i`` (times ``scale``)."""
        w = np.zeros((self.c_out, self.k, self.k, self.c_in))
        centre = self.k // 2
        for i in range(min(self.c_in, self.c_out)):
            w[i, centre, centre, i] = scale
        self.weight.data[...] = w.reshape(self.c_out, -1)
        self.bias.data[...] = 0.
        return self


class Linear:
    """``y = x Wᵀ + b``"""

    def __init__(self, n_in, n_out, rng, name='', std=None):
        self.n_in, self.n_out = n_in, n_out
        self.name = name
        std = math.sqrt(1. / n_in) if std is None else std
        self.weight = parameter(rng.normal(0., std, size=(n_out, n_in)), name=name + '.weight')
        self.bias = parameter(np.zeros(n_out), name=name + '.bias')

    def __call__(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError('{} expects inputs of shape (N, {}), got {}'.format(self.name, self.n_in, x.shape))
        return x @ self.weight.transpose() + self.bias

    def parameters(self):
        return [self.weight, self.bias]

    def param_count(self):
        return self.weight.size + self.bias.size


def timestep_embedding(t, dim, max_period=10000.):
    """Sinusoidal embedding of a timestep.

    ``[cos(t·f_0) .. cos(t·f_{h-1}), sin(t·f_0) .. sin(t·f_{h-1})]`` with
    ``f_i = max_period^(-i/h)`` and ``h = dim // 2``; odd ``dim`` gets a
    trailing zero.

    :rtype: numpy.ndarray
    """
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = float(t) * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(1)])
    return emb
