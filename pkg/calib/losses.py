# -*- coding: utf-8 -*-
"""Differentiable image and module losses.

The perceptual term is a stand-in for a learned perceptual metric: the mean
absolute difference between the horizontal and vertical gradient maps of two
images, averaged over a 3-level Gaussian pyramid (binomial ``[1 4 6 4 1] / 16``
blur, then 2× decimation).
"""

import numpy as np

from common.tensor import DimensionError, as_tensor
from common.util import ConfigurationError

__all__ = ['LossConfig', 'mse', 'perceptual_proxy', 'image_loss', 'module_loss', 'PYRAMID_LEVELS']

#: Number of pyramid levels the perceptual proxy compares
PYRAMID_LEVELS = 3

_BINOMIAL = np.array([1., 4., 6., 4., 1.]) / 16.


class LossConfig:
    """Weights of the calibration objective.

    :ivar float a1: Weight of the perceptual proxy in the image loss.
    :ivar float a2: Weight of the MSE in the image loss.
    :ivar float module_loss_weight: Weight of the module loss in a
        per-module stage's objective.
    """

    def __init__(self, a1=1., a2=1., module_loss_weight=1.):
        self.a1, self.a2, self.module_loss_weight = float(a1), float(a2), float(module_loss_weight)
        if min(self.a1, self.a2, self.module_loss_weight) < 0:
            raise ConfigurationError('Loss weights must be non-negative')
        if self.a1 == 0 and self.a2 == 0:
            raise ConfigurationError('a1 and a2 must not both be zero')

    def __repr__(self):
        return 'LossConfig(a1={}, a2={}, module_loss_weight={})'.format(self.a1, self.a2, self.module_loss_weight)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.calib.a1, cfg.calib.a2, cfg.calib.module_loss_weight)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError('{} needs equal shapes, got {} and {}'.format(what, a.shape, b.shape))


def mse(a, b):
    """Mean squared error of two tensors of equal shape."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, 'mse')
    d = a - b
    return (d * d).mean()


def _blur_axis(x, axis):
    n = x.shape[axis]
    out = None
    for offset, weight in zip(range(-2, 3), _BINOMIAL):
        index = [slice(None)] * x.ndim
        index[axis] = np.clip(np.arange(n) + offset, 0, n - 1)
        term = x[tuple(index)] * weight
        out = term if out is None else out + term
    return out


def _gradient_maps(x):
    maps = []
    if x.shape[2] > 1:
        maps.append(x[:, :, 1:, :] - x[:, :, :-1, :])
    if x.shape[1] > 1:
        maps.append(x[:, 1:, :, :] - x[:, :-1, :, :])
    return maps


def perceptual_proxy(a, b, levels=PYRAMID_LEVELS):
    """Pyramid gradient-map distance between two NHWC images.

    :rtype: Tensor (scalar)
    """
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, 'perceptual_proxy')
    if a.ndim != 4:
        raise DimensionError('perceptual_proxy needs NHWC images, got shape {}'.format(a.shape))
    total, terms = None, 0
    for level in range(levels):
        if level:
            if min(a.shape[1], a.shape[2]) < 2:
                break
            a = _blur_axis(_blur_axis(a, 1), 2)[:, ::2, ::2, :]
            b = _blur_axis(_blur_axis(b, 1), 2)[:, ::2, ::2, :]
        for ga, gb in zip(_gradient_maps(a), _gradient_maps(b)):
            term = (ga - gb).abs().mean()
            total = term if total is None else total + term
            terms += 1
    if total is None:
        return (a - b).abs().mean() * 0.
    return total * (1. / terms)


def image_loss(i_q, i_fp, cfg=None):
    """``a1·perceptual_proxy + a2·MSE`` between a quantized and a full precision output.

    :param Tensor i_q: Quantized model output.
    :param i_fp: Full precision output (a constant).
    :param LossConfig cfg: Weights; defaults to ``a1 = a2 = 1``.
    :rtype: Tensor (scalar)
    :raises DimensionError: When the shapes differ.
    """
    cfg = cfg or LossConfig()
    i_q, i_fp = as_tensor(i_q), as_tensor(i_fp)
    _same_shape(i_q, i_fp, 'image_loss')
    loss = mse(i_q, i_fp) * cfg.a2
    if cfg.a1:
        loss = loss + perceptual_proxy(i_q, i_fp) * cfg.a1
    return loss


def module_loss(m_q_out, m_fp_out):
    """Mean squared error between a quantized module's output and its full precision output on the same input."""
    return mse(m_q_out, m_fp_out)
