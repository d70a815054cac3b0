# -*- coding: utf-8 -*-
"""Uniform affine fake quantization.

A tensor ``x`` is mapped to integers with ``x_int = clip(round((x - z) / s),
l, u)`` and back with ``x̂ = s·x_int + z``. :func:`fake_quant` does both in one
differentiable step: inside the clip window the gradient with respect to ``x``
passes straight through, outside it is zero, and ``s``/``z`` get the
learned-step gradients

- ``∂x̂/∂s = round(v) - v`` inside the window, ``l`` or ``u`` outside,
- ``∂x̂/∂z = 0`` inside the window, ``1`` outside,

with ``v = (x - z) / s``.

Weights use signed symmetric quantizers (``z = 0``), activations unsigned
asymmetric ones. A :class:`Quantizer` bundles a bit-width, a mode (see
:class:`~common.const.QuantizerMode`) and the calibrated :class:`QuantParams`.
"""

import logging

import numpy as np

from common.const import FP_BITS, SCALE_FLOOR, QuantizerMode, Granularity
from common.tensor import Tensor, as_tensor, parameter, round_half_away
from common.util import LabError, ParameterError, validate_bits

__all__ = ['CalibrationError', 'QuantParams', 'Quantizer', 'qrange', 'quantize', 'dequantize', 'fake_quant',
           'calibrate_maxmin', 'learned_step_grad']


class CalibrationError(LabError):
    """Raised when calibration statistics can't be collected (empty stream, quantizer never calibrated)."""


def qrange(bits, signed):
    """Integer clip window ``(l, u)`` of a ``bits``-bit grid.

    >>> qrange(4, True)
    (-8, 7)
    >>> qrange(2, False)
    (0, 3)
    """
    bits = validate_bits(bits)
    if bits == FP_BITS:
        raise ParameterError('A {}-bit quantizer is full precision and has no integer grid'.format(FP_BITS))
    if signed:
        return -2 ** (bits - 1), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


class QuantParams:
    """Scale, zero-point and clip window of one quantizer.

    ``scale`` and ``zero_point`` are :class:`~common.tensor.Tensor` objects of
    identical shape: ``()`` for a per-tensor quantizer, or the shape that
    broadcasts along the channel axis for a per-channel one (``(m, 1)`` for an
    ``m × n`` weight matrix).
    """

    def __init__(self, bits, scale, zero_point, signed, axis=None):
        self.bits = validate_bits(bits)
        self.signed = bool(signed)
        self.lo, self.hi = qrange(self.bits, self.signed)
        self.scale = scale if isinstance(scale, Tensor) else Tensor(scale)
        self.zero_point = zero_point if isinstance(zero_point, Tensor) else Tensor(zero_point)
        self.axis = axis
        if self.scale.shape != self.zero_point.shape:
            raise ParameterError('Scale shape {} != zero-point shape {}'.format(self.scale.shape,
                                                                               self.zero_point.shape))
        self.validate()

    def __repr__(self):
        return 'QuantParams(bits={}, signed={}, window=[{}, {}], scale_shape={})'.format(
            self.bits, self.signed, self.lo, self.hi, self.scale.shape)

    @property
    def granularity(self):
        return Granularity.tensor if self.axis is None else Granularity.channel

    def validate(self):
        """:raises ParameterError: When any scale isn't positive."""
        if not np.all(self.scale.data > 0):
            raise ParameterError('Quantization scale must be positive, got min {}'.format(self.scale.data.min()))
        return self

    def copy(self):
        return QuantParams(self.bits, self.scale.data.copy(), self.zero_point.data.copy(), self.signed, self.axis)


def quantize(x, qp):
    """Map ``x`` onto the integer grid of ``qp``.

    :param x: Values to quantize.
    :type x: Tensor or numpy.ndarray
    :param QuantParams qp: Quantization parameters.
    :return: Integers in ``[qp.lo, qp.hi]``.
    :rtype: numpy.ndarray (int64)
    :raises ParameterError: When a scale isn't positive.
    """
    qp.validate()
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    v = (a - qp.zero_point.data) / qp.scale.data
    return np.clip(round_half_away(v), qp.lo, qp.hi).astype(np.int64)


def dequantize(x_int, qp):
    """Map grid integers back to real values, ``s·x_int + z``.

    :rtype: numpy.ndarray
    :raises ParameterError: When an integer is outside ``[qp.lo, qp.hi]``.
    """
    x_int = np.asarray(x_int)
    if x_int.size and (x_int.min() < qp.lo or x_int.max() > qp.hi):
        raise ParameterError('Integer values [{}, {}] outside the grid window [{}, {}]'
                             .format(x_int.min(), x_int.max(), qp.lo, qp.hi))
    return qp.scale.data * x_int + qp.zero_point.data


def fake_quant(x, qp):
    """Differentiable quantize-then-dequantize.

    The forward value equals ``dequantize(quantize(x, qp), qp)``. Gradients
    reach ``x`` where ``(x - z) / s`` lies in ``[l, u]`` and, when they are
    trainable, ``qp.scale`` and ``qp.zero_point``.

    :rtype: Tensor
    """
    x = as_tensor(x)
    v = (x - qp.zero_point) / qp.scale
    return v.clip(qp.lo, qp.hi).round() * qp.scale + qp.zero_point


def _reduce_axes(ndim, axis):
    return tuple(i for i in range(ndim) if i != axis)


def calibrate_maxmin(samples, bits, granularity=Granularity.tensor, signed=False, symmetric=False, axis=0):
    """Min-max calibration over a stream of samples, in one pass.

    Asymmetric: ``s = (max - min) / (u - l)`` and ``z = min - l·s``, so
    ``quantize(min) = l`` and ``quantize(max) = u``. Symmetric (``z = 0``):
    ``s = max(|min|, |max|) / u``. A channel whose min equals its max gets
    ``s = 1e-8`` and ``z`` = that value, which reproduces it exactly.

    :param samples: Iterable of tensors or arrays (or a single one). Every
        sample must have the same shape along ``axis`` for per-channel
        calibration.
    :param int bits: Bit-width.
    :param granularity: Per-tensor or per-channel.
    :type granularity: Granularity or str
    :param bool signed: Signed integer window.
    :param bool symmetric: Fix the zero-point at 0.
    :param int axis: Channel axis for per-channel calibration.
    :rtype: QuantParams
    :raises CalibrationError: When the stream is empty.
    """
    if isinstance(granularity, str):
        granularity = Granularity[granularity]
    if isinstance(samples, (Tensor, np.ndarray)):
        samples = [samples]
    lo_stat, hi_stat = None, None
    ndim = None
    for sample in samples:
        a = sample.data if isinstance(sample, Tensor) else np.asarray(sample, dtype=np.float64)
        if a.size == 0:
            continue
        if granularity == Granularity.channel:
            axes = _reduce_axes(a.ndim, axis)
            s_min, s_max = a.min(axis=axes, keepdims=True), a.max(axis=axes, keepdims=True)
        else:
            s_min, s_max = np.array(a.min()), np.array(a.max())
        if lo_stat is None:
            lo_stat, hi_stat, ndim = s_min, s_max, a.ndim
        else:
            lo_stat, hi_stat = np.minimum(lo_stat, s_min), np.maximum(hi_stat, s_max)
    if lo_stat is None:
        logging.error('Min-max calibration was handed no samples')
        raise CalibrationError('Cannot calibrate a quantizer on an empty sample stream')

    lo, hi = qrange(bits, signed)
    constant = hi_stat <= lo_stat
    if symmetric:
        amax = np.maximum(np.abs(lo_stat), np.abs(hi_stat))
        scale = amax / hi
        zero = np.zeros_like(scale)
    else:
        scale = (hi_stat - lo_stat) / (hi - lo)
        zero = lo_stat - lo * np.maximum(scale, SCALE_FLOOR)
    scale = np.where(constant, SCALE_FLOOR, np.maximum(scale, SCALE_FLOOR))
    zero = np.where(constant, lo_stat, zero)
    return QuantParams(bits, scale, zero, signed, axis if granularity == Granularity.channel else None)


def learned_step_grad(qp, train_zero_point=True):
    """Turn ``qp``'s scale (and zero-point) into trainable parameters.

    The scale gets a lower clamp of 1e-8 that optimizers apply after every
    step. Symmetric quantizers keep their zero-point frozen at 0 by passing
    ``train_zero_point=False``.

    :param QuantParams qp: Parameters to make trainable. Modified in place.
    :return: The newly trainable tensors.
    :rtype: list(Tensor)
    """
    qp.scale = parameter(qp.scale.data, name='scale', floor=SCALE_FLOOR)
    params = [qp.scale]
    if train_zero_point:
        qp.zero_point = parameter(qp.zero_point.data, name='zero_point')
        params.append(qp.zero_point)
    else:
        qp.zero_point = Tensor(qp.zero_point.data)
    return params


class Quantizer:
    """A callable fake quantizer with its mode and parameters.

    >>> q = Quantizer(4, signed=False)
    >>> q.calibrate([activations])
    >>> y = q(x)

    A 32-bit quantizer stays in ``fp_passthrough`` mode whatever is asked of
    it, and returns its input object unchanged.
    """

    def __init__(self, bits, signed=False, symmetric=False, granularity=Granularity.tensor, axis=0, name=''):
        self.bits = validate_bits(bits)
        self.signed = signed
        self.symmetric = symmetric
        self.granularity = Granularity[granularity] if isinstance(granularity, str) else Granularity(granularity)
        self.axis = axis
        self.name = name
        self.qp = None
        self.mode = QuantizerMode.fp_passthrough if self.bits == FP_BITS else QuantizerMode.maxmin_static

    def __repr__(self):
        return 'Quantizer({}, bits={}, mode={})'.format(self.name, self.bits, self.mode.name)

    @property
    def is_fp(self):
        return self.mode == QuantizerMode.fp_passthrough

    def calibrate(self, samples):
        """Min-max calibrate on ``samples``. A no-op for full precision quantizers."""
        if self.bits == FP_BITS:
            return self
        learned = self.mode == QuantizerMode.learned_step
        self.qp = calibrate_maxmin(samples, self.bits, self.granularity, self.signed, self.symmetric, self.axis)
        if learned:
            learned_step_grad(self.qp, not self.symmetric)
        return self

    def set_mode(self, mode):
        """Switch mode. Returns the tensors that became trainable (if any).

        :param mode: Target mode.
        :type mode: QuantizerMode or str
        :raises CalibrationError: When a quantized mode is requested before
            calibration.
        """
        mode = QuantizerMode[mode] if isinstance(mode, str) else QuantizerMode(mode)
        if self.bits == FP_BITS or mode == QuantizerMode.fp_passthrough:
            self.mode = QuantizerMode.fp_passthrough
            return []
        if self.qp is None:
            raise CalibrationError('Quantizer {} must be calibrated before switching to {}'.format(self.name, mode.name))
        if mode == QuantizerMode.learned_step and self.mode != QuantizerMode.learned_step:
            self.mode = mode
            return learned_step_grad(self.qp, not self.symmetric)
        if mode == QuantizerMode.maxmin_static and self.mode == QuantizerMode.learned_step:
            self.qp = self.qp.copy()
        self.mode = mode
        return []

    def parameters(self):
        """Trainable tensors (empty unless in ``learned_step`` mode)."""
        if self.mode != QuantizerMode.learned_step:
            return []
        return [t for t in (self.qp.scale, self.qp.zero_point) if t.requires_grad]

    def scalar_count(self):
        """Number of stored scale and zero-point values (0 at full precision)."""
        if self.is_fp or self.qp is None:
            return 0
        return self.qp.scale.size + self.qp.zero_point.size

    def __call__(self, x):
        if self.mode == QuantizerMode.fp_passthrough:
            return x
        if self.qp is None:
            raise CalibrationError('Quantizer {} used before calibration'.format(self.name))
        return fake_quant(x, self.qp)

    def state(self, prefix):
        """Arrays describing the calibrated parameters, keyed for a checkpoint."""
        if self.qp is None:
            return {}
        return {prefix + '.scale': self.qp.scale.data, prefix + '.zero_point': self.qp.zero_point.data}

    def load_state(self, tensors, prefix):
        """Restore parameters saved with :meth:`state`."""
        key = prefix + '.scale'
        if key not in tensors:
            return self
        qp = QuantParams(self.bits, tensors[key], tensors[prefix + '.zero_point'], self.signed,
                         self.axis if self.granularity == Granularity.channel else None)
        if self.mode == QuantizerMode.learned_step:
            learned_step_grad(qp, not self.symmetric)
        self.qp = qp
        return self
