# -*- coding: utf-8 -*-
"""Equivalent transformation and the low-rank finetuning quantizer.

A quantized layer with frozen weight ``W`` (``m × n``, ``y = x Wᵀ + B``) is
rewritten as

    y = x (L1 L2)ᵀ + Q_W(φ ⊙ M) · Q_A((x - γ) ⊘ φ) + Q_B(B + γ Mᵀ),
    M = R + F1 F2,  R = W - L1 L2

``L1 L2`` is a full precision rank-``r`` skip initialized from the SVD of
``W``; ``F1 F2`` is a rank-``r'`` finetuner that starts at exactly zero;
``φ = exp(log_phi) > 0`` and ``γ`` move activation range into the weights
without changing the full precision output (the ``γ Mᵀ`` term compensates the
shift). Only ``L1, L2, F1, F2, log_phi, γ`` and the quantizer scales and
zero-points are trainable; ``W`` and ``B`` never change.

3×3 convolutions go through the same code: the input is zero padded, the
transform and activation quantizer act per pixel and channel, and patches are
unfolded (im2col) so the convolution becomes a matrix product.
"""

import logging
from math import ceil

import numpy as np

from common.const import BIAS_BITS, FP_BITS, Granularity
from common.linalg import low_rank_factors
from common.tensor import Tensor, DimensionError, as_tensor, im2col, pad2d, parameter
from common.util import ParameterError, array_digest
from quant.quantizer import Quantizer

__all__ = ['EquivalentTransform', 'FinetuneQuantizer', 'init_finetune_quantizer', 'default_rank',
           'apply_conv_as_matmul', 'conv_forward', 'kernel_to_matrix']

#: Standard deviation of the random initialization of F1
FINETUNE_INIT_STD = 1e-4


def default_rank(m, n):
    """``ceil(min(m, n) / 16)``, at least 1."""
    return max(1, int(ceil(min(m, n) / 16.)))


def kernel_to_matrix(kernel):
    """Reshape a ``k × k × c_in × c_out`` kernel to the ``c_out × (k·k·c_in)`` matrix im2col expects."""
    kernel = as_tensor(kernel)
    k, k2, c_in, c_out = kernel.shape
    if k != k2:
        raise DimensionError('Kernel must be square, got {}'.format(kernel.shape))
    return kernel.reshape(k * k * c_in, c_out).transpose()


def conv_forward(x, weight, bias, k):
    """Stride-1, zero-padded ``k × k`` convolution of an NHWC tensor.

    :param Tensor x: Input of shape ``(N, H, W, c_in)``.
    :param Tensor weight: Matrix of shape ``(c_out, k·k·c_in)``.
    :param Tensor bias: Vector of shape ``(c_out,)`` or `None`.
    :return: Output of shape ``(N, H, W, c_out)``.
    """
    n, h, w, c = x.shape
    if weight.shape[1] != k * k * c:
        raise DimensionError('Convolution expects {} input channels, got {}'.format(weight.shape[1] // (k * k), c))
    cols = im2col(pad2d(x, k // 2), k) if k > 1 else x.reshape(n * h * w, c)
    y = cols @ weight.transpose()
    if bias is not None:
        y = y + bias
    return y.reshape(n, h, w, weight.shape[0])


def apply_conv_as_matmul(kernel, x, bias=None):
    """Convolve NHWC ``x`` with a ``k × k × c_in × c_out`` kernel via im2col.

    Stride 1 with ``k // 2`` pixels of zero padding, so the output keeps the
    input's spatial size.

    :rtype: Tensor
    """
    kernel = as_tensor(kernel)
    return conv_forward(as_tensor(x), kernel_to_matrix(kernel), None if bias is None else as_tensor(bias),
                        kernel.shape[0])


class EquivalentTransform:
    """Per-input-channel scale ``φ = exp(log_phi)`` and offset ``γ``.

    Starts at the identity (``φ = 1``, ``γ = 0``).
    """

    def __init__(self, channels):
        self.log_phi = parameter(np.zeros(channels), name='log_phi')
        self.gamma = parameter(np.zeros(channels), name='gamma')

    @property
    def channels(self):
        return self.log_phi.size

    @property
    def phi(self):
        return self.log_phi.exp()

    def transform_input(self, x):
        """``(x - γ) ⊘ φ`` along the last axis of ``x``."""
        return (x - self.gamma) / self.phi

    def parameters(self):
        return [self.log_phi, self.gamma]


class FinetuneQuantizer:
    """Quantized stand-in for one linear or convolution layer.

    :ivar Tensor weight: Frozen ``m × n`` weight.
    :ivar Tensor bias: Frozen length-``m`` bias, or `None`.
    :ivar Tensor l1: ``m × r`` skip factor, or `None` when ``r = 0``.
    :ivar Tensor l2: ``r × n`` skip factor, or `None` when ``r = 0``.
    :ivar Tensor f1: ``m × r'`` finetuner factor, or `None` when ``r' = 0``.
    :ivar Tensor f2: ``r' × n`` finetuner factor, or `None` when ``r' = 0``.
    :ivar EquivalentTransform et: The activation transform.
    :ivar Quantizer q_w: Weight quantizer (signed, symmetric).
    :ivar Quantizer q_a: Activation quantizer (unsigned, per-tensor).
    :ivar Quantizer q_b: Bias quantizer (signed, symmetric, per-tensor).
    :ivar int kernel: Convolution kernel size, or `None` for a linear layer.
    """

    def __init__(self, weight, bias, l1, l2, f1, f2, et, q_w, q_a, q_b, kernel=None, name=''):
        self.weight = weight
        self.bias = bias
        self.l1, self.l2 = l1, l2
        self.f1, self.f2 = f1, f2
        self.et = et
        self.q_w, self.q_a, self.q_b = q_w, q_a, q_b
        self.kernel = kernel
        self.name = name
        self.train_et = True

    def __repr__(self):
        return 'FinetuneQuantizer({}, shape={}, r={}, r\'={}, kernel={})'.format(
            self.name, self.weight.shape, self.rank, self.finetune_rank, self.kernel)

    @property
    def shape(self):
        return self.weight.shape

    @property
    def rank(self):
        return 0 if self.l1 is None else self.l1.shape[1]

    @property
    def finetune_rank(self):
        return 0 if self.f1 is None else self.f1.shape[1]

    @property
    def quantizers(self):
        return [q for q in (self.q_w, self.q_a, self.q_b) if q is not None]

    # -- Weights ----------------------------------------------------------------------------------------------------

    def skip(self):
        """The full precision skip ``L1 L2``, or `None`."""
        return None if self.l1 is None else self.l1 @ self.l2

    def residual(self):
        """``R = W - L1 L2``, recomputed from the frozen weight on every call."""
        skip = self.skip()
        return self.weight if skip is None else self.weight - skip

    def quant_branch_weight(self):
        """``M = R + F1 F2``, the weight the quantized branch carries."""
        m = self.residual()
        if self.f1 is not None:
            m = m + self.f1 @ self.f2
        return m

    def _tiled(self, v):
        # The transform acts per input channel; im2col columns repeat channels once per kernel tap
        if self.kernel is None or self.kernel == 1:
            return v
        return _tile(v, self.kernel ** 2)

    def transformed_weight(self):
        """``φ ⊙ M`` with ``φ`` tiled over the kernel taps."""
        return self.quant_branch_weight() * self._tiled(self.et.phi)

    def compensated_bias(self):
        """``B + γ Mᵀ``: the bias that cancels the activation shift."""
        m = self.quant_branch_weight()
        gamma = self._tiled(self.et.gamma)
        shift = (gamma.reshape(1, gamma.size) @ m.transpose()).reshape(m.shape[0])
        return shift if self.bias is None else self.bias + shift

    # -- Forward ----------------------------------------------------------------------------------------------------

    def _check_input(self, x):
        if self.kernel is None:
            if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
                raise DimensionError('{} expects inputs of shape (N, {}), got {}'.format(
                    self.name, self.weight.shape[1], x.shape))
        elif x.ndim != 4 or x.shape[3] * self.kernel ** 2 != self.weight.shape[1]:
            raise DimensionError('{} expects NHWC inputs with {} channels, got {}'.format(
                self.name, self.weight.shape[1] // self.kernel ** 2, x.shape))

    def prepare_input(self, x):
        """Zero pad a feature map (convolutions only); linear inputs pass unchanged."""
        if self.kernel is None or self.kernel == 1:
            return x
        return pad2d(x, self.kernel // 2)

    def _unfold(self, x):
        if self.kernel is None:
            return x
        if self.kernel == 1:
            n, h, w, c = x.shape
            return x.reshape(n * h * w, c)
        return im2col(x, self.kernel)

    def quantized_activation(self, x):
        """``Q_A((x - γ) ⊘ φ)`` on the (padded) input, before unfolding."""
        return self.q_a(self.et.transform_input(self.prepare_input(x)))

    def forward(self, x):
        """Quantized layer output.

        :param Tensor x: ``(N, n)`` for a linear layer, ``(N, H, W, c_in)``
            for a convolution.
        :return: ``(N, m)`` or ``(N, H, W, m)``.
        :rtype: Tensor
        :raises DimensionError: When ``x`` doesn't match the layer.
        """
        x = as_tensor(x)
        self._check_input(x)
        cols_q = self._unfold(self.quantized_activation(x))
        y = cols_q @ self.q_w(self.transformed_weight()).transpose()
        skip = self.skip()
        if skip is not None:
            y = y + self._unfold(self.prepare_input(x)) @ skip.transpose()
        bias = self.compensated_bias()
        y = y + (self.q_b(bias) if self.q_b is not None else bias)
        if self.kernel is not None:
            n, h, w = x.shape[:3]
            y = y.reshape(n, h, w, self.weight.shape[0])
        return y

    __call__ = forward

    # -- Calibration and training -----------------------------------------------------------------------------------

    def calibrate_weights(self):
        """Min-max calibrate ``Q_W`` on ``φ ⊙ M`` and ``Q_B`` on the compensated bias."""
        self.q_w.calibrate(self.transformed_weight().data)
        if self.q_b is not None:
            self.q_b.calibrate(self.compensated_bias().data)
        return self

    def calibrate_activations(self, samples):
        """Min-max calibrate ``Q_A`` on transformed module inputs.

        :param samples: Iterable of raw layer inputs (same layout as
            :meth:`forward` takes).
        """
        self.q_a.calibrate([self.et.transform_input(self.prepare_input(as_tensor(s))).data for s in samples])
        return self

    def set_mode(self, mode):
        """Put all three quantizers in ``mode``; returns newly trainable tensors."""
        params = []
        for q in self.quantizers:
            params.extend(q.set_mode(mode))
        return params

    def parameters(self):
        """Every trainable tensor of this layer, in a fixed order."""
        params = [t for t in (self.l1, self.l2, self.f1, self.f2) if t is not None]
        if self.train_et:
            params.extend(self.et.parameters())
        for q in self.quantizers:
            params.extend(q.parameters())
        return params

    def frozen_digest(self):
        """SHA256 digest of the frozen ``W`` and ``B``."""
        arrays = [self.weight.data] + ([] if self.bias is None else [self.bias.data])
        return array_digest(*arrays)

    def overhead_params(self):
        """Full precision parameters added on top of the quantized weight.

        ``(r + r')·(m + n) + 2·len(φ) + quantizer scalars``.
        """
        m, n = self.weight.shape
        scalars = sum(q.scalar_count() for q in self.quantizers)
        return (self.rank + self.finetune_rank) * (m + n) + 2 * self.et.channels + scalars

    def state(self, prefix):
        """Trainable and calibrated arrays for a checkpoint, keyed under ``prefix``."""
        out = {}
        for key in ('l1', 'l2', 'f1', 'f2'):
            t = getattr(self, key)
            if t is not None:
                out['{}.{}'.format(prefix, key)] = t.data
        out[prefix + '.log_phi'] = self.et.log_phi.data
        out[prefix + '.gamma'] = self.et.gamma.data
        for key, q in (('q_w', self.q_w), ('q_a', self.q_a), ('q_b', self.q_b)):
            if q is not None:
                out.update(q.state('{}.{}'.format(prefix, key)))
        return out

    def load_state(self, tensors, prefix):
        """Restore arrays saved with :meth:`state` (in place, keeping tensor identity)."""
        for key in ('l1', 'l2', 'f1', 'f2'):
            t = getattr(self, key)
            if t is not None:
                t.data[...] = tensors['{}.{}'.format(prefix, key)]
        self.et.log_phi.data[...] = tensors[prefix + '.log_phi']
        self.et.gamma.data[...] = tensors[prefix + '.gamma']
        for key, q in (('q_w', self.q_w), ('q_a', self.q_a), ('q_b', self.q_b)):
            if q is not None:
                q.load_state(tensors, '{}.{}'.format(prefix, key))
        return self


def _tile(v, reps):
    """Repeat a length-``c`` tensor ``reps`` times (differentiably), giving length ``reps·c``."""
    c = v.size
    ones = Tensor(np.ones((reps, 1)))
    return (ones @ v.reshape(1, c)).reshape(reps * c)


def init_finetune_quantizer(weight, bias, rank=None, finetune_rank=None, bits=(4, 4), granularity=Granularity.channel,
                            bias_bits=BIAS_BITS, kernel=None, act_samples=None, rng=None, name=''):
    """Build a :class:`FinetuneQuantizer` around a frozen layer.

    :param weight: ``m × n`` weight matrix (for a convolution, the
        ``c_out × (k·k·c_in)`` matrix from :func:`kernel_to_matrix`).
    :param bias: Length-``m`` bias or `None`.
    :param int rank: Skip rank ``r``; `None` means :func:`default_rank`.
    :param int finetune_rank: Finetuner rank ``r'``; `None` means ``r``.
    :param tuple bits: ``(w, a)`` bit-widths; 32 means full precision.
    :param granularity: Granularity of ``Q_W``.
    :param int bias_bits: Bit-width of ``Q_B`` (32 keeps the bias FP). Ignored
        when the weights are full precision; the bias then stays FP too.
    :param int kernel: Kernel size for convolutions, `None` for linear.
    :param act_samples: Optional raw layer inputs to calibrate ``Q_A`` on.
    :param numpy.random.Generator rng: Source for the F1 initialization.
    :param str name: Layer name used in logs and errors.
    :rtype: FinetuneQuantizer
    :raises ParameterError: When ``r + r'`` exceeds ``min(m, n)`` or a rank
        is negative.
    """
    w = as_tensor(weight).detach()
    b = None if bias is None else as_tensor(bias).detach()
    m, n = w.shape
    r = default_rank(m, n) if rank is None else int(rank)
    r2 = r if finetune_rank is None else int(finetune_rank)
    if r < 0 or r2 < 0:
        raise ParameterError('Ranks must be >= 0, got r={}, r\'={}'.format(r, r2))
    if r + r2 > min(m, n):
        raise ParameterError('r + r\' = {} is too large for a {}x{} layer (at most {})'.format(r + r2, m, n, min(m, n)))
    if kernel is not None and n % (kernel * kernel):
        raise DimensionError('Weight with {} columns is not a {}x{} kernel matrix'.format(n, kernel, kernel))
    rng = rng if rng is not None else np.random.default_rng(0)

    l1 = l2 = f1 = f2 = None
    if r:
        a, c = low_rank_factors(w, r)
        l1, l2 = parameter(a, name='l1'), parameter(c, name='l2')
    if r2:
        f1 = parameter(rng.normal(0., FINETUNE_INIT_STD, size=(m, r2)), name='f1')
        f2 = parameter(np.zeros((r2, n)), name='f2')
    channels = n if kernel is None else n // (kernel * kernel)
    w_bits, a_bits = bits
    fq = FinetuneQuantizer(
        weight=w, bias=b, l1=l1, l2=l2, f1=f1, f2=f2, et=EquivalentTransform(channels),
        q_w=Quantizer(w_bits, signed=True, symmetric=True, granularity=granularity, axis=0, name=name + '.q_w'),
        q_a=Quantizer(a_bits, signed=False, symmetric=False, granularity=Granularity.tensor, name=name + '.q_a'),
        q_b=None if b is None else Quantizer(FP_BITS if w_bits == FP_BITS else bias_bits, signed=True, symmetric=True, name=name + '.q_b'),
        kernel=kernel, name=name)
    fq.calibrate_weights()
    if act_samples is not None:
        fq.calibrate_activations(act_samples)
    logging.debug('Initialized {}: W{}A{}, r={}, r\'={}'.format(fq, w_bits, a_bits, r, r2))
    return fq

