# -*- coding: utf-8 -*-
"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that has a ``requires_grad`` ancestor
records a node holding its inputs and a backward rule. Nodes are stamped with
a global sequence number at creation, so the nodes reachable from a scalar
loss can be replayed in exactly the reverse of the order they were executed
(see :class:`GradTape`). Leaves accumulate gradients into ``.grad``; shared
subexpressions receive the sum of their consumers' gradients.

Typical usage:

>>> w = Tensor([[1., 2.], [3., 4.]], requires_grad=True)
>>> x = Tensor([[1.], [1.]])
>>> loss = (w @ x).sum()
>>> loss.backward()
>>> w.grad
array([[1., 1.],
       [1., 1.]])

Rounding and clipping carry replaceable backward rules, which is how the
straight-through estimator is expressed (:func:`custom_grad`).
"""

from itertools import count

import numpy as np

from common.util import LabError

__all__ = ['Tensor', 'GradTape', 'DimensionError', 'NumericError', 'no_grad', 'grad_enabled', 'custom_grad',
           'round_half_away', 'im2col', 'pad2d', 'upsample_nearest', 'avg_pool2', 'zeros', 'ones', 'randn',
           'parameter', 'as_tensor']

_SEQ = count()
_GRAD_ENABLED = [True]


class DimensionError(LabError, ValueError):
    """Raised when operand shapes don't agree (inner dims, broadcasting, rule output)."""


class NumericError(LabError, ArithmeticError):
    """Raised when an operand is outside an operation's numeric domain, or an iteration fails to converge."""


class no_grad:
    """Context manager that disables graph recording.

    >>> with no_grad():
    ...     y = model_forward(x)  # y has no backward node
    """

    def __enter__(self):
        self.prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        _GRAD_ENABLED[0] = self.prev


def grad_enabled():
    """Return `True` when new operations are being recorded."""
    return _GRAD_ENABLED[0]


def round_half_away(a):
    """Round to the nearest integer, ties away from zero (``2.5 → 3``, ``-2.5 → -3``).

    :param numpy.ndarray a: Values to round.
    :rtype: numpy.ndarray
    """
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError('Cannot broadcast shapes {} and {} for {}'.format(a.shape, b.shape, op))


class _Node:
    """One recorded operation: its inputs and how to push a gradient back to them."""

    __slots__ = ('seq', 'inputs', 'backward', 'op')

    def __init__(self, inputs, backward, op):
        self.seq = next(_SEQ)
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tensor:
    """A dense n-dimensional float64 array participating in autodiff.

    :ivar numpy.ndarray data: The values, row-major.
    :ivar bool requires_grad: Whether gradients should flow to this tensor.
    :ivar numpy.ndarray grad: Accumulated gradient (same shape as ``data``),
        or `None` before any backward pass reached this tensor.
    :ivar float floor: Optional lower bound that optimizers clamp this tensor
        to after every update (used for quantization scales).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        """
        :param data: Anything :func:`numpy.array` accepts. The values are
            copied and stored as float64.
        :param bool requires_grad: Mark the tensor as a leaf that receives
            gradients.
        :param str name: Optional name, used in error messages and
            checkpoints.
        """
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.floor = None
        self._node = None

    @classmethod
    def _wrap(cls, data):
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.floor = None
        out._node = None
        return out

    @classmethod
    def _make(cls, data, inputs, backward, op):
        out = cls._wrap(np.asarray(data, dtype=np.float64))
        if _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = _Node(inputs, backward, op)
        return out

    def __repr__(self):
        parts = ['Tensor({}'.format(np.array2string(self.data, precision=6, threshold=20))]
        if self.name:
            parts.append('name={!r}'.format(self.name))
        if self.requires_grad:
            parts.append('requires_grad=True')
        if self._node is not None:
            parts.append('op={}'.format(self._node.op))
        return ', '.join(parts) + ')'

    # -- Basic properties ------------------------------------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        """Return a copy of the values as a numpy array."""
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        """Return a new tensor sharing no graph with this one."""
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    # -- Backward ---------------------------------------------------------------------------------------------------

    def backward(self, grad=None):
        """Back-propagate from this tensor.

        :param grad: Upstream gradient. May be omitted only for scalars, in
            which case it is 1.
        :return: The tape that was replayed.
        :rtype: GradTape
        :raises DimensionError: When ``grad`` is omitted for a non-scalar.
        """
        if not self.requires_grad:
            return GradTape([])
        if grad is None:
            if self.data.size != 1:
                raise DimensionError('backward() without a gradient needs a scalar, got shape {}'.format(self.shape))
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError('Seed gradient shape {} != tensor shape {}'.format(grad.shape, self.shape))
        tape = GradTape.from_root(self)
        tape.replay(self, grad)
        return tape

    # -- Elementwise arithmetic -------------------------------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        _broadcast_check(self, other, 'add')
        a_shape, b_shape = self.shape, other.shape

        def _backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)
        return Tensor._make(self.data + other.data, (self, other), _backward, 'add')

    def __radd__(self, other):
        return as_tensor(other) + self

    def __sub__(self, other):
        other = as_tensor(other)
        _broadcast_check(self, other, 'sub')
        a_shape, b_shape = self.shape, other.shape

        def _backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)
        return Tensor._make(self.data - other.data, (self, other), _backward, 'sub')

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _broadcast_check(self, other, 'mul')
        a, b = self.data, other.data

        def _backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        return Tensor._make(a * b, (self, other), _backward, 'mul')

    def __rmul__(self, other):
        return as_tensor(other) * self

    def __truediv__(self, other):
        other = as_tensor(other)
        _broadcast_check(self, other, 'div')
        a, b = self.data, other.data
        if np.any(b == 0):
            raise NumericError('Division by zero')
        out = a / b

        def _backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)
        return Tensor._make(out, (self, other), _backward, 'div')

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), 'neg')

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError('Only constant exponents are supported')
        a = self.data
        if exponent < 1 and np.any(a < 0) and float(exponent) != int(exponent):
            raise NumericError('Fractional power of a negative value')

        def _backward(g):
            return (g * exponent * a ** (exponent - 1),)
        return Tensor._make(a ** exponent, (self,), _backward, 'pow')

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def sqrt(self):
        a = self.data
        if np.any(a < 0):
            raise NumericError('sqrt of a negative value')
        out = np.sqrt(a)

        def _backward(g):
            with np.errstate(divide='ignore'):
                return (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0.),)
        return Tensor._make(out, (self,), _backward, 'sqrt')

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), 'exp')

    def log(self):
        a = self.data
        if np.any(a <= 0):
            raise NumericError('log of a non-positive value')
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), 'log')

    def abs(self):
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),), 'abs')

    def sigmoid(self):
        out = 1. / (1. + np.exp(-self.data))
        return Tensor._make(out, (self,), lambda g: (g * out * (1. - out),), 'sigmoid')

    def silu(self):
        """``x * sigmoid(x)``"""
        return self * self.sigmoid()

    def relu(self):
        a = self.data
        return Tensor._make(np.maximum(a, 0.), (self,), lambda g: (g * (a > 0),), 'relu')

    def clip(self, lo, hi, rule=None):
        """Clamp to ``[lo, hi]``.

        The default backward rule passes the upstream gradient where the input
        fell inside the closed window and zeroes it elsewhere.

        :param lo: Lower bound (scalar or broadcastable array).
        :param hi: Upper bound (scalar or broadcastable array).
        :param rule: Optional replacement backward rule, see
            :func:`custom_grad`.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if rule is None:
            def rule(g, a, out):
                return g * ((a >= lo) & (a <= hi))
        return custom_grad(self, lambda a: np.minimum(np.maximum(a, lo), hi), rule, op='clip')

    def round(self, rule=None):
        """Round half away from zero.

        The default backward rule is the identity (straight-through); pass
        ``rule=lambda g, a, out: 0 * g`` to get round's true derivative.
        """
        if rule is None:
            def rule(g, a, out):
                return g
        return custom_grad(self, round_half_away, rule, op='round')

    # -- Reductions and shape ---------------------------------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), _backward, 'sum')

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1. / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise DimensionError('Cannot reshape {} into {}'.format(orig, shape))
        return Tensor._make(out, (self,), lambda g: (g.reshape(orig),), 'reshape')

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), 'transpose')

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        shape = self.shape

        def _backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)
        return Tensor._make(self.data[index], (self,), _backward, 'getitem')


class GradTape:
    """The recorded operations reachable from a root, in forward execution order.

    :ivar list entries: Non-leaf tensors ordered by the sequence number of the
        operation that produced them.
    :ivar list visited: Sequence numbers in the order :meth:`replay` visited
        them; the exact reverse of ``[t._node.seq for t in entries]``.
    """

    def __init__(self, entries):
        self.entries = entries
        self.visited = []

    @classmethod
    def from_root(cls, root):
        """Collect every recorded operation that ``root`` depends on."""
        seen = set()
        entries = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            entries.append(t)
            stack.extend(t._node.inputs)
        entries.sort(key=lambda t: t._node.seq)
        return cls(entries)

    def __len__(self):
        return len(self.entries)

    def replay(self, root, grad):
        """Push ``grad`` from ``root`` back through every recorded operation.

        Every tensor on the way that requires a gradient, the root and the
        intermediate results included, ends up with its total gradient added
        to ``.grad``.

        :raises DimensionError: When a backward rule returns a gradient whose
            shape differs from its input's.
        """
        pending = {id(root): grad}
        for t in reversed(self.entries):
            node = t._node
            g = pending.pop(id(t), None)
            if g is None:
                continue
            # all consumers of t have higher seq numbers, so g is complete here
            t.grad = g.copy() if t.grad is None else t.grad + g
            self.visited.append(node.seq)
            for parent, pg in zip(node.inputs, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != parent.shape:
                    raise DimensionError('Backward rule of {} returned shape {} for an input of shape {}'
                                         .format(node.op, pg.shape, parent.shape))
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg


def as_tensor(x):
    """Return ``x`` if it is a :class:`Tensor`, else wrap it as a constant."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None, floor=None):
    """Create a trainable leaf tensor.

    :param data: Initial values.
    :param str name: Name used in checkpoints.
    :param float floor: Lower clamp applied by optimizers after each update.
    :rtype: Tensor
    """
    t = Tensor(data, requires_grad=True, name=name)
    t.floor = floor
    return t


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad=False, name=None):
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def randn(shape, rng, std=1., requires_grad=False, name=None):
    """Normal samples drawn from ``rng`` (a :class:`numpy.random.Generator`)."""
    return Tensor(rng.normal(0., std, size=shape), requires_grad=requires_grad, name=name)


def custom_grad(x, forward, backward_rule, op='custom'):
    """Apply ``forward`` to ``x`` with a user supplied backward rule.

    :param Tensor x: The input.
    :param forward: Function mapping the input's numpy array to the output's.
        Its value is used exactly.
    :param backward_rule: Function ``rule(g, a, out)`` mapping the upstream
        gradient ``g``, the input values ``a`` and the output values ``out`` to
        the gradient with respect to the input. It replaces the analytic
        derivative of ``forward``.
    :param str op: Name recorded for the node.
    :rtype: Tensor
    :raises DimensionError: (during backward) When the rule's output shape
        differs from the input's.
    """
    x = as_tensor(x)
    a = x.data
    out = np.asarray(forward(a), dtype=np.float64)

    def _backward(g):
        return (backward_rule(g, a, out),)
    return Tensor._make(out, (x,), _backward, op)


def matmul(a, b):
    """Matrix product of two 2-D tensors.

    :raises DimensionError: When either operand isn't 2-D or the inner
        dimensions differ.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError('matmul needs 2-D operands, got {} and {}'.format(a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise DimensionError('matmul inner dimensions differ: {} x {}'.format(a.shape, b.shape))
    ad, bd = a.data, b.data

    def _backward(g):
        return g @ bd.T, ad.T @ g
    return Tensor._make(ad @ bd, (a, b), _backward, 'matmul')


def pad2d(x, pad, value=0.):
    """Pad the two spatial axes of an NHWC tensor by ``pad`` pixels on each side."""
    if x.ndim != 4:
        raise DimensionError('pad2d needs an NHWC tensor, got shape {}'.format(x.shape))
    p = int(pad)
    out = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)), mode='constant', constant_values=value)
    h, w = x.shape[1], x.shape[2]

    def _backward(g):
        return (g[:, p:p + h, p:p + w, :],)
    return Tensor._make(out, (x,), _backward, 'pad2d')


def im2col(x, k):
    """Unfold the k×k patches of an already padded NHWC tensor.

    For ``x`` of shape ``(N, H+k-1, W+k-1, C)`` the result has shape
    ``(N*H*W, k*k*C)``; column ``(ky*k + kx)*C + c`` holds
    ``x[n, y+ky, x+kx, c]``.
    """
    if x.ndim != 4:
        raise DimensionError('im2col needs an NHWC tensor, got shape {}'.format(x.shape))
    n, hp, wp, c = x.shape
    h, w = hp - k + 1, wp - k + 1
    if h < 1 or w < 1:
        raise DimensionError('Input {} is smaller than the {}x{} kernel'.format(x.shape, k, k))
    a = x.data
    patches = np.stack([a[:, ky:ky + h, kx:kx + w, :] for ky in range(k) for kx in range(k)], axis=3)
    out = patches.reshape(n * h * w, k * k * c)

    def _backward(g):
        g = g.reshape(n, h, w, k * k, c)
        full = np.zeros((n, hp, wp, c))
        for ky in range(k):
            for kx in range(k):
                full[:, ky:ky + h, kx:kx + w, :] += g[:, :, :, ky * k + kx, :]
        return (full,)
    return Tensor._make(out, (x,), _backward, 'im2col')


def upsample_nearest(x, factor):
    """Nearest-neighbour upsampling of the spatial axes of an NHWC tensor."""
    f = int(factor)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)

    def _backward(g):
        return (g.reshape(n, h, f, w, f, c).sum(axis=(2, 4)),)
    return Tensor._make(out, (x,), _backward, 'upsample')


def avg_pool2(x):
    """2×2 average pooling with stride 2 on an NHWC tensor."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError('avg_pool2 needs even spatial extents, got {}'.format(x.shape))
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
