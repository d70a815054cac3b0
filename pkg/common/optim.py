# -*- coding: utf-8 -*-
"""First-order optimizers for :class:`~common.tensor.Tensor` parameters.

Both optimizers only touch the parameters they were handed, and only those
that currently have a gradient. A parameter with a ``floor`` attribute is
clamped to it after every update, which keeps learned quantization scales
positive.

>>> opt = Adam([w, b], lr=1e-3)
>>> loss.backward()
>>> opt.step()
>>> opt.zero_grad()
"""

import numpy as np

from common.util import ConfigurationError

__all__ = ['SGD', 'Adam', 'sgd_step', 'adam_step', 'build_optimizer']


def _apply_floor(p):
    if p.floor is not None:
        np.maximum(p.data, p.floor, out=p.data)


def sgd_step(params, grads, state, lr):
    """One plain gradient descent step, in place.

    :param list params: Tensors to update.
    :param list grads: Gradients aligned with ``params``; `None` entries are
        skipped.
    :param dict state: Unused, kept so both step functions share a signature.
    :param float lr: Learning rate.
    :return: ``params``
    """
    for p, g in zip(params, grads):
        if g is None:
            continue
        p.data -= lr * g
        _apply_floor(p)
    return params


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam step, in place.

    :param list params: Tensors to update.
    :param list grads: Gradients aligned with ``params``; `None` entries are
        skipped (their moments don't advance either).
    :param dict state: Moment buffers keyed by ``id(param)``. Updated in place.
    :param float lr: Learning rate.
    :return: ``params``
    """
    b1, b2 = betas
    for p, g in zip(params, grads):
        if g is None:
            continue
        st = state.setdefault(id(p), {'t': 0, 'm': np.zeros_like(p.data), 'v': np.zeros_like(p.data)})
        st['t'] += 1
        st['m'] = b1 * st['m'] + (1 - b1) * g
        st['v'] = b2 * st['v'] + (1 - b2) * g * g
        m_hat = st['m'] / (1 - b1 ** st['t'])
        v_hat = st['v'] / (1 - b2 ** st['t'])
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        _apply_floor(p)
    return params


class _Optimizer:

    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        raise NotImplementedError


class SGD(_Optimizer):
    """Plain gradient descent."""

    def step(self):
        sgd_step(self.params, [p.grad for p in self.params], self.state, self.lr)


class Adam(_Optimizer):
    """Adam with bias correction."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)


def build_optimizer(name, params, lr):
    """Return the optimizer called ``name`` (``"adam"`` or ``"sgd"``)."""
    name = str(name).lower()
    if name == 'adam':
        return Adam(params, lr)
    if name == 'sgd':
        return SGD(params, lr)
    raise ConfigurationError('Unknown optimizer: {}'.format(name))
