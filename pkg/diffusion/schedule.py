# -*- coding: utf-8 -*-
"""Noise schedule, the one-step LR → HR latent transform, and the timestep error profile.

With ``ᾱ_T`` the cumulative product of ``α_t = 1 - β_t``, the one-step model
turns the encoder's latent ``Z_L`` into

    Z_H = (Z_L - √(1 - ᾱ_T) · ε(Z_L; T, c_y)) / √ᾱ_T

so any error in the predicted noise ``ε`` reaches ``Z_H`` multiplied by
``λ(T) / √ᾱ_T`` with ``λ(T) = √(1 - ᾱ_T)``. Both factors grow with ``T``,
which is why quantizing a backbone that runs at a small timestep does less
damage; :func:`measure_timestep_error` measures it.
"""

import csv
import logging
import math

import numpy as np

from common.const import BETA_START, BETA_END, T_MAX, PROFILE_COLUMNS, STAGED_COLUMNS
from common.log import progress_bar
from common.tensor import Tensor, DimensionError, as_tensor, no_grad
from common.util import ParameterError, DataError, DataIOError

__all__ = ['NoiseSchedule', 'TimestepErrorProfile', 'build_schedule', 'measure_timestep_error', 'SCHEDULE_KINDS']

#: Schedule kinds :func:`build_schedule` understands
SCHEDULE_KINDS = ('linear', 'scaled_linear', 'cosine')

#: Largest beta the cosine schedule may produce
MAX_BETA = 0.999


class NoiseSchedule:
    """``β_t``, ``α_t`` and ``ᾱ_t`` for ``t = 1 .. T_max``.

    Timesteps are 1-indexed everywhere: ``alpha_bar_at(1)`` is ``1 - β_1``.
    """

    def __init__(self, betas, kind='custom'):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ParameterError('A schedule needs at least one beta')
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ParameterError('Every beta must lie in (0, 1)')
        self.kind = kind
        self.beta = betas
        self.alpha = 1. - betas
        self.alpha_bar = np.cumprod(self.alpha)

    def __repr__(self):
        return 'NoiseSchedule(kind={}, t_max={})'.format(self.kind, self.t_max)

    @property
    def t_max(self):
        return self.beta.size

    def check_timestep(self, t):
        """:raises ParameterError: When ``t`` is outside ``[1, T_max]``."""
        if int(t) != t or not 1 <= t <= self.t_max:
            raise ParameterError('Timestep must be an integer in [1, {}], got {}'.format(self.t_max, t))
        return int(t)

    def alpha_bar_at(self, t):
        """``ᾱ_t``"""
        return float(self.alpha_bar[self.check_timestep(t) - 1])

    def lam(self, t):
        """``λ(t) = √(1 - ᾱ_t)``"""
        return math.sqrt(1. - self.alpha_bar_at(t))

    def lambdas(self):
        """``λ(t)`` for every ``t``, as an array of length ``T_max``."""
        return np.sqrt(1. - self.alpha_bar)

    def error_gain(self, t):
        """``λ(t) / √ᾱ_t``: how much a unit error in ε grows on its way into ``Z_H``."""
        return self.lam(t) / math.sqrt(self.alpha_bar_at(t))

    def lr_to_hr_latent(self, z_l, t, eps_fn, c_y=None):
        """One-step denoising of an LR latent.

        :param Tensor z_l: The encoder's latent.
        :param int t: Timestep in ``[1, T_max]``.
        :param eps_fn: Callable ``eps_fn(z_l, t, c_y)`` returning the noise
            prediction, same shape as ``z_l``.
        :param c_y: Condition handed through to ``eps_fn``.
        :return: ``Z_H``; differentiable through ``eps_fn``.
        :rtype: Tensor
        :raises ParameterError: When ``t`` is out of range.
        :raises DimensionError: When ``eps_fn`` returns the wrong shape.
        """
        t = self.check_timestep(t)
        z_l = as_tensor(z_l)
        eps = as_tensor(eps_fn(z_l, t, c_y))
        if eps.shape != z_l.shape:
            raise DimensionError('Noise prediction shape {} != latent shape {}'.format(eps.shape, z_l.shape))
        a_bar = self.alpha_bar_at(t)
        return (z_l - math.sqrt(1. - a_bar) * eps) * (1. / math.sqrt(a_bar))


def build_schedule(kind='linear', t_max=T_MAX, beta_start=BETA_START, beta_end=BETA_END):
    """Build a noise schedule.

    - ``linear``: ``β`` evenly spaced from ``beta_start`` to ``beta_end``.
    - ``scaled_linear``: ``√β`` evenly spaced, then squared.
    - ``cosine``: ``ᾱ(t) = cos²((t/T + 0.008) / 1.008 · π/2)``, with ``β``
      capped at 0.999.

    :rtype: NoiseSchedule
    :raises ParameterError: When ``t_max < 1`` or ``kind`` is unknown.
    """
    t_max = int(t_max)
    if t_max < 1:
        raise ParameterError('T_max must be >= 1, got {}'.format(t_max))
    if kind == 'linear':
        betas = np.linspace(beta_start, beta_end, t_max)
    elif kind == 'scaled_linear':
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, t_max) ** 2
    elif kind == 'cosine':
        def alpha_bar_fn(s):
            return math.cos((s + 0.008) / 1.008 * math.pi / 2) ** 2
        betas = np.array([min(1 - alpha_bar_fn((i + 1) / t_max) / alpha_bar_fn(i / t_max), MAX_BETA)
                          for i in range(t_max)])
    else:
        raise ParameterError('Unknown schedule kind {!r}; expected one of {}'.format(kind, SCHEDULE_KINDS))
    return NoiseSchedule(betas, kind)


class TimestepErrorProfile:
    """Measured latent quantization error per timestep, sorted by ``t``.

    Each row is a dict with keys ``t``, ``lambda``, ``delta_z`` and, when the
    staged errors were measured, ``eps_error`` and ``image_error``.
    """

    def __init__(self, rows, bits=None):
        self.rows = sorted(rows, key=lambda r: r['t'])
        self.bits = bits

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    @property
    def timesteps(self):
        return [r['t'] for r in self.rows]

    def best_timestep(self):
        """The ``t`` with the smallest ``delta_z`` (the first one on ties)."""
        return min(self.rows, key=lambda r: (r['delta_z'], r['t']))['t']

    def write_csv(self, path, staged=False):
        """Write ``t, lambda, delta_z`` (plus the staged columns) to ``path``."""
        columns = PROFILE_COLUMNS + (STAGED_COLUMNS if staged else ())
        try:
            with open(path, 'w', newline='') as fout:
                writer = csv.writer(fout)
                writer.writerow(columns)
                for r in self.rows:
                    writer.writerow([r['t']] + [repr(float(r[c])) for c in columns[1:]])
        except OSError as e:
            raise DataIOError('Could not write {}: {}'.format(path, e))
        return path


def _per_probe_norm(a, b):
    d = (a - b).reshape(a.shape[0], -1)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def measure_timestep_error(model, bits, t_list, probe_set, quant_options=None, progress=False):
    """Measure how far quantization moves ``Z_H`` at each timestep.

    For every ``t`` the model's quantizers are min-max calibrated at ``bits``
    on the probe set at that timestep, then the full precision and the fully
    quantized forward passes see the same FP encoder latent ``Z_L``.
    ``delta_z`` is the mean over probes of ``‖Z_H^q - Z_H^fp‖₂``;
    ``eps_error`` and ``image_error`` are the same norm on the noise
    prediction and on the output image.

    :param model: A :class:`~diffusion.toy.ToyOSDSR`.
    :param tuple bits: ``(w, a)`` bit-widths.
    :param list t_list: Timesteps to measure.
    :param probe_set: LR images, an array of shape ``(N, H, W, 3)``.
    :param dict quant_options: Extra keyword arguments for
        :meth:`~diffusion.toy.ToyOSDSR.attach_quantizers`.
    :rtype: TimestepErrorProfile
    :raises DataError: When the probe set is empty.
    """
    probes = probe_set.data if isinstance(probe_set, Tensor) else np.asarray(probe_set, dtype=np.float64)
    if probes.ndim != 4 or probes.shape[0] == 0:
        raise DataError('The probe set is empty')
    t_list = sorted(set(model.schedule.check_timestep(t) for t in t_list))
    if not t_list:
        raise ParameterError('No timesteps to measure')
    quant_options = quant_options or {}
    active = model.registry_names()

    rows = []
    bar = progress_bar(len(t_list), 'Timesteps', progress)
    for i, t in enumerate(t_list):
        model.attach_quantizers(bits, probes, t, rank=0, finetune_rank=0, **quant_options)
        fp_trace, q_trace = {}, {}
        with no_grad():
            img_fp = model.forward(probes, t, trace=fp_trace)
            img_q = model.forward(probes, t, active=active, trace=q_trace)
        row = {
            't': t,
            'lambda': model.schedule.lam(t),
            'delta_z': _per_probe_norm(q_trace['z_h'].data, fp_trace['z_h'].data),
            'eps_error': _per_probe_norm(q_trace['eps'].data, fp_trace['eps'].data),
            'image_error': _per_probe_norm(img_q.data, img_fp.data),
        }
        rows.append(row)
        logging.info('t={:4d} lambda={:.4f} delta_z={:.6g} eps_error={:.6g} image_error={:.6g}'.format(
            t, row['lambda'], row['delta_z'], row['eps_error'], row['image_error']))
        bar.update(i + 1)
    bar.finish()
    return TimestepErrorProfile(rows, tuple(bits))
