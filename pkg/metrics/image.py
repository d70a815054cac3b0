# -*- coding: utf-8 -*-
"""Full-reference image metrics."""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from common.const import PSNR_CAP_DB, PSNR_MSE_FLOOR, SSIM_K1, SSIM_K2, SSIM_WINDOW
from common.tensor import DimensionError, Tensor
from common.util import ParameterError

__all__ = ['psnr', 'ssim', 'latent_error']


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pair(a, b, what):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise DimensionError('{} needs equal shapes, got {} and {}'.format(what, a.shape, b.shape))
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio ``10·log10(peak² / MSE)`` in dB.

    Capped at :data:`~common.const.PSNR_CAP_DB` when the MSE is below
    :data:`~common.const.PSNR_MSE_FLOOR`.

    :raises DimensionError: When the shapes differ.
    """
    a, b = _pair(a, b, 'psnr')
    err = float(np.mean((a - b) ** 2))
    if err < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10. * math.log10(peak * peak / err))


def _to_nhwc(x):
    if x.ndim == 2:
        return x[None, :, :, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise DimensionError('ssim needs HW, HWC or NHWC images, got shape {}'.format(x.shape))


def ssim(a, b, peak=1.0, window=SSIM_WINDOW):
    """Mean structural similarity over all ``window × window`` windows (stride 1).

    Statistics are the plain (uniformly weighted) window mean, variance and
    covariance. Channels and batch entries are averaged.

    :param a: ``HW``, ``HWC`` or ``NHWC`` image.
    :param b: Same shape as ``a``.
    :param float peak: Dynamic range of the pixel values.
    :rtype: float
    :raises DimensionError: When the shapes differ.
    :raises ParameterError: When the image is smaller than the window.
    """
    a, b = _pair(a, b, 'ssim')
    a, b = _to_nhwc(a), _to_nhwc(b)
    if a.shape[1] < window or a.shape[2] < window:
        raise ParameterError('Image {}x{} is smaller than the {}x{} SSIM window'.format(
            a.shape[1], a.shape[2], window, window))
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    wa = sliding_window_view(a, (window, window), axis=(1, 2))
    wb = sliding_window_view(b, (window, window), axis=(1, 2))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    s_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s_map.mean())


def latent_error(z_q, z_fp):
    """Mean over the batch of ``‖z_q − z_fp‖₂`` per sample."""
    z_q, z_fp = _pair(z_q, z_fp, 'latent_error')
    d = (z_q - z_fp).reshape(z_q.shape[0], -1)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))
