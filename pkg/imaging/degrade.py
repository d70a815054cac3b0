# -*- coding: utf-8 -*-
"""Synthetic LR degradation: blur, box downsample, noise."""

import numpy as np

from common.util import ParameterError
from imaging.ppm import ImageFile

__all__ = ['gaussian_kernel', 'blur', 'box_downsample', 'degrade', 'KERNEL_SIZE', 'SCALE']

#: Edge length of the blur kernel
KERNEL_SIZE = 5

#: Downsampling factor between HR and LR
SCALE = 4


def gaussian_kernel(sigma=1.0, size=KERNEL_SIZE):
    """Normalized 1-D Gaussian of odd length ``size``; ``sigma <= 0`` gives a unit impulse.

    :rtype: numpy.ndarray
    """
    x = np.arange(size) - size // 2
    if sigma <= 0:
        return (x == 0).astype(np.float64)
    k = np.exp(-x * x / (2. * sigma * sigma))
    return k / k.sum()


def blur(img, sigma=1.0, size=KERNEL_SIZE):
    """Separable ``size × size`` Gaussian blur of an ``(H, W, C)`` array with edge padding."""
    k = gaussian_kernel(sigma, size)
    r = size // 2
    h, w = img.shape[:2]
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode='edge')
    rows = sum(k[i] * padded[i:i + h] for i in range(size))
    return sum(k[i] * rows[:, i:i + w] for i in range(size))


def box_downsample(img, factor=SCALE):
    """Average non-overlapping ``factor × factor`` blocks."""
    h, w, c = img.shape
    if h % factor or w % factor:
        raise ParameterError('Image {}x{} is not divisible by {}'.format(h, w, factor))
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def degrade(hr, seed, blur_sigma=1.0, noise_sigma=0.02, factor=SCALE):
    """Make the LR partner of an HR image.

    Gaussian blur (5×5, edge padded), ``factor``× box downsample, additive
    Gaussian noise from ``numpy.random.default_rng(seed)``, clamp to
    ``[0, 1]``.

    :param hr: An :class:`~imaging.ppm.ImageFile` or an ``(H, W, 3)`` array
        in ``[0, 1]``. The result has the same type.
    :param int seed: Noise seed.
    :raises ParameterError: When the HR sides aren't divisible by ``factor``.
    """
    as_file = isinstance(hr, ImageFile)
    img = hr.to_float() if as_file else np.asarray(hr, dtype=np.float64)
    if img.shape[0] % factor or img.shape[1] % factor:
        raise ParameterError('HR size {}x{} is not divisible by {}'.format(img.shape[0], img.shape[1], factor))
    lr = box_downsample(blur(img, blur_sigma), factor)
    if noise_sigma > 0:
        lr = lr + np.random.default_rng(seed).normal(0., noise_sigma, size=lr.shape)
    lr = np.clip(lr, 0., 1.)
    return ImageFile.from_float(lr) if as_file else lr
