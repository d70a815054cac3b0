# -*- coding: utf-8 -*-
"""Constant values used by qartlab."""

from enum import IntEnum

#: Lower clamp applied to every quantization scale (learned or calibrated)
SCALE_FLOOR = 1e-8

#: Bit-width that means "leave this tensor in full precision"
FP_BITS = 32

#: Bit-widths a quantizer accepts besides :data:`FP_BITS`
VALID_BITS = (2, 3, 4, 5, 6, 7, 8)

#: Bit-width used for bias quantizers unless the config switches them off
BIAS_BITS = 8

#: Default Adam learning rate for quantization and finetuning parameters
QUANT_LR = 1e-5

#: PSNR reported when two images are (numerically) identical
PSNR_CAP_DB = 99.0

#: MSE under which two images count as identical for PSNR
PSNR_MSE_FLOOR = 1e-12

#: SSIM constants (Wang et al.) and window edge length in pixels
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8

#: Weight of the perceptual proxy in the backbone training loss
BACKBONE_PERCEPTUAL_WEIGHT = 0.1

#: Default linear beta schedule end points
BETA_START = 1e-4
BETA_END = 2e-2

#: Default number of diffusion timesteps
T_MAX = 1000

#: Magic bytes and format version of the checkpoint container
CKPT_MAGIC = b'QART'
CKPT_VERSION = 1

#: Column order of metric CSV rows
METRIC_COLUMNS = ('tag', 'bits', 'psnr_db', 'ssim', 'latent_error')

#: Column order of the per-stage calibration log
STAGE_LOG_COLUMNS = ('stage', 'step', 'module_loss', 'image_loss', 'total')

#: Column order of the timestep error profile (``STAGED_COLUMNS`` are appended with ``--staged``)
PROFILE_COLUMNS = ('t', 'lambda', 'delta_z')
STAGED_COLUMNS = ('eps_error', 'image_error')

#: Environment variable that overrides the output directory
OUT_ENV_VAR = 'QART_OUT'

#: Names of the six ablation arms, in report order
ABLATION_ARMS = ('baseline', 'TRQ', 'RPQ*', 'TRQ+RPQ*', 'TRQ+ET', 'TRQ+RPQ*+ET')


class QuantizerMode(IntEnum):
    """How a quantizer treats the tensor it is handed.

    - ``fp_passthrough``: return the input unchanged.
    - ``maxmin_static``: fake-quantize with scale and zero-point frozen after
      min-max calibration.
    - ``learned_step``: fake-quantize with scale and zero-point registered as
      trainable parameters.
    """
    fp_passthrough = 0
    maxmin_static = 1
    learned_step = 2
    # Aliases
    passthrough = 0
    maxmin = 1
    lsq = 2


class Granularity(IntEnum):
    """Granularity of a quantizer's scale and zero-point."""
    tensor = 0
    channel = 1
    # Aliases
    per_tensor = 0
    per_channel = 1


class Stage(IntEnum):
    """Stages of the calibration procedure, in execution order."""
    trq = 0
    rpq = 1
    et = 2


def bits_label(w_bits, a_bits):
    """Return the ``W<w>A<a>`` label for a bit setting."""
    return 'W{}A{}'.format(w_bits, a_bits)
