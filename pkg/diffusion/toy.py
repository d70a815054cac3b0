# -*- coding: utf-8 -*-
"""A toy one-step diffusion super-resolution network.

::

    img_lr ─ encoder ─ Z_L ─┬───────────────────────────┬─ Z_H ─ decoder ─ img_hr
       (FP)                 └─ denoiser(Z_L, T, c_y) = ε ┘
                               (one-step transform, see diffusion.schedule)

- encoder: 3×3 conv 3→c, SiLU, 2× average pool, 3×3 conv c→2c, 2× average
  pool. Always full precision.
- denoiser: ``blocks`` blocks of {3×3 conv 2c→2c, timestep embedding
  projection added as a bias, SiLU}; the last block has no nonlinearity and
  returns ε. The learned condition vector ``c_y`` is added after block 2.
- decoder: {4× nearest upsample, 3×3 conv 2c→c, SiLU} then {``scale``×
  nearest upsample, 3×3 conv c→3}, clamped to ``[0, 1]``.

The quantizable modules are, in inference order, ``denoiser.block1 ..
denoiser.block<blocks>, decoder.layer1, decoder.layer2``; each one holds one
convolution that can be swapped for a
:class:`~quant.reparam.FinetuneQuantizer`.
"""

import logging
from collections import OrderedDict

import numpy as np

from calib.losses import mse, perceptual_proxy
from common.checkpoint import save_checkpoint, load_checkpoint
from common.const import BACKBONE_PERCEPTUAL_WEIGHT, BIAS_BITS, FP_BITS, Granularity, QuantizerMode
from common.log import progress_bar
from common.optim import Adam
from common.tensor import Tensor, DimensionError, as_tensor, avg_pool2, no_grad, parameter, upsample_nearest
from common.util import PROGRESS_PERIOD, LabError, DataError, FormatError, array_digest, chunkify
from diffusion.nn import Conv2d, Linear, timestep_embedding
from diffusion.schedule import build_schedule
from quant.reparam import init_finetune_quantizer

__all__ = ['RegistryError', 'TrainingError', 'ModuleHandle', 'ToyOSDSR', 'train_backbone', 'save_model', 'load_model',
           'model_from_state', 'clone_model', 'backbone_loss', 'ENCODER_STRIDE']

#: Encoder downsampling factor (two 2× pools)
ENCODER_STRIDE = 4


class RegistryError(LabError):
    """Raised when a module name isn't in the registry or a module has no quantizer attached."""


class TrainingError(LabError):
    """Raised when training diverges (the loss stops being finite)."""


def _clamp01(h):
    # Straight-through clamp: saturated pixels still pass gradient back
    return h.clip(0., 1., rule=lambda g, a, out: g)


class ModuleHandle:
    """One quantizable module: a convolution plus its full precision extras.

    :ivar str name: Registry name, e.g. ``"denoiser.block3"``.
    :ivar int inference_index: Position in inference order (0-based).
    :ivar Conv2d conv: The full precision convolution.
    :ivar fq: Its :class:`~quant.reparam.FinetuneQuantizer`, or `None`.
    """

    def __init__(self, name, inference_index, conv, temb_proj=None, activation=True, conditioned=False, upsample=1):
        self.name = name
        self.inference_index = inference_index
        self.conv = conv
        self.temb_proj = temb_proj
        self.activation = activation
        self.conditioned = conditioned
        self.upsample = upsample
        self.fq = None

    def __repr__(self):
        return 'ModuleHandle({}, index={}, quantized={})'.format(self.name, self.inference_index, self.quantized)

    @property
    def quantized(self):
        """Whether a quantizer is attached."""
        return self.fq is not None

    def conv_input(self, h):
        return upsample_nearest(h, self.upsample) if self.upsample > 1 else h

    def run_conv(self, x, quantized=False):
        """The convolution alone, either full precision or through the quantizer."""
        if not quantized:
            return self.conv(x)
        if self.fq is None:
            raise RegistryError('Module {} has no quantizer attached'.format(self.name))
        return self.fq(x)

    def finish(self, y, temb=None, c_y=None):
        """Everything after the convolution: timestep bias, nonlinearity, condition."""
        if self.temb_proj is not None:
            y = y + self.temb_proj(temb).reshape(1, 1, 1, self.conv.c_out)
        if self.activation:
            y = y.silu()
        if self.conditioned:
            y = y + c_y
        return y

    def __call__(self, h, temb=None, c_y=None, quantized=False, trace=None):
        x = self.conv_input(h)
        y = self.finish(self.run_conv(x, quantized), temb, c_y)
        if trace is not None:
            trace[self.name] = (x, y)
        return y

    def fp_parameters(self):
        params = self.conv.parameters()
        if self.temb_proj is not None:
            params += self.temb_proj.parameters()
        return params

    def extra_param_count(self, c_y_size=0):
        """Full precision parameters besides the convolution (timestep projection, condition)."""
        count = 0 if self.temb_proj is None else self.temb_proj.param_count()
        return count + (c_y_size if self.conditioned else 0)


class ToyOSDSR:
    """The toy one-step diffusion SR network.

    :ivar int timestep: The timestep the backbone was trained at (`None`
        before training).
    :ivar list loss_history: Training losses recorded by
        :func:`train_backbone`.
    """

    def __init__(self, channels=16, temb_dim=32, blocks=4, scale=4, seed=0, activation='silu', schedule_kind='linear',
                 t_max=1000, beta_start=1e-4, beta_end=2e-2):
        if blocks < 1:
            raise DimensionError('The denoiser needs at least one block')
        self.config = OrderedDict([('channels', int(channels)), ('temb_dim', int(temb_dim)), ('blocks', int(blocks)),
                                   ('scale', int(scale)), ('seed', int(seed)), ('activation', activation),
                                   ('schedule_kind', schedule_kind), ('t_max', int(t_max)),
                                   ('beta_start', float(beta_start)), ('beta_end', float(beta_end))])
        self.schedule = build_schedule(schedule_kind, t_max, beta_start, beta_end)
        self.timestep = None
        self.loss_history = []
        self.temb_dim = temb_dim
        self.scale = scale
        act = activation == 'silu'
        self.act = act

        rng = np.random.default_rng(seed)
        c, c2 = channels, 2 * channels
        self.enc1 = Conv2d(3, c, 3, rng, 'encoder.conv1')
        self.enc2 = Conv2d(c, c2, 3, rng, 'encoder.conv2')
        self.c_y = parameter(rng.normal(0., 0.01, size=c2), name='c_y')
        cond_block = min(2, blocks) - 1
        self.denoiser = [ModuleHandle('denoiser.block{}'.format(i + 1), i,
                                      Conv2d(c2, c2, 3, rng, 'denoiser.block{}.conv'.format(i + 1)),
                                      temb_proj=Linear(temb_dim, c2, rng, 'denoiser.block{}.temb'.format(i + 1)),
                                      activation=act and i < blocks - 1, conditioned=i == cond_block)
                         for i in range(blocks)]
        self.decoder = [ModuleHandle('decoder.layer1', blocks, Conv2d(c2, c, 3, rng, 'decoder.layer1.conv'),
                                     activation=act, upsample=ENCODER_STRIDE),
                        ModuleHandle('decoder.layer2', blocks + 1,
                                     Conv2d(c, 3, 3, rng, 'decoder.layer2.conv', bias_init=0.5),
                                     activation=False, upsample=scale)]

    def __repr__(self):
        return 'ToyOSDSR(c={channels}, blocks={blocks}, scale={scale}, seed={seed})'.format(**self.config)

    @classmethod
    def from_config(cls, cfg, seed=None):
        """Build an untrained model from a run configuration."""
        return cls(channels=cfg.model.channels, temb_dim=cfg.model.temb_dim, blocks=cfg.model.blocks,
                   scale=cfg.model.scale, seed=cfg.seed if seed is None else seed,
                   schedule_kind=cfg.schedule.kind, t_max=cfg.schedule.t_max, beta_start=cfg.schedule.beta_start,
                   beta_end=cfg.schedule.beta_end)

    # -- Registry ---------------------------------------------------------------------------------------------------

    def registry(self):
        """Quantizable modules in inference order."""
        return self.denoiser + self.decoder

    def registry_names(self):
        return [h.name for h in self.registry()]

    def handle(self, name):
        """Look up a module by name (or pass a handle through).

        :raises RegistryError: When the name isn't registered.
        """
        if isinstance(name, ModuleHandle):
            name = name.name
        for h in self.registry():
            if h.name == name:
                return h
        raise RegistryError('Unknown module {!r}; registered: {}'.format(name, ', '.join(self.registry_names())))

    def _resolve_active(self, active):
        return frozenset(self.handle(a).name for a in (active or ()))

    # -- Forward ----------------------------------------------------------------------------------------------------

    def encode(self, x):
        """Full precision encoder, ``(N, H, W, 3)`` → ``(N, H/4, W/4, 2c)``."""
        h = self.enc1(x)
        if self.act:
            h = h.silu()
        h = self.enc2(avg_pool2(h))
        return avg_pool2(h)

    def forward(self, img_lr, t, active=(), trace=None):
        """Run the network.

        :param img_lr: ``(N, H, W, 3)`` images in ``[0, 1]``; ``H`` and ``W``
            divisible by 4.
        :param int t: Timestep of the one-step transform.
        :param active: Modules (names or handles) that run through their
            quantizers; every other module runs full precision.
        :param dict trace: If given, filled with ``z_l``, ``eps``, ``z_h`` and,
            per module name, its ``(conv_input, output)`` pair.
        :return: ``(N, H·scale, W·scale, 3)`` image in ``[0, 1]``.
        :rtype: Tensor
        :raises DimensionError: When the input isn't a 3-channel NHWC batch.
        :raises RegistryError: For unknown or unquantized active modules.
        """
        x = as_tensor(img_lr)
        if x.ndim != 4 or x.shape[3] != 3:
            raise DimensionError('Expected a batch of 3-channel NHWC images, got shape {}'.format(x.shape))
        if x.shape[1] % ENCODER_STRIDE or x.shape[2] % ENCODER_STRIDE:
            raise DimensionError('Image sides must be divisible by {}, got {}'.format(ENCODER_STRIDE, x.shape[1:3]))
        t = self.schedule.check_timestep(t)
        active = self._resolve_active(active)
        temb = self._temb(t)
        latents = {}

        def eps_fn(z, step, c_y):
            h = z
            for handle in self.denoiser:
                h = handle(h, temb, c_y, handle.name in active, trace)
            latents['eps'] = h
            return h

        latents['z_l'] = self.encode(x)
        latents['z_h'] = self.schedule.lr_to_hr_latent(latents['z_l'], t, eps_fn, self.c_y)
        h = latents['z_h']
        for handle in self.decoder:
            h = handle(h, quantized=handle.name in active, trace=trace)
        if trace is not None:
            trace.update(latents)
        return _clamp01(h)

    def _temb(self, t):
        return Tensor(timestep_embedding(t, self.temb_dim).reshape(1, self.temb_dim))

    def module_reference(self, name, conv_input, t):
        """Full precision output of one module on a given convolution input.

        ``conv_input`` is the first element of the module's trace entry, so
        the result lines up with the second one.
        """
        h = self.handle(name)
        with no_grad():
            temb = self._temb(t) if h.temb_proj is not None else None
            return h.finish(h.conv(as_tensor(conv_input).detach()), temb, self.c_y)

    def forward_fp(self, img_lr, t):
        """Full precision output."""
        return self.forward(img_lr, t)

    def forward_quantized(self, img_lr, t, active_set):
        """Output with the modules in ``active_set`` quantized; an empty set equals :meth:`forward_fp`."""
        return self.forward(img_lr, t, active=active_set)

    # -- Parameters -------------------------------------------------------------------------------------------------

    def fp_parameters(self):
        """Every full precision parameter (what backbone training updates)."""
        params = self.enc1.parameters() + self.enc2.parameters() + [self.c_y]
        for h in self.registry():
            params += h.fp_parameters()
        return params

    def named_fp_parameters(self):
        return OrderedDict((p.name, p) for p in self.fp_parameters())

    def quant_parameters(self, names=None):
        """Trainable quantization and finetuning tensors of the given modules (all quantized ones by default)."""
        handles = self.registry() if names is None else [self.handle(n) for n in names]
        params = []
        for h in handles:
            if h.fq is not None:
                params += h.fq.parameters()
        return params

    def frozen_digest(self):
        """SHA256 digest over every full precision parameter."""
        return array_digest(*[p.data for p in self.fp_parameters()])

    def encoder_param_count(self):
        return self.enc1.param_count() + self.enc2.param_count()

    def conv_resolutions(self, height, width):
        """Output size of every convolution for an LR input of ``height × width``.

        :rtype: OrderedDict
        """
        sizes = OrderedDict([('encoder.conv1', (height, width)), ('encoder.conv2', (height // 2, width // 2))])
        h, w = height // ENCODER_STRIDE, width // ENCODER_STRIDE
        for handle in self.registry():
            h, w = h * handle.upsample, w * handle.upsample
            sizes[handle.name] = (h, w)
        return sizes

    # -- Quantizers -------------------------------------------------------------------------------------------------

    def collect_inputs(self, images, t, names=None, active=(), batch=8):
        """Run the network without gradients and gather each module's convolution inputs.

        :return: Module name → list of input arrays, one per batch.
        :rtype: dict
        """
        names = self.registry_names() if names is None else [self.handle(n).name for n in names]
        inputs = {n: [] for n in names}
        with no_grad():
            for chunk in chunkify(range(len(images)), batch):
                trace = {}
                self.forward(images[list(chunk)], t, active=active, trace=trace)
                for n in names:
                    inputs[n].append(trace[n][0].data)
        return inputs

    def attach_quantizers(self, bits, calib_images, t, rank=None, finetune_rank=None, granularity=Granularity.channel,
                          bias_bits=BIAS_BITS, seed=0, names=None, batch=8):
        """Wrap modules in freshly initialized finetuning quantizers.

        Weight and bias quantizers are min-max calibrated on the layer's
        weights, activation quantizers on the module inputs seen by the full
        precision network on ``calib_images`` at timestep ``t``.

        :param tuple bits: ``(w, a)`` bit-widths.
        :param calib_images: ``(N, H, W, 3)`` LR images.
        :param int t: Timestep the activations are collected at.
        :param int rank: Skip rank (`None` for the default).
        :param int finetune_rank: Finetuner rank (`None` for the default).
        :param names: Modules to wrap (all by default).
        :return: The handles that were wrapped.
        :rtype: list
        """
        if len(calib_images) == 0:
            raise DataError('Cannot calibrate quantizers without calibration images')
        handles = self.registry() if names is None else [self.handle(n) for n in names]
        inputs = self.collect_inputs(calib_images, t, [h.name for h in handles], batch=batch)
        for h in handles:
            h.fq = init_finetune_quantizer(h.conv.weight, h.conv.bias, rank, finetune_rank, tuple(bits), granularity,
                                           bias_bits, kernel=h.conv.k, act_samples=inputs[h.name],
                                           rng=np.random.default_rng(seed + h.inference_index), name=h.name)
        logging.info('Attached W{}A{} quantizers to {} modules (calibrated at t={})'.format(
            bits[0], bits[1], len(handles), t))
        return handles

    def detach_quantizers(self):
        for h in self.registry():
            h.fq = None

    def set_quant_mode(self, mode, names=None):
        """Switch the quantizers of the given modules (all by default) to ``mode``."""
        handles = self.registry() if names is None else [self.handle(n) for n in names]
        params = []
        for h in handles:
            if h.fq is None:
                raise RegistryError('Module {} has no quantizer attached'.format(h.name))
            params += h.fq.set_mode(mode)
        return params

    def quantized_names(self):
        return [h.name for h in self.registry() if h.fq is not None]

    # -- Serialization ----------------------------------------------------------------------------------------------

    def state(self):
        """Every array of the model (FP parameters, then quantizer state), keyed by name."""
        out = OrderedDict((name, p.data) for name, p in self.named_fp_parameters().items())
        for h in self.registry():
            if h.fq is not None:
                out.update(sorted(h.fq.state(h.name + '.fq').items()))
        return out

    def meta(self):
        """JSON-serializable description needed to rebuild the model."""
        quant = OrderedDict()
        for h in self.registry():
            fq = h.fq
            if fq is None:
                continue
            quant[h.name] = {
                'rank': fq.rank, 'finetune_rank': fq.finetune_rank,
                'bits': [fq.q_w.bits, fq.q_a.bits], 'bias_bits': None if fq.q_b is None else fq.q_b.bits,
                'granularity': fq.q_w.granularity.name, 'train_et': fq.train_et,
                'modes': [q.mode.name for q in (fq.q_w, fq.q_a, fq.q_b) if q is not None],
            }
        return {'config': dict(self.config), 'timestep': self.timestep, 'quant': quant}


def backbone_loss(out, hr, perceptual_weight=BACKBONE_PERCEPTUAL_WEIGHT):
    """``MSE + perceptual_weight · perceptual_proxy`` against the HR target."""
    loss = mse(out, hr)
    if perceptual_weight:
        loss = loss + perceptual_proxy(out, hr) * perceptual_weight
    return loss


def train_backbone(model, dataset, timestep, epochs, lr=1e-3, batch=4, perceptual_weight=BACKBONE_PERCEPTUAL_WEIGHT,
                   seed=0, progress=False):
    """Train the full precision network for one-step SR at ``timestep``.

    Every full precision parameter is trained with Adam on
    ``MSE + perceptual_weight · perceptual_proxy`` against the HR images.
    Batches are drawn from a seeded permutation of the dataset each epoch.

    :param ToyOSDSR model: The network; trained in place and tagged with
        ``timestep``.
    :param dataset: Paired data with ``lr`` and ``hr`` arrays.
    :param int timestep: Timestep of the one-step transform.
    :param int epochs: Passes over the dataset.
    :return: ``model``
    :raises DataError: When the dataset is empty.
    :raises TrainingError: When the loss stops being finite.
    """
    n = len(dataset)
    if n == 0:
        raise DataError('Cannot train a backbone on an empty dataset')
    model.schedule.check_timestep(timestep)
    model.timestep = int(timestep)
    opt = Adam(model.fp_parameters(), lr)
    rng = np.random.default_rng(seed)
    steps_per_epoch = (n + batch - 1) // batch
    bar = progress_bar(epochs * steps_per_epoch, 'Backbone T={}'.format(timestep), progress)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            out = model.forward(dataset.lr[idx], timestep)
            loss = backbone_loss(out, dataset.hr[idx], perceptual_weight)
            value = loss.item()
            if not np.isfinite(value):
                logging.critical('Backbone training diverged at epoch {} step {} (loss {})'.format(epoch, step, value))
                raise TrainingError('Backbone loss became {} at step {}'.format(value, step))
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.loss_history.append(value)
            step += 1
            bar.update(step)
            if step % PROGRESS_PERIOD == 0:
                logging.info('Backbone T={} step {}: loss {:.6f}'.format(timestep, step, value))
    bar.finish()
    logging.info('Trained backbone at T={} for {} steps; final loss {:.6f}'.format(
        timestep, step, model.loss_history[-1] if model.loss_history else float('nan')))
    return model


def save_model(model, path, extra_meta=None):
    """Write the model (and any attached quantizers) to a checkpoint."""
    meta = model.meta()
    if extra_meta:
        meta['extra'] = extra_meta
    return save_checkpoint(path, model.state(), meta)


def model_from_state(tensors, meta, source='state'):
    """Rebuild a model from :meth:`ToyOSDSR.state` and :meth:`ToyOSDSR.meta`.

    :param str source: Where the state came from, for error messages.
    :rtype: ToyOSDSR
    :raises FormatError: When a tensor or config entry the model needs is
        missing.
    """
    try:
        model = ToyOSDSR(**meta['config'])
    except (KeyError, TypeError) as e:
        raise FormatError('{} has no usable model config: {}'.format(source, e))
    model.timestep = meta.get('timestep')
    try:
        for name, p in model.named_fp_parameters().items():
            p.data[...] = tensors[name]
        for name, q in meta.get('quant', {}).items():
            h = model.handle(name)
            h.fq = init_finetune_quantizer(h.conv.weight, h.conv.bias, q['rank'], q['finetune_rank'], tuple(q['bits']),
                                           q['granularity'], q['bias_bits'] or FP_BITS, kernel=h.conv.k, name=h.name)
            h.fq.train_et = q['train_et']
            h.fq.load_state(tensors, h.name + '.fq')
            for quantizer, mode in zip(h.fq.quantizers, q['modes']):
                quantizer.set_mode(QuantizerMode[mode])
    except KeyError as e:
        raise FormatError('{} is missing tensor {}'.format(source, e))
    return model


def clone_model(model, with_quantizers=True):
    """Deep copy of a model; ``with_quantizers=False`` copies only the full precision network."""
    meta = model.meta()
    if not with_quantizers:
        meta['quant'] = {}
    clone = model_from_state(model.state(), meta)
    clone.loss_history = list(model.loss_history)
    return clone


def load_model(path):
    """Rebuild a model saved with :func:`save_model`.

    :rtype: ToyOSDSR
    :raises FormatError: When the checkpoint lacks a tensor the model needs.
    """
    tensors, meta = load_checkpoint(path)
    return model_from_state(tensors, meta, 'Checkpoint {}'.format(path))
