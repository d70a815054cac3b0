# -*- coding: utf-8 -*-
"""The three calibration stages and the baselines they are compared against.

1. **TRQ** (:func:`run_trq`): measure how much quantization moves ``Z_H`` at
   each candidate timestep, pick the smallest, retrain the full precision
   backbone there.
2. **RPQ** (:func:`run_rpq`): bring quantized modules in one at a time, last
   module first. At stage ``k`` every already quantized module keeps
   training together with module ``k`` on
   ``module_loss_weight · L_M(module k) + L_image``; the final stage, with
   the whole network quantized, trains on ``L_image`` alone.
3. **ET** (:func:`run_et`): train every quantization and finetuning tensor
   end-to-end on ``L_image`` alone.

Only quantization and finetuning tensors ever reach an optimizer; the digest
of the full precision weights is checked after every stage.
"""

import csv
import logging
from collections import Counter, OrderedDict, namedtuple
from os import makedirs, path

import numpy as np

from calib.losses import LossConfig, image_loss, module_loss
from common.const import ABLATION_ARMS, BIAS_BITS, STAGE_LOG_COLUMNS, Granularity, QuantizerMode, Stage, bits_label
from common.log import progress_bar
from common.optim import build_optimizer
from common.tensor import no_grad
from common.util import PROGRESS_PERIOD, ConfigurationError, DataError, DataIOError, chunkify, parse_bits
from diffusion.schedule import measure_timestep_error
from diffusion.toy import TrainingError, ToyOSDSR, clone_model, save_model, train_backbone
from metrics.report import evaluate_model

__all__ = ['FrozenWeightError', 'CalibrationPlan', 'StageLog', 'TRQResult', 'run_trq', 'run_rpq', 'run_et',
           'run_one_shot', 'run_maxmin_baseline', 'run_lsq_baseline', 'run_qartsr', 'run_ablation', 'fp_outputs']

#: How many times per stage the probe objective is evaluated
CHECKS_PER_STAGE = 10

TRQResult = namedtuple('TRQResult', ['best_timestep', 'backbone', 'profile'])


class FrozenWeightError(TrainingError):
    """Raised when a full precision weight changed during calibration."""


class CalibrationPlan:
    """Everything a calibration run needs besides the model and the data.

    :ivar list order: Module names in quantization order (the reverse of
        inference order).
    :ivar int stage_steps: Optimizer steps per RPQ stage (> 0).
    :ivar int et_steps: Optimizer steps of extended training (>= 0).
    :ivar float lr: Learning rate of quantization and finetuning tensors.
    :ivar int seed: Seeds batch order and finetuner initialization.
    :ivar tuple bits: ``(w, a)`` bit-widths.
    :ivar int patience: Probe checks without improvement before a stage
        stops early (0 never stops early).
    """

    def __init__(self, order, stage_steps=200, et_steps=1000, lr=1e-5, seed=0, bits=(4, 4), batch=4,
                 optimizer='adam', losses=None, patience=5, rank=None, finetune_rank=None,
                 granularity=Granularity.channel, bias_bits=BIAS_BITS, probe_size=8):
        self.order = list(order)
        self.stage_steps = int(stage_steps)
        self.et_steps = int(et_steps)
        self.lr = float(lr)
        self.seed = int(seed)
        self.bits = parse_bits(bits)
        self.batch = int(batch)
        self.optimizer = optimizer
        self.losses = losses or LossConfig()
        self.patience = int(patience)
        self.rank = rank
        self.finetune_rank = finetune_rank
        self.granularity = granularity
        self.bias_bits = bias_bits
        self.probe_size = int(probe_size)

    def __repr__(self):
        return 'CalibrationPlan({}, order={}, stage_steps={}, et_steps={})'.format(
            bits_label(*self.bits), self.order, self.stage_steps, self.et_steps)

    @classmethod
    def for_model(cls, model, **kwargs):
        """A plan whose order is the reverse of ``model``'s inference order."""
        return cls(list(reversed(model.registry_names())), **kwargs)

    @classmethod
    def from_config(cls, cfg, model, bits=None):
        """Build a plan for ``model`` from a run configuration."""
        return cls.for_model(model, stage_steps=cfg.calib.stage_steps, et_steps=cfg.calib.et_steps, lr=cfg.calib.lr,
                             seed=cfg.seed, bits=cfg.bits if bits is None else bits, batch=cfg.calib.batch,
                             optimizer=cfg.calib.optimizer, losses=LossConfig.from_config(cfg),
                             patience=cfg.calib.patience, rank=cfg.quant.rank, finetune_rank=cfg.quant.finetune_rank,
                             granularity=cfg.quant.granularity, bias_bits=cfg.quant.bias_bits,
                             probe_size=cfg.trq.probes)

    def quant_options(self):
        """Keyword arguments for :meth:`~diffusion.toy.ToyOSDSR.attach_quantizers`."""
        return dict(rank=self.rank, finetune_rank=self.finetune_rank, granularity=self.granularity,
                    bias_bits=self.bias_bits, seed=self.seed, batch=self.batch)

    def validate(self, model):
        """:raises ConfigurationError: When the order isn't the reversed registry or a budget is out of range."""
        expected = list(reversed(model.registry_names()))
        if self.order != expected:
            logging.error('Plan order {} does not match reversed registry {}'.format(self.order, expected))
            raise ConfigurationError('Quantization order must be the reverse of inference order: {}'.format(expected))
        if self.stage_steps <= 0:
            raise ConfigurationError('Stage budget must be > 0, got {}'.format(self.stage_steps))
        if self.et_steps < 0:
            raise ConfigurationError('ET budget must be >= 0, got {}'.format(self.et_steps))
        if self.batch <= 0:
            raise ConfigurationError('Batch size must be > 0, got {}'.format(self.batch))
        if self.lr < 0:
            raise ConfigurationError('Learning rate must be >= 0, got {}'.format(self.lr))
        return self


class StageLog:
    """Per-step losses, per-stage summaries and gradient bookkeeping of a calibration run.

    :ivar list rows: ``(stage, step, module_loss, image_loss, total)`` tuples.
    :ivar list summaries: One dict per finished stage.
    :ivar Counter grad_counts: Module name → number of steps its quantizers
        received a non-zero gradient.
    """

    def __init__(self):
        self.rows = []
        self.summaries = []
        self.grad_counts = Counter()

    def __len__(self):
        return len(self.rows)

    def record(self, stage, step, l_module, l_image, total):
        self.rows.append((stage, step, l_module, l_image, total))

    def stage_rows(self, stage):
        return [r for r in self.rows if r[0] == stage]

    def count_gradients(self, model):
        """Bump the counter of every module whose quantization or finetuning tensors hold a non-zero gradient."""
        for h in model.registry():
            if h.fq is None:
                continue
            if any(p.grad is not None and np.any(p.grad) for p in h.fq.parameters()):
                self.grad_counts[h.name] += 1

    def write_csv(self, file_path):
        """Write the rows with header ``stage, step, module_loss, image_loss, total``."""
        try:
            with open(file_path, 'w', newline='') as fout:
                writer = csv.writer(fout)
                writer.writerow(STAGE_LOG_COLUMNS)
                for stage, step, l_module, l_image, total in self.rows:
                    writer.writerow([stage, step, '' if l_module is None else repr(l_module), repr(l_image),
                                     repr(total)])
        except OSError as e:
            raise DataIOError('Could not write {}: {}'.format(file_path, e))
        return file_path


def _images(dataset):
    images = dataset.lr if hasattr(dataset, 'lr') else dataset
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError('The calibration set is empty')
    return images


def _require_timestep(model):
    if model.timestep is None:
        raise ConfigurationError('The backbone has not been trained (no timestep)')
    return model.timestep


def fp_outputs(model, images, t, batch=8):
    """Full precision outputs of ``model`` on ``images`` (no gradients)."""
    outs = []
    with no_grad():
        for chunk in chunkify(range(len(images)), batch):
            outs.append(model.forward(images[list(chunk)], t).data)
    return np.concatenate(outs)


def _batches(n, batch, rng):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch):
            yield order[start:start + batch]


def _check_digest(model, digest, stage):
    current = model.frozen_digest()
    if current != digest:
        logging.critical('Full precision weights changed during stage {}: {} != {}'.format(stage, current, digest))
        raise FrozenWeightError('Frozen weights changed during stage {}'.format(stage))


def _objective(model, t, images, targets, active, module_name, losses):
    """``(total, module_loss, image_loss)`` of one batch; ``module_name=None`` gives the pure image loss."""
    trace = {} if module_name else None
    out = model.forward(images, t, active=active, trace=trace)
    l_image = image_loss(out, targets, losses)
    if module_name is None:
        return l_image, None, l_image
    x, y_q = trace[module_name]
    l_module = module_loss(y_q, model.module_reference(module_name, x, t))
    return l_module * losses.module_loss_weight + l_image, l_module, l_image


def _probe_objective(model, t, images, targets, active, module_name, losses, batch):
    total = 0.
    with no_grad():
        for chunk in chunkify(range(len(images)), batch):
            idx = list(chunk)
            total += _objective(model, t, images[idx], targets[idx], active, module_name, losses)[0].item() * len(idx)
    return total / len(images)


def _train(model, plan, images, targets, active, module_name, steps, stage, seed, log, progress):
    """Train the quantization tensors of ``active`` for up to ``steps`` steps.

    The probe objective (first ``plan.probe_size`` images) is checked
    :data:`CHECKS_PER_STAGE` times; training stops after ``plan.patience``
    checks without improvement and the best checked state is kept.

    :return: ``(probe objective at start, probe objective at end)``
    """
    t = model.timestep
    params = model.quant_parameters(active)
    if not params or steps == 0:
        start = _probe_objective(model, t, images[:plan.probe_size], targets[:plan.probe_size], active, module_name,
                                 plan.losses, plan.batch)
        return start, start
    opt = build_optimizer(plan.optimizer, params, plan.lr)
    probe_x, probe_y = images[:plan.probe_size], targets[:plan.probe_size]
    best = _probe_objective(model, t, probe_x, probe_y, active, module_name, plan.losses, plan.batch)
    start = best
    best_state = [p.data.copy() for p in params]
    check_every = max(1, steps // CHECKS_PER_STAGE)
    stale = 0
    batches = _batches(len(images), plan.batch, np.random.default_rng(seed))

    bar = progress_bar(steps, 'Stage {}'.format(stage), progress)
    for step in range(1, steps + 1):
        idx = next(batches)
        total, l_module, l_image = _objective(model, t, images[idx], targets[idx], active, module_name, plan.losses)
        value = total.item()
        if not np.isfinite(value):
            logging.critical('Stage {} diverged at step {} (objective {})'.format(stage, step, value))
            raise TrainingError('Calibration objective became {} in stage {} at step {}'.format(value, stage, step))
        opt.zero_grad()
        total.backward()
        log.count_gradients(model)
        opt.step()
        log.record(stage, step, None if l_module is None else l_module.item(), l_image.item(), value)
        bar.update(step)
        if step % PROGRESS_PERIOD == 0:
            logging.info('Stage {} step {}: objective {:.6g}'.format(stage, step, value))

        if step % check_every == 0 or step == steps:
            current = _probe_objective(model, t, probe_x, probe_y, active, module_name, plan.losses, plan.batch)
            if current < best:
                best, stale = current, 0
                best_state = [p.data.copy() for p in params]
            else:
                stale += 1
                if plan.patience and stale >= plan.patience:
                    logging.info('Stage {}: no improvement in {} checks, stopping at step {}'.format(
                        stage, stale, step))
                    break
    bar.finish()
    for p, saved in zip(params, best_state):
        p.data[...] = saved
    return start, best


def _finish_stage(model, log, digest, stage, start, end, checkpoint_dir, index):
    _check_digest(model, digest, stage)
    log.summaries.append(OrderedDict([('stage', stage), ('start', start), ('end', end)]))
    logging.info('Stage {} done: probe objective {:.6g} -> {:.6g}'.format(stage, start, end))
    if checkpoint_dir:
        try:
            makedirs(checkpoint_dir, exist_ok=True)
        except OSError as e:
            raise DataIOError('Could not create {}: {}'.format(checkpoint_dir, e))
        save_model(model, path.join(checkpoint_dir, 'stage{:02d}_{}.qart'.format(index, stage)))


def _fresh_log(model, log):
    log = log if log is not None else StageLog()
    model.stage_log = log
    return log


def run_trq(backbone, dataset, t_candidates, bits, epochs, probes=8, train_options=None, quant_options=None,
            progress=False):
    """Timestep retraining quantization.

    Ranks the candidates by the measured latent error ``delta_z`` of
    ``backbone`` quantized at ``bits``, then trains a fresh backbone (same
    architecture and seed) at the winner.

    :param ToyOSDSR backbone: A trained backbone to measure with; it is left
        without quantizers.
    :param dataset: Paired data with ``lr`` and ``hr`` arrays.
    :param t_candidates: Timesteps to choose from (non-empty).
    :param int epochs: Retraining budget.
    :param int probes: Number of calibration images used as probes.
    :param dict train_options: Extra :func:`~diffusion.toy.train_backbone`
        keyword arguments.
    :return: ``(best_timestep, backbone, profile)``
    :rtype: TRQResult
    :raises ConfigurationError: When there are no candidates.
    :raises TrainingError: When retraining diverges.
    """
    t_candidates = list(t_candidates)
    if not t_candidates:
        raise ConfigurationError('TRQ needs at least one timestep candidate')
    images = _images(dataset)
    profile = measure_timestep_error(backbone, bits, t_candidates, images[:max(1, probes)], quant_options,
                                     progress=progress)
    backbone.detach_quantizers()
    best = profile.best_timestep()
    logging.info('TRQ picked T={} (delta_z {})'.format(
        best, ', '.join('{}: {:.4g}'.format(r['t'], r['delta_z']) for r in profile)))
    retrained = ToyOSDSR(**backbone.config)
    train_backbone(retrained, dataset, best, epochs, progress=progress, **(train_options or {}))
    return TRQResult(best, retrained, profile)


def run_rpq(model, plan, dataset, log=None, checkpoint_dir=None, progress=False):
    """Reversed per-module quantization.

    Quantizers are attached (and min-max calibrated) on every module up
    front, but a module only runs quantized from its own stage on. At the
    start of its stage the module's activation quantizer is recalibrated on
    the inputs it sees with the already quantized modules active, and its
    quantizers switch to learned-step mode.

    Every stage but the last minimizes
    ``module_loss_weight · L_M(module k) + L_image``. The last stage, which
    activates the final module, minimizes ``L_image`` alone, so its
    :class:`StageLog` rows carry no module loss.

    :param ToyOSDSR model: A trained backbone; quantized in place.
    :param CalibrationPlan plan: The plan (validated against ``model``).
    :param dataset: Calibration images (``lr`` attribute or an array).
    :param StageLog log: Log to append to (a new one by default; also stored
        as ``model.stage_log``).
    :param str checkpoint_dir: If set, a checkpoint is written after every
        stage.
    :return: ``model``
    :raises ConfigurationError: When the plan doesn't match the model.
    :raises FrozenWeightError: When a full precision weight changed.
    :raises TrainingError: When a module's quantizers got a gradient before
        its stage, or training diverges.
    """
    plan.validate(model)
    t = _require_timestep(model)
    images = _images(dataset)
    log = _fresh_log(model, log)
    digest = model.frozen_digest()
    targets = fp_outputs(model, images, t, plan.batch)
    if not all(h.quantized for h in model.registry()):
        model.attach_quantizers(plan.bits, images, t, **plan.quant_options())

    active = []
    for k, name in enumerate(plan.order):
        if log.grad_counts[name]:
            logging.critical('Module {} received {} gradient updates before its stage'.format(
                name, log.grad_counts[name]))
            raise TrainingError('Stage isolation violated for {}'.format(name))
        handle = model.handle(name)
        inputs = model.collect_inputs(images, t, [name], active=active, batch=plan.batch)
        handle.fq.calibrate_activations(inputs[name])
        handle.fq.set_mode(QuantizerMode.learned_step)
        active.append(name)
        # with every module quantized the last stage is plain end-to-end training
        module_name = None if k == len(plan.order) - 1 else name
        logging.info('RPQ stage {}/{}: {} (active: {}, objective: {})'.format(
            k + 1, len(plan.order), name, ', '.join(active), 'image' if module_name is None else 'module + image'))
        start, end = _train(model, plan, images, targets, active, module_name, plan.stage_steps, name, plan.seed + k,
                            log, progress)
        _finish_stage(model, log, digest, name, start, end, checkpoint_dir, k)
    return model


def run_et(model, plan, dataset, log=None, checkpoint_dir=None, progress=False):
    """Extended training: every quantized module, end-to-end, on the image loss.

    :param ToyOSDSR model: A model with every module quantized.
    :return: ``model``
    :raises ConfigurationError: When some module has no quantizer.
    """
    plan.validate(model)
    t = _require_timestep(model)
    missing = [h.name for h in model.registry() if not h.quantized]
    if missing:
        raise ConfigurationError('Extended training needs every module quantized; missing: {}'.format(
            ', '.join(missing)))
    images = _images(dataset)
    log = _fresh_log(model, log)
    digest = model.frozen_digest()
    targets = fp_outputs(model, images, t, plan.batch)
    model.set_quant_mode(QuantizerMode.learned_step)
    active = model.registry_names()
    logging.info('Extended training for {} steps'.format(plan.et_steps))
    start, end = _train(model, plan, images, targets, active, None, plan.et_steps, Stage.et.name,
                        plan.seed + len(plan.order), log, progress)
    _finish_stage(model, log, digest, Stage.et.name, start, end, checkpoint_dir, len(plan.order))
    return model


def run_one_shot(model, plan, dataset):
    """Attach finetuning quantizers to every module at once (min-max calibrated, no training)."""
    plan.validate(model)
    t = _require_timestep(model)
    model.attach_quantizers(plan.bits, _images(dataset), t, **plan.quant_options())
    return model


def run_maxmin_baseline(model, bits, dataset, granularity=Granularity.channel, bias_bits=BIAS_BITS, batch=8):
    """Static min-max quantization of every module: no skip, no finetuner, no training.

    :return: ``model``, quantized in place.
    """
    t = _require_timestep(model)
    model.attach_quantizers(bits, _images(dataset), t, rank=0, finetune_rank=0, granularity=granularity,
                            bias_bits=bias_bits, batch=batch)
    return model


def run_lsq_baseline(model, plan, dataset, steps, log=None, progress=False):
    """Learned-step quantization alone: step sizes trained end-to-end on the image loss.

    No low-rank skip, no finetuner and no equivalent transformation take part.

    :return: ``model``
    """
    t = _require_timestep(model)
    images = _images(dataset)
    log = _fresh_log(model, log)
    digest = model.frozen_digest()
    targets = fp_outputs(model, images, t, plan.batch)
    model.attach_quantizers(plan.bits, images, t, rank=0, finetune_rank=0, granularity=plan.granularity,
                            bias_bits=plan.bias_bits, seed=plan.seed, batch=plan.batch)
    for h in model.registry():
        h.fq.train_et = False
    model.set_quant_mode(QuantizerMode.learned_step)
    start, end = _train(model, plan, images, targets, model.registry_names(), None, int(steps), 'lsq', plan.seed,
                        log, progress)
    _finish_stage(model, log, digest, 'lsq', start, end, None, 0)
    return model


def run_qartsr(model, plan, dataset, log=None, checkpoint_dir=None, progress=False):
    """RPQ followed by ET on an already TRQ-retrained backbone."""
    log = _fresh_log(model, log)
    run_rpq(model, plan, dataset, log, checkpoint_dir, progress)
    return run_et(model, plan, dataset, log, checkpoint_dir, progress)


def run_ablation(original, selected, plan_kwargs, dataset, holdout, progress=False):
    """Quantize and evaluate the six ablation arms.

    =============  ===================  =================================
    arm            backbone             quantization
    =============  ===================  =================================
    baseline       ``original``         one-shot min-max
    TRQ            ``selected``         one-shot min-max
    RPQ*           ``original``         RPQ
    TRQ+RPQ*       ``selected``         RPQ
    TRQ+ET         ``selected``         one-shot finetuning quantizers + ET
    TRQ+RPQ*+ET    ``selected``         RPQ + ET
    =============  ===================  =================================

    Each arm is compared with its own full precision backbone.

    :param ToyOSDSR original: Backbone trained at the default timestep.
    :param ToyOSDSR selected: Backbone retrained at the TRQ timestep.
    :param dict plan_kwargs: :class:`CalibrationPlan` keyword arguments
        (everything but ``order``).
    :param holdout: LR images the arms are evaluated on.
    :return: Arm name → :class:`~metrics.report.MetricReport`, in
        :data:`~common.const.ABLATION_ARMS` order.
    :rtype: OrderedDict
    """
    bits = parse_bits(plan_kwargs.get('bits', (4, 4)))
    granularity = plan_kwargs.get('granularity', Granularity.channel)
    holdout = _images(holdout)

    def plan_for(model):
        return CalibrationPlan.for_model(model, **plan_kwargs)

    def fresh(model):
        return clone_model(model, with_quantizers=False)

    arms = OrderedDict()
    arms['baseline'] = run_maxmin_baseline(fresh(original), bits, dataset, granularity)
    arms['TRQ'] = run_maxmin_baseline(fresh(selected), bits, dataset, granularity)
    arms['RPQ*'] = run_rpq(fresh(original), plan_for(original), dataset, progress=progress)
    arms['TRQ+RPQ*'] = run_rpq(fresh(selected), plan_for(selected), dataset, progress=progress)
    one_shot = run_one_shot(fresh(selected), plan_for(selected), dataset)
    arms['TRQ+ET'] = run_et(one_shot, plan_for(one_shot), dataset, progress=progress)
    full = clone_model(arms['TRQ+RPQ*'])
    arms['TRQ+RPQ*+ET'] = run_et(full, plan_for(full), dataset, progress=progress)

    reports = OrderedDict()
    for arm in ABLATION_ARMS:
        reports[arm] = evaluate_model(arms[arm], holdout, tag=arm, bits=bits,
                                      stage_log=getattr(arms[arm], 'stage_log', None))
        logging.info('Ablation {:12s} PSNR-to-FP {:.3f} dB, SSIM {:.4f}'.format(
            arm, reports[arm].psnr_db, reports[arm].ssim))
    return reports
