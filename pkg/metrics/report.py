# -*- coding: utf-8 -*-
"""Per-model metric reports: evaluation, CSV/JSON emission and the summary table."""

import csv
import json
import logging
from collections import OrderedDict

import numpy as np

from common.const import FP_BITS, METRIC_COLUMNS, PSNR_CAP_DB, bits_label
from common.tensor import no_grad
from common.util import DataError, DataIOError, FormatError, parse_bits
from metrics.image import latent_error, psnr, ssim

__all__ = ['MetricReport', 'evaluate_model', 'write_metrics_csv', 'write_metrics_json', 'read_metrics_csv',
           'summary_table']


class MetricReport:
    """Fidelity of one quantized model against its own full precision outputs.

    :ivar str tag: Model or ablation arm name.
    :ivar tuple bits: ``(w, a)``.
    :ivar float psnr_db: Mean PSNR-to-FP over the evaluation images, in
        ``(0, 99]``.
    :ivar float ssim: Mean SSIM-to-FP, in ``[-1, 1]``.
    :ivar float latent_error: Mean ``‖Z_H^q − Z_H^fp‖₂``.
    :ivar dict stage_losses: Stage name → probe objective at stage end.
    """

    def __init__(self, tag, bits, psnr_db, ssim, latent_error, stage_losses=None):
        self.tag = tag
        self.bits = parse_bits(bits)
        self.psnr_db = float(psnr_db)
        self.ssim = float(ssim)
        self.latent_error = float(latent_error)
        self.stage_losses = OrderedDict(stage_losses or {})

    def __repr__(self):
        return 'MetricReport({}, {}, psnr={:.3f}, ssim={:.4f})'.format(self.tag, bits_label(*self.bits), self.psnr_db,
                                                                      self.ssim)

    def to_row(self):
        """Values in :data:`~common.const.METRIC_COLUMNS` order."""
        return [self.tag, bits_label(*self.bits), self.psnr_db, self.ssim, self.latent_error]

    def to_dict(self):
        out = OrderedDict(zip(METRIC_COLUMNS, self.to_row()))
        out['stage_losses'] = self.stage_losses
        return out


def evaluate_model(model, images, tag='model', bits=(FP_BITS, FP_BITS), stage_log=None, batch=4):
    """Compare a model's quantized outputs with its full precision outputs.

    Every module with an attached quantizer runs quantized; a model without
    quantizers scores the capped PSNR and an SSIM of 1.

    :param model: A :class:`~diffusion.toy.ToyOSDSR` with a timestep.
    :param images: ``(N, H, W, 3)`` LR images.
    :param stage_log: Optional :class:`~calib.pipeline.StageLog` whose stage
        summaries go into the report.
    :rtype: MetricReport
    :raises DataError: When there are no images or the model is untrained.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError('No images to evaluate on')
    if model.timestep is None:
        raise DataError('Cannot evaluate an untrained model')
    t = model.timestep
    active = model.quantized_names()
    psnrs, ssims, latents = [], [], []
    with no_grad():
        for start in range(0, len(images), batch):
            x = images[start:start + batch]
            fp_trace, q_trace = {}, {}
            out_fp = model.forward(x, t, trace=fp_trace).data
            out_q = model.forward(x, t, active=active, trace=q_trace).data
            for i in range(len(x)):
                psnrs.append(psnr(out_q[i], out_fp[i]))
                ssims.append(ssim(out_q[i], out_fp[i]))
            latents.append(latent_error(q_trace['z_h'], fp_trace['z_h']) * len(x))
    stage_losses = OrderedDict()
    if stage_log is not None:
        for s in stage_log.summaries:
            stage_losses[s['stage']] = s['end']
    report = MetricReport(tag, bits, np.mean(psnrs), np.mean(ssims), sum(latents) / len(images), stage_losses)
    logging.debug('Evaluated {}'.format(report))
    return report


def write_metrics_csv(reports, file_path):
    """Write reports as CSV with header ``tag, bits, psnr_db, ssim, latent_error``."""
    try:
        with open(file_path, 'w', newline='') as fout:
            writer = csv.writer(fout)
            writer.writerow(METRIC_COLUMNS)
            for r in reports:
                writer.writerow(r.to_row())
    except OSError as e:
        raise DataIOError('Could not write {}: {}'.format(file_path, e))
    return file_path


def write_metrics_json(reports, file_path):
    try:
        with open(file_path, 'w') as fout:
            json.dump([r.to_dict() for r in reports], fout, indent=2)
    except OSError as e:
        raise DataIOError('Could not write {}: {}'.format(file_path, e))
    return file_path


def read_metrics_csv(file_path):
    """Read reports written by :func:`write_metrics_csv`.

    :rtype: list(MetricReport)
    :raises FormatError: When the header doesn't match.
    """
    try:
        with open(file_path, newline='') as fin:
            rows = list(csv.reader(fin))
    except OSError as e:
        raise DataIOError('Could not read {}: {}'.format(file_path, e))
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise FormatError('{} is not a metrics CSV (header {})'.format(file_path, rows[0] if rows else None))
    return [MetricReport(tag, bits, p, s, z) for tag, bits, p, s, z in rows[1:]]


def summary_table(reports, cost_reports=()):
    """A plain-text table of metric rows, followed by the compression rows.

    :param reports: :class:`MetricReport` objects.
    :param cost_reports: :class:`~metrics.cost.CostReport` objects.
    :rtype: str
    """
    lines = ['{:<16s} {:>6s} {:>9s} {:>7s} {:>12s}'.format('tag', 'bits', 'PSNR(dB)', 'SSIM', 'latent_err')]
    for r in reports:
        cap = '*' if r.psnr_db >= PSNR_CAP_DB else ''
        lines.append('{:<16s} {:>6s} {:>9s} {:>7.4f} {:>12.5g}'.format(
            r.tag, bits_label(*r.bits), '{:.3f}{}'.format(r.psnr_db, cap), r.ssim, r.latent_error))
    if cost_reports:
        lines.append('')
        lines.append('{:<8s} {:>14s} {:>10s} {:>16s} {:>10s}'.format('bits', 'Params (M)', 'reduction', 'Ops (G)',
                                                                      'reduction'))
        for c in cost_reports:
            lines.append('{:<8s} {:>14.6f} {:>9.2%} {:>16.6f} {:>9.2%}'.format(
                bits_label(*c.bits), c.effective_params / 1e6, c.params_reduction, c.ops_effective / 1e9,
                c.ops_reduction))
    return '\n'.join(lines)
