# -*- coding: utf-8 -*-
"""Model size and operation count accounting at a given bit setting.

Conventions:

- Size is counted in 32-bit-parameter equivalents: a quantized weight costs
  ``w / 32`` of a full precision one, everything else (biases, timestep
  projections, the condition vector, the encoder, low-rank and quantizer
  overhead) is full precision.
- Operations are multiply-accumulates; a quantized MAC costs
  ``(w · a) / (32 · 32)`` of a full precision one. The low-rank skip branch
  adds ``r · (m + n)`` FP MACs per output pixel.
- Overhead belongs to a layer whenever it carries a finetuning quantizer, so
  raising a layer's bit-width never shrinks the model.
"""

import csv
import logging
from collections import OrderedDict

from common.const import FP_BITS, bits_label
from common.util import LabError, DataIOError, parse_bits

__all__ = ['AccountingError', 'LayerCost', 'ModuleCost', 'CostReport', 'account_layers', 'account_cost', 'cost_table',
           'write_cost_csv', 'COST_COLUMNS']

#: Column order of cost CSV rows
COST_COLUMNS = ('bits', 'fp_params', 'effective_params', 'params_effective_mbytes', 'params_reduction', 'fp_ops',
                'ops_effective', 'ops_reduction')

#: Bytes of one full precision parameter
FP_BYTES = 4


class AccountingError(LabError):
    """Raised when a layer inventory is empty or incomplete."""


class LayerCost:
    """One inventory entry.

    :ivar int weights: Quantizable weight elements.
    :ivar int fp_params: Parameters that always stay full precision.
    :ivar int macs: MACs of the quantizable weights.
    :ivar int fp_macs: MACs that always run full precision.
    :ivar int overhead_params: Low-rank and quantizer parameters.
    :ivar int overhead_macs: MACs of the low-rank skip branch.
    """

    def __init__(self, name, weights, fp_params=0, macs=0, fp_macs=0, overhead_params=0, overhead_macs=0):
        self.name = name
        self.weights = int(weights)
        self.fp_params = int(fp_params)
        self.macs = int(macs)
        self.fp_macs = int(fp_macs)
        self.overhead_params = int(overhead_params)
        self.overhead_macs = int(overhead_macs)

    def __repr__(self):
        return 'LayerCost({}, weights={}, macs={})'.format(self.name, self.weights, self.macs)


class ModuleCost:
    """Full precision and effective cost of one layer at its bit setting."""

    def __init__(self, name, bits, fp_params, effective_params, fp_ops, effective_ops):
        self.name = name
        self.bits = bits
        self.fp_params = fp_params
        self.effective_params = effective_params
        self.fp_ops = fp_ops
        self.effective_ops = effective_ops

    def __repr__(self):
        return 'ModuleCost({}, {}, params {} -> {})'.format(self.name, bits_label(*self.bits), self.fp_params,
                                                             self.effective_params)


def _reduction(effective, full):
    if full <= 0:
        raise AccountingError('Full precision total must be positive')
    return min(1., max(0., 1. - effective / full))


class CostReport:
    """Totals over :class:`ModuleCost` rows.

    Every total is the sum of the per-module values.
    """

    def __init__(self, bits, modules):
        self.bits = tuple(bits)
        self.modules = list(modules)

    def __repr__(self):
        return 'CostReport({}, params -{:.2%}, ops -{:.2%})'.format(bits_label(*self.bits), self.params_reduction,
                                                                   self.ops_reduction)

    @property
    def fp_params(self):
        return sum(m.fp_params for m in self.modules)

    @property
    def effective_params(self):
        return sum(m.effective_params for m in self.modules)

    @property
    def fp_mbytes(self):
        return self.fp_params * FP_BYTES / 1e6

    @property
    def params_effective_mbytes(self):
        return self.effective_params * FP_BYTES / 1e6

    @property
    def fp_ops(self):
        return sum(m.fp_ops for m in self.modules)

    @property
    def ops_effective(self):
        return sum(m.effective_ops for m in self.modules)

    @property
    def params_reduction(self):
        """``1 − effective / FP`` size, clamped to ``[0, 1]``."""
        return _reduction(self.effective_params, self.fp_params)

    @property
    def ops_reduction(self):
        return _reduction(self.ops_effective, self.fp_ops)

    def module(self, name):
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_row(self):
        """Values in :data:`COST_COLUMNS` order."""
        return [bits_label(*self.bits), self.fp_params, self.effective_params, self.params_effective_mbytes,
                self.params_reduction, self.fp_ops, self.ops_effective, self.ops_reduction]

    def to_dict(self):
        out = OrderedDict(zip(COST_COLUMNS, self.to_row()))
        out['modules'] = [OrderedDict([('name', m.name), ('bits', list(m.bits)), ('fp_params', m.fp_params),
                                       ('effective_params', m.effective_params), ('fp_ops', m.fp_ops),
                                       ('effective_ops', m.effective_ops)]) for m in self.modules]
        return out


def account_layers(layers, bits, module_bits=None):
    """Cost of a layer inventory at ``bits``.

    :param list layers: :class:`LayerCost` entries. Entries without
        quantizable weights are always full precision.
    :param tuple bits: ``(w, a)`` applied to every quantizable layer.
    :param dict module_bits: Per-layer ``(w, a)`` overrides.
    :rtype: CostReport
    :raises AccountingError: When the inventory is empty.
    """
    layers = list(layers)
    if not layers:
        raise AccountingError('Nothing to account: the layer inventory is empty')
    bits = parse_bits(bits)
    module_bits = module_bits or {}
    rows = []
    for layer in layers:
        w, a = parse_bits(module_bits.get(layer.name, bits)) if layer.weights else (FP_BITS, FP_BITS)
        fp_params = layer.weights + layer.fp_params
        fp_ops = layer.macs + layer.fp_macs
        effective_params = layer.weights * w / FP_BITS + layer.fp_params + layer.overhead_params
        effective_ops = layer.macs * (w * a) / (FP_BITS * FP_BITS) + layer.fp_macs + layer.overhead_macs
        rows.append(ModuleCost(layer.name, (w, a), fp_params, effective_params, fp_ops, effective_ops))
    return CostReport(bits, rows)


def _inventory(model, height, width):
    handles = model.registry()
    if not handles:
        raise AccountingError('The model registry is empty')
    sizes = model.conv_resolutions(height, width)
    enc_macs = sum(conv.macs(*sizes[conv.name]) for conv in (model.enc1, model.enc2))
    layers = [LayerCost('encoder', 0, fp_params=model.encoder_param_count(), fp_macs=enc_macs)]
    for h in handles:
        if h.conv is None or h.name not in sizes:
            logging.error('Module {} has no convolution to account for'.format(h.name))
            raise AccountingError('Registry entry {} is incomplete'.format(h.name))
        oh, ow = sizes[h.name]
        m, n = h.conv.weight.shape
        overhead_params = overhead_macs = 0
        if h.fq is not None:
            overhead_params = h.fq.overhead_params()
            overhead_macs = oh * ow * h.fq.rank * (m + n)
        layers.append(LayerCost(
            h.name, h.conv.weight.size,
            fp_params=h.conv.bias.size + h.extra_param_count(model.c_y.size),
            macs=h.conv.macs(oh, ow),
            fp_macs=0 if h.temb_proj is None else h.temb_proj.weight.size,
            overhead_params=overhead_params, overhead_macs=overhead_macs))
    return layers


def account_cost(model, w_bits, a_bits, lr_size=32, module_bits=None):
    """Size and operation cost of a toy model at ``W<w_bits>A<a_bits>``.

    The encoder, every registry module and the condition vector (counted with
    the module it is added in) each get one row.

    :param model: A :class:`~diffusion.toy.ToyOSDSR`.
    :param int lr_size: Side of the square LR input the ops are counted for.
    :rtype: CostReport
    :raises AccountingError: When the registry is empty or incomplete.
    """
    return account_layers(_inventory(model, lr_size, lr_size), (w_bits, a_bits), module_bits)


def cost_table(model, bit_settings, lr_size=32):
    """One :class:`CostReport` per ``(w, a)`` setting."""
    return [account_cost(model, w, a, lr_size) for w, a in (parse_bits(b) for b in bit_settings)]


def write_cost_csv(reports, file_path):
    try:
        with open(file_path, 'w', newline='') as fout:
            writer = csv.writer(fout)
            writer.writerow(COST_COLUMNS)
            for r in reports:
                writer.writerow(r.to_row())
    except OSError as e:
        raise DataIOError('Could not write {}: {}'.format(file_path, e))
    return file_path
