#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Quantize a toy one-step diffusion SR model and measure what it costs.

Command line::

 Usage: qart.py gen-data [options] [--images=DIR]
        qart.py train-backbone [options] [--timestep=T]
        qart.py sweep-timestep [options] [--bits=W,A] [--t-list=LIST] [--staged] [--backbone=FILE]
        qart.py quantize [options] [--method=METHOD] [--bits=W,A] [--backbone=FILE]
        qart.py calibrate [options] [--bits=W,A]
        qart.py eval [options] --checkpoint=FILE
        qart.py ablate [options] [--bits=W,A]
        qart.py report [options]
        qart.py (-h | --help)

 Options:
  -c FILE --config=FILE
                  YAML file merged over config/default.yml.
  -o DIR --out=DIR
                  Output directory. The QART_OUT environment variable wins
                  over both this and the config file.
  --seed=N        Seed for data generation, initialization and batching.
  --bits=W,A      Weight and activation bit-widths, e.g. 4,4 (32 = full
                  precision). Defaults to the config's ``bits``.
  --t-list=LIST   Comma separated timesteps. Defaults to trq.t_candidates.
  --staged        Also record the noise and image errors per timestep.
  --timestep=T    Timestep to train the backbone at. Defaults to
                  backbone.timestep.
  --method=METHOD
                  One of maxmin, qartsr or lsq [default: qartsr]
  --backbone=FILE
                  Backbone checkpoint to start from. By default the one
                  trained at backbone.timestep in the output directory is
                  used (and trained first if it doesn't exist).
  --checkpoint=FILE
                  Checkpoint to evaluate.
  --images=DIR    Folder of P6 PPM images to cut HR tiles from instead of
                  generating synthetic images. The folder is only read.
  -p              Show progress bars.
  -v              Verbose mode. Changes logging mode from INFO to DEBUG.
  -h --help       Show this screen.

Every run writes ``config_echo.yml`` and ``qart.log`` into the output
directory; ``qart.py -c <out>/config_echo.yml ...`` repeats a run exactly.
"""

import logging
import sys
from glob import glob
from os import path

from docopt import docopt, DocoptExit

try:
    from common.log import log_setup
except ImportError:
    sys.path.append(path.join(path.dirname(path.abspath(__file__)), '..'))
    from common.log import log_setup
from calib.pipeline import (CalibrationPlan, StageLog, run_ablation, run_lsq_baseline, run_maxmin_baseline,
                            run_qartsr, run_trq)
from common.clr import status
from common.const import FP_BITS, bits_label
from common.run_conf import echo_config, load_config
from common.util import LabError, ConfigurationError, DataIOError, parse_bits, parse_int_list
from diffusion.schedule import measure_timestep_error
from diffusion.toy import ToyOSDSR, load_model, save_model, train_backbone
from imaging.dataset import DATA_DIR, build_calibration_set, load_dataset
from metrics.cost import cost_table, write_cost_csv
from metrics.report import (evaluate_model, read_metrics_csv, summary_table, write_metrics_csv,
                            write_metrics_json)

__all__ = ['cli_dispatch', 'main', 'EXIT_OK', 'EXIT_FAILURE', 'EXIT_USAGE']

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

METHODS = ('maxmin', 'qartsr', 'lsq')


def _out(cfg, name):
    return path.join(cfg.out_dir, name)


def _backbone_path(cfg, timestep):
    return _out(cfg, 'backbone_T{}.qart'.format(timestep))


def _data(cfg):
    calib, holdout = load_dataset(_out(cfg, DATA_DIR))
    return calib.require('calibration (run gen-data first)'), holdout


def _train_options(cfg):
    return dict(lr=cfg.backbone.lr, batch=cfg.backbone.batch, perceptual_weight=cfg.backbone.perceptual_weight,
                seed=cfg.seed)


def _quant_options(cfg):
    return dict(granularity=cfg.quant.granularity, bias_bits=cfg.quant.bias_bits)


def _plan_kwargs(cfg, bits):
    plan = CalibrationPlan.from_config(cfg, ToyOSDSR.from_config(cfg), bits)
    return dict(stage_steps=plan.stage_steps, et_steps=plan.et_steps, lr=plan.lr, seed=plan.seed, bits=plan.bits,
                batch=plan.batch, optimizer=plan.optimizer, losses=plan.losses, patience=plan.patience,
                rank=plan.rank, finetune_rank=plan.finetune_rank, granularity=plan.granularity,
                bias_bits=plan.bias_bits, probe_size=plan.probe_size)


def _backbone(cfg, calib, progress, backbone_file=None, timestep=None):
    """Load the requested backbone, or the one at ``timestep`` (training and saving it if needed)."""
    if backbone_file:
        return load_model(backbone_file)
    timestep = timestep or cfg.backbone.timestep
    file_path = _backbone_path(cfg, timestep)
    if path.isfile(file_path):
        logging.info('Using backbone {}'.format(file_path))
        return load_model(file_path)
    logging.info('No backbone at {}, training one'.format(file_path))
    model = ToyOSDSR.from_config(cfg)
    train_backbone(model, calib, timestep, cfg.backbone.epochs, progress=progress, **_train_options(cfg))
    save_model(model, file_path)
    return model


def _emit_metrics(reports, stem):
    csv_path = write_metrics_csv(reports, stem + '.csv')
    write_metrics_json(reports, stem + '.json')
    return csv_path


def cmd_gen_data(cfg, args, progress):
    build_calibration_set(cfg, progress=progress)
    print(path.join(cfg.out_dir, DATA_DIR, 'manifest.csv'))


def cmd_train_backbone(cfg, args, progress):
    calib, _ = _data(cfg)
    timestep = int(args['--timestep'] or cfg.backbone.timestep)
    model = ToyOSDSR.from_config(cfg)
    train_backbone(model, calib, timestep, cfg.backbone.epochs, progress=progress, **_train_options(cfg))
    print(save_model(model, _backbone_path(cfg, timestep)))


def cmd_sweep_timestep(cfg, args, progress):
    calib, _ = _data(cfg)
    bits = tuple(cfg.bits)
    t_list = parse_int_list(args['--t-list']) if args['--t-list'] else list(cfg.trq.t_candidates)
    model = _backbone(cfg, calib, progress, args['--backbone'])
    profile = measure_timestep_error(model, bits, t_list, calib.lr[:cfg.trq.probes], _quant_options(cfg),
                                     progress=progress)
    print(profile.write_csv(_out(cfg, 'timestep_profile_{}.csv'.format(bits_label(*bits))), staged=args['--staged']))


def cmd_quantize(cfg, args, progress):
    method = args['--method']
    if method not in METHODS:
        raise ConfigurationError('Unknown method {!r}; expected one of {}'.format(method, ', '.join(METHODS)))
    calib, holdout = _data(cfg)
    bits = tuple(cfg.bits)
    label = bits_label(*bits)
    model = _backbone(cfg, calib, progress, args['--backbone'])
    plan = CalibrationPlan.from_config(cfg, model, bits)
    log = StageLog()
    if method == 'maxmin':
        run_maxmin_baseline(model, bits, calib, cfg.quant.granularity, cfg.quant.bias_bits)
    elif method == 'lsq':
        run_lsq_baseline(model, plan, calib, cfg.lsq.steps, log, progress)
    else:
        run_qartsr(model, plan, calib, log, progress=progress)
    stem = '{}_{}'.format(method, label)
    print(save_model(model, _out(cfg, stem + '.qart')))
    if len(log):
        print(log.write_csv(_out(cfg, 'stages_{}.csv'.format(stem))))
    if len(holdout):
        report = evaluate_model(model, holdout.lr, tag=method, bits=bits, stage_log=log)
        print(_emit_metrics([report], _out(cfg, 'metrics_' + stem)))


def cmd_calibrate(cfg, args, progress):
    calib, holdout = _data(cfg)
    bits = tuple(cfg.bits)
    label = bits_label(*bits)
    original = _backbone(cfg, calib, progress)
    trq = run_trq(original, calib, cfg.trq.t_candidates, bits, cfg.backbone.epochs, cfg.trq.probes,
                  _train_options(cfg), _quant_options(cfg), progress)
    print(trq.profile.write_csv(_out(cfg, 'trq_profile_{}.csv'.format(label)), staged=True))
    print(save_model(trq.backbone, _backbone_path(cfg, trq.best_timestep)))
    model = trq.backbone
    log = StageLog()
    run_qartsr(model, CalibrationPlan.from_config(cfg, model, bits), calib, log,
               checkpoint_dir=_out(cfg, 'stages_qartsr_{}'.format(label)), progress=progress)
    stem = 'qartsr_{}'.format(label)
    print(save_model(model, _out(cfg, stem + '.qart'), {'trq_timestep': trq.best_timestep}))
    print(log.write_csv(_out(cfg, 'stages_{}.csv'.format(stem))))
    if len(holdout):
        report = evaluate_model(model, holdout.lr, tag='qartsr', bits=bits, stage_log=log)
        print(_emit_metrics([report], _out(cfg, 'metrics_' + stem)))


def cmd_eval(cfg, args, progress):
    calib, holdout = _data(cfg)
    model = load_model(args['--checkpoint'])
    quantized = [h.fq for h in model.registry() if h.fq is not None]
    bits = (quantized[0].q_w.bits, quantized[0].q_a.bits) if quantized else (FP_BITS, FP_BITS)
    tag = path.splitext(path.basename(args['--checkpoint']))[0]
    images = holdout.lr if len(holdout) else calib.lr
    report = evaluate_model(model, images, tag=tag, bits=bits)
    print(_emit_metrics([report], _out(cfg, 'metrics_eval_' + tag)))


def cmd_ablate(cfg, args, progress):
    calib, holdout = _data(cfg)
    holdout.require('evaluating the ablation arms')
    bits = tuple(cfg.bits)
    original = _backbone(cfg, calib, progress)
    trq = run_trq(original, calib, cfg.trq.t_candidates, bits, cfg.backbone.epochs, cfg.trq.probes,
                  _train_options(cfg), _quant_options(cfg), progress)
    reports = run_ablation(original, trq.backbone, _plan_kwargs(cfg, bits), calib, holdout.lr, progress)
    print(_emit_metrics(list(reports.values()), _out(cfg, 'ablation_{}'.format(bits_label(*bits)))))


def cmd_report(cfg, args, progress):
    files = sorted(glob(_out(cfg, 'metrics_*.csv')) + glob(_out(cfg, 'ablation_*.csv')))
    reports = [r for f in files for r in read_metrics_csv(f)]
    checkpoints = sorted(glob(_out(cfg, 'qartsr_*.qart')))
    model = load_model(checkpoints[0]) if checkpoints else ToyOSDSR.from_config(cfg)
    costs = cost_table(model, cfg.report.bits, cfg.model.lr_size)
    write_cost_csv(costs, _out(cfg, 'cost.csv'))
    table = summary_table(reports, costs)
    summary_path = _out(cfg, 'summary.txt')
    try:
        with open(summary_path, 'w') as fout:
            fout.write(table + '\n')
    except OSError as e:
        raise DataIOError('Could not write {}: {}'.format(summary_path, e))
    print(table)
    print(summary_path)


COMMANDS = (
    ('gen-data', cmd_gen_data),
    ('train-backbone', cmd_train_backbone),
    ('sweep-timestep', cmd_sweep_timestep),
    ('quantize', cmd_quantize),
    ('calibrate', cmd_calibrate),
    ('eval', cmd_eval),
    ('ablate', cmd_ablate),
    ('report', cmd_report),
)


def _overrides(kwargs):
    overrides = {'out_dir': kwargs['--out']}
    if kwargs['--seed'] is not None:
        try:
            overrides['seed'] = int(kwargs['--seed'])
        except ValueError:
            raise ConfigurationError('--seed must be an integer, got {!r}'.format(kwargs['--seed']))
    if kwargs['--bits']:
        overrides['bits'] = list(parse_bits(kwargs['--bits']))
    if kwargs['--images']:
        overrides['data'] = {'images': kwargs['--images']}
    return overrides


def main(**kwargs):
    """Resolve the configuration, set up logging, write the config echo and run one subcommand."""
    cfg = load_config(kwargs['--config'], _overrides(kwargs))
    log_setup(log_dir=cfg.out_dir, verbose=kwargs['-v'])
    echo_config(cfg)
    for command, handler in COMMANDS:
        if kwargs[command]:
            logging.info('qart {} (out: {}, seed {}, {})'.format(command, cfg.out_dir, cfg.seed,
                                                                 bits_label(*cfg.bits)))
            handler(cfg, kwargs, kwargs['-p'])
            return
    # docopt only accepts the commands above
    raise DocoptExit()


def cli_dispatch(argv=None):
    """Run the command line and return its exit code.

    :param list argv: Arguments without the program name (``sys.argv[1:]``
        by default).
    :return: 0 on success, 1 on a failure (with a one-line reason on
        stderr), 2 on a usage error.
    :rtype: int
    """
    try:
        args = docopt(__doc__, argv=argv)
        main(**args)
    except DocoptExit as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return e.code or EXIT_OK
    except LabError as e:
        logging.critical('{}: {}'.format(type(e).__name__, e))
        print(status('qart: {}'.format(e), ok=False), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(cli_dispatch())
