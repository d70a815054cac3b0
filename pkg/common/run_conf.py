# -*- coding: utf-8 -*-
"""Run configuration.

Settings come from four layers, later ones winning:

1. ``config/default.yml`` (every setting has a default there)
2. the user's YAML file (``-c/--config``), deep-merged
3. command line flags, passed in as ``overrides``
4. the ``QART_OUT`` environment variable, for the output directory

The result is a :class:`~munch.Munch`, so settings read as attributes:

>>> cfg = load_config()
>>> cfg.calib.stage_steps
200
"""

import logging
from copy import deepcopy
from os import environ, makedirs, path

import yaml
from munch import munchify, unmunchify

from common.const import OUT_ENV_VAR
from common.util import ConfigurationError, DataIOError, LabError, parse_bits, validate_bits

__all__ = ['DEFAULT_CONFIG', 'ECHO_FILE', 'load_config', 'echo_config', 'deep_merge', 'unknown_keys',
           'validate_config']

#: Location of the file that holds every default
DEFAULT_CONFIG = path.join(path.dirname(path.dirname(path.abspath(__file__))), 'config', 'default.yml')

#: Name of the resolved-config file written into every output directory
ECHO_FILE = 'config_echo.yml'


def _read_yaml(file_path):
    try:
        with open(file_path) as fin:
            data = yaml.safe_load(fin)
    except OSError as e:
        raise DataIOError('Could not read config file {}: {}'.format(file_path, e))
    except yaml.YAMLError as e:
        raise ConfigurationError('Config file {} is not valid YAML: {}'.format(file_path, e))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError('Config file {} must hold a mapping at the top level'.format(file_path))
    return data


def deep_merge(base, update):
    """Return a copy of ``base`` with ``update`` merged into it recursively.

    Nested mappings merge key by key; any other value in ``update`` replaces
    the one in ``base``.
    """
    merged = deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = deepcopy(value)
    return merged


def unknown_keys(known, given, prefix=''):
    """Dotted names of every key in ``given`` that ``known`` doesn't have, at any depth.

    >>> unknown_keys({'calib': {'stage_steps': 1}}, {'calib': {'stage_step': 2}})
    ['calib.stage_step']
    """
    out = []
    for key in sorted(given, key=str):
        name = '{}{}'.format(prefix, key)
        if key not in known:
            out.append(name)
        elif isinstance(known[key], dict) and isinstance(given[key], dict):
            out.extend(unknown_keys(known[key], given[key], name + '.'))
    return out


def load_config(config_path=None, overrides=None):
    """Resolve the run configuration.

    :param str config_path: Optional user YAML file.
    :param dict overrides: Optional nested mapping of values set on the
        command line. Keys whose value is `None` are ignored.
    :return: The validated configuration.
    :rtype: munch.Munch
    :raises ConfigurationError: When a value is out of range or unknown.
    """
    cfg = _read_yaml(DEFAULT_CONFIG)
    if config_path is not None:
        user = _read_yaml(config_path)
        unknown = unknown_keys(cfg, user)
        if unknown:
            raise ConfigurationError('Unknown config keys in {}: {}'.format(config_path, ', '.join(unknown)))
        cfg = deep_merge(cfg, user)
    if overrides:
        cfg = deep_merge(cfg, _drop_none(overrides))
    if environ.get(OUT_ENV_VAR):
        cfg['out_dir'] = environ[OUT_ENV_VAR]
    return munchify(validate_config(cfg))


def _drop_none(d):
    out = {}
    for key, value in d.items():
        if isinstance(value, dict):
            value = _drop_none(value)
            if value:
                out[key] = value
        elif value is not None:
            out[key] = value
    return out


def validate_config(cfg):
    """Check ranges and normalize a plain configuration dict in place.

    Bit settings are normalized to ``[w, a]`` lists.

    :param dict cfg: The merged configuration.
    :return: ``cfg``
    :raises ConfigurationError: On the first invalid value.
    """
    try:
        cfg['bits'] = list(parse_bits(cfg['bits']))
        cfg['report']['bits'] = [list(parse_bits(b)) for b in cfg['report']['bits']]
        cfg['quant']['bias_bits'] = validate_bits(cfg['quant']['bias_bits'])
    except LabError as e:
        raise ConfigurationError(str(e))

    for key in ('rank', 'finetune_rank'):
        value = cfg['quant'][key]
        if value is not None and int(value) < 0:
            raise ConfigurationError('quant.{} must be >= 0, got {}'.format(key, value))
    if str(cfg['quant']['granularity']) not in ('tensor', 'channel'):
        raise ConfigurationError('quant.granularity must be "tensor" or "channel"')

    for section, key in (('calib', 'stage_steps'), ('calib', 'et_steps'), ('calib', 'batch'), ('backbone', 'epochs'),
                         ('backbone', 'batch'), ('data', 'size'), ('data', 'holdout'), ('lsq', 'steps'),
                         ('trq', 'probes')):
        if int(cfg[section][key]) < 0:
            raise ConfigurationError('{}.{} must be >= 0, got {}'.format(section, key, cfg[section][key]))

    for key in ('a1', 'a2', 'module_loss_weight', 'lr'):
        if float(cfg['calib'][key]) < 0:
            raise ConfigurationError('calib.{} must be >= 0, got {}'.format(key, cfg['calib'][key]))
    if float(cfg['calib']['a1']) == 0 and float(cfg['calib']['a2']) == 0:
        raise ConfigurationError('calib.a1 and calib.a2 must not both be zero')

    t_max = int(cfg['schedule']['t_max'])
    if t_max < 1:
        raise ConfigurationError('schedule.t_max must be >= 1, got {}'.format(t_max))
    cfg['trq']['t_candidates'] = [int(t) for t in cfg['trq']['t_candidates']]
    for t in cfg['trq']['t_candidates'] + [int(cfg['backbone']['timestep'])]:
        if not 1 <= t <= t_max:
            raise ConfigurationError('Timestep {} outside [1, {}]'.format(t, t_max))

    hr, scale = int(cfg['data']['hr_size']), int(cfg['model']['scale'])
    if int(cfg['model']['lr_size']) * scale != hr:
        raise ConfigurationError('model.lr_size * model.scale must equal data.hr_size ({} * {} != {})'
                                 .format(cfg['model']['lr_size'], scale, hr))
    if int(cfg['model']['lr_size']) % 4:
        raise ConfigurationError('model.lr_size must be divisible by 4')

    images = cfg['data']['images']
    if images is not None and not path.isdir(images):
        raise ConfigurationError('data.images is not a directory: {}'.format(images))
    return cfg


def echo_config(cfg, out_dir=None):
    """Write the fully resolved configuration to ``<out_dir>/config_echo.yml``.

    Loading the echo with :func:`load_config` gives back the same settings.

    :return: Path of the echo file.
    :rtype: str
    """
    out_dir = out_dir or cfg.out_dir
    try:
        makedirs(out_dir, exist_ok=True)
        echo_path = path.join(out_dir, ECHO_FILE)
        with open(echo_path, 'w') as fout:
            yaml.safe_dump(unmunchify(cfg), fout, default_flow_style=False, sort_keys=True)
    except OSError as e:
        raise DataIOError('Could not write {} in {}: {}'.format(ECHO_FILE, out_dir, e))
    logging.debug('Wrote resolved configuration to {}'.format(echo_path))
    return echo_path
