# -*- coding: utf-8 -*-

from os import path

import pytest
import yaml

from common.run_conf import ECHO_FILE, deep_merge, echo_config, load_config, unknown_keys
from common.util import ConfigurationError, DataIOError


@pytest.fixture(autouse=True)
def no_out_env(monkeypatch):
    monkeypatch.delenv('QART_OUT', raising=False)


def _write(tmp_path, data, name='user.yml'):
    file_path = tmp_path / name
    file_path.write_text(yaml.safe_dump(data))
    return str(file_path)


def test_defaults():
    cfg = load_config()
    assert cfg.calib.stage_steps == 200
    assert cfg.bits == [4, 4]
    assert cfg.report.bits == [[4, 4], [3, 3], [2, 2]]
    assert cfg.model.lr_size * cfg.model.scale == cfg.data.hr_size
    assert cfg.quant.rank is None


def test_deep_merge_keeps_sibling_keys():
    base = {'a': {'x': 1, 'y': 2}, 'b': [1, 2]}
    merged = deep_merge(base, {'a': {'y': 3}, 'b': [9]})
    assert merged == {'a': {'x': 1, 'y': 3}, 'b': [9]}
    assert base['a']['y'] == 2


def test_user_file_is_merged(tiny_config):
    assert tiny_config.calib.stage_steps == 2
    assert tiny_config.calib.optimizer == 'adam'
    assert tiny_config.model.channels == 4 and tiny_config.model.blocks == 2


def test_overrides_win_and_none_is_ignored(tiny_config_file):
    cfg = load_config(tiny_config_file, {'seed': 7, 'bits': [2, 2], 'data': {'images': None}})
    assert cfg.seed == 7 and cfg.bits == [2, 2]
    assert cfg.data.images is None


def test_environment_sets_the_output_directory(tiny_config_file, tmp_path, monkeypatch):
    monkeypatch.setenv('QART_OUT', str(tmp_path / 'env'))
    assert load_config(tiny_config_file, {'out_dir': 'cli'}).out_dir == str(tmp_path / 'env')


def test_unknown_top_level_keys(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, {'sed': 1}))


def test_unknown_nested_keys(tmp_path):
    with pytest.raises(ConfigurationError) as e:
        load_config(_write(tmp_path, {'calib': {'stage_step': 3, 'lr': 1e-4}, 'model': {'chanels': 8}}))
    assert 'calib.stage_step' in str(e.value) and 'model.chanels' in str(e.value)
    assert 'calib.lr' not in str(e.value)


def test_unknown_keys_lists_dotted_names():
    known = {'a': {'b': 1, 'c': {'d': 2}}, 'e': None}
    assert unknown_keys(known, {'a': {'b': 5, 'c': {'x': 1}}, 'e': {'free': 1}, 'z': 0}) == ['a.c.x', 'z']
    assert unknown_keys(known, {}) == []


def test_bits_are_normalized(tmp_path):
    cfg = load_config(_write(tmp_path, {'bits': 'W3A8', 'report': {'bits': ['2,2']}}))
    assert cfg.bits == [3, 8] and cfg.report.bits == [[2, 2]]


@pytest.mark.parametrize('user', [
    {'bits': [4, 1]},
    {'bits': [4]},
    {'quant': {'rank': -1}},
    {'quant': {'granularity': 'group'}},
    {'quant': {'bias_bits': 12}},
    {'calib': {'stage_steps': -1}},
    {'calib': {'lr': -1.0}},
    {'calib': {'a1': 0, 'a2': 0}},
    {'trq': {'t_candidates': [0, 500]}},
    {'backbone': {'timestep': 1001}},
    {'schedule': {'t_max': 0}},
    {'data': {'hr_size': 100}},
    {'model': {'lr_size': 30}, 'data': {'hr_size': 120}},
    {'data': {'images': '/does/not/exist'}},
])
def test_invalid_values(tmp_path, user):
    with pytest.raises(ConfigurationError):
        load_config(_write(tmp_path, user))


def test_bad_files(tmp_path):
    with pytest.raises(DataIOError):
        load_config(str(tmp_path / 'missing.yml'))
    (tmp_path / 'list.yml').write_text('- 1\n- 2\n')
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / 'list.yml'))
    (tmp_path / 'broken.yml').write_text('a: [1, 2\n')
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / 'broken.yml'))
    (tmp_path / 'empty.yml').write_text('')
    assert load_config(str(tmp_path / 'empty.yml')) == load_config()


def test_echo_reloads_to_the_same_settings(tiny_config, tmp_path):
    echo_path = echo_config(tiny_config, str(tmp_path / 'run'))
    assert path.basename(echo_path) == ECHO_FILE
    assert load_config(echo_path) == tiny_config
