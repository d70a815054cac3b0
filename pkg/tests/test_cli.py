# -*- coding: utf-8 -*-

import csv
from os import path

import pytest

from common.const import ABLATION_ARMS, METRIC_COLUMNS
from common.run_conf import ECHO_FILE
from metrics.report import read_metrics_csv
from runner.qart import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, cli_dispatch


@pytest.fixture
def out_dir(tiny_config):
    return tiny_config.out_dir


@pytest.fixture
def run(tiny_config_file, tiny_config):
    def _run(*args):
        return cli_dispatch([args[0], '-c', tiny_config_file] + list(args[1:]))
    return _run


@pytest.fixture
def with_data(run):
    assert run('gen-data') == EXIT_OK
    return run


@pytest.fixture
def with_backbone(with_data):
    assert with_data('train-backbone') == EXIT_OK
    return with_data


def _rows(file_path):
    with open(file_path, newline='') as fin:
        return list(csv.reader(fin))


def test_usage_errors():
    assert cli_dispatch(['bogus']) == EXIT_USAGE
    assert cli_dispatch([]) == EXIT_USAGE


def test_gen_data(run, out_dir, capsys):
    assert run('gen-data') == EXIT_OK
    manifest = path.join(out_dir, 'data', 'manifest.csv')
    assert capsys.readouterr().out.strip() == manifest
    assert len(_rows(manifest)) == 1 + 4
    assert len(_rows(path.join(out_dir, 'data', 'holdout.csv'))) == 1 + 2
    assert path.isfile(path.join(out_dir, ECHO_FILE))
    assert path.isfile(path.join(out_dir, 'qart.log'))


def test_commands_need_data(run):
    assert run('train-backbone') == EXIT_FAILURE


def test_train_backbone(with_data, out_dir):
    assert with_data('train-backbone', '--timestep=500') == EXIT_OK
    assert path.isfile(path.join(out_dir, 'backbone_T500.qart'))


def test_eval_of_the_full_precision_backbone(with_backbone, out_dir):
    checkpoint = path.join(out_dir, 'backbone_T1000.qart')
    assert with_backbone('eval', '--checkpoint=' + checkpoint) == EXIT_OK
    report, = read_metrics_csv(path.join(out_dir, 'metrics_eval_backbone_T1000.csv'))
    assert report.tag == 'backbone_T1000' and report.psnr_db == 99.
    assert path.isfile(path.join(out_dir, 'metrics_eval_backbone_T1000.json'))


def test_sweep_timestep(with_backbone, out_dir):
    assert with_backbone('sweep-timestep', '--t-list=1,500,1000') == EXIT_OK
    rows = _rows(path.join(out_dir, 'timestep_profile_W4A4.csv'))
    assert rows[0] == ['t', 'lambda', 'delta_z']
    assert [int(r[0]) for r in rows[1:]] == [1, 500, 1000]


def test_sweep_timestep_staged(with_backbone, out_dir):
    assert with_backbone('sweep-timestep', '--bits=2,2', '--staged') == EXIT_OK
    rows = _rows(path.join(out_dir, 'timestep_profile_W2A2.csv'))
    assert rows[0] == ['t', 'lambda', 'delta_z', 'eps_error', 'image_error']
    assert len(rows) == 1 + 3


def test_quantize_maxmin(with_backbone, out_dir):
    assert with_backbone('quantize', '--method=maxmin') == EXIT_OK
    assert path.isfile(path.join(out_dir, 'maxmin_W4A4.qart'))
    rows = _rows(path.join(out_dir, 'metrics_maxmin_W4A4.csv'))
    assert tuple(rows[0]) == METRIC_COLUMNS and rows[1][:2] == ['maxmin', 'W4A4']


def test_failures_exit_with_one(run, tmp_path):
    assert run('quantize', '--method=gptq') == EXIT_FAILURE
    assert run('gen-data', '--images=' + str(tmp_path / 'nowhere')) == EXIT_FAILURE
    assert run('gen-data', '--bits=4,1') == EXIT_FAILURE
    assert run('eval', '--checkpoint=' + str(tmp_path / 'missing.qart')) == EXIT_FAILURE
    bad = tmp_path / 'bad.yml'
    bad.write_text('calib: {stage_step: 3}\nmystery: 1\n')
    assert cli_dispatch(['gen-data', '-c', str(bad)]) == EXIT_FAILURE


@pytest.mark.slow
def test_quantize_lsq_and_qartsr(with_backbone, out_dir):
    assert with_backbone('quantize', '--method=lsq', '--bits=2,2') == EXIT_OK
    assert len(_rows(path.join(out_dir, 'stages_lsq_W2A2.csv'))) == 1 + 2
    assert with_backbone('quantize') == EXIT_OK
    # four stages of two steps, then two ET steps
    assert len(_rows(path.join(out_dir, 'stages_qartsr_W4A4.csv'))) == 1 + 4 * 2 + 2


@pytest.mark.slow
def test_calibrate_then_report(with_backbone, out_dir, capsys):
    assert with_backbone('calibrate') == EXIT_OK
    for name in ('trq_profile_W4A4.csv', 'qartsr_W4A4.qart', 'stages_qartsr_W4A4.csv', 'metrics_qartsr_W4A4.csv'):
        assert path.isfile(path.join(out_dir, name))
    assert len(_rows(path.join(out_dir, 'trq_profile_W4A4.csv'))) == 1 + 3
    capsys.readouterr()

    assert with_backbone('report') == EXIT_OK
    cost = _rows(path.join(out_dir, 'cost.csv'))
    assert [r[0] for r in cost[1:]] == ['W4A4', 'W2A2']
    with open(path.join(out_dir, 'summary.txt')) as fin:
        summary = fin.read()
    assert 'qartsr' in summary and summary in capsys.readouterr().out


@pytest.mark.slow
def test_ablate(with_data, out_dir):
    assert with_data('ablate') == EXIT_OK
    reports = read_metrics_csv(path.join(out_dir, 'ablation_W4A4.csv'))
    assert [r.tag for r in reports] == list(ABLATION_ARMS)


@pytest.mark.slow
def test_same_seed_gives_identical_checkpoints(run, tmp_path, monkeypatch):
    blobs = []
    for name in ('first', 'second'):
        monkeypatch.setenv('QART_OUT', str(tmp_path / name))
        for command in ('gen-data', 'train-backbone', 'calibrate'):
            assert run(command) == EXIT_OK
        with open(str(tmp_path / name / 'qartsr_W4A4.qart'), 'rb') as fin:
            blobs.append(fin.read())
    assert blobs[0] == blobs[1]
