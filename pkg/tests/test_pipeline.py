# -*- coding: utf-8 -*-

import csv
from os import listdir

import numpy as np
import pytest

from calib.pipeline import (CalibrationPlan, FrozenWeightError, StageLog, fp_outputs, run_ablation, run_et,
                            run_lsq_baseline, run_maxmin_baseline, run_one_shot, run_qartsr, run_rpq, run_trq)
from common.const import ABLATION_ARMS, STAGE_LOG_COLUMNS, QuantizerMode
from common.optim import SGD
from common.util import ConfigurationError, DataError
from diffusion.toy import TrainingError, ToyOSDSR, clone_model, save_model
from metrics.report import evaluate_model

REVERSED = ['decoder.layer2', 'decoder.layer1', 'denoiser.block2', 'denoiser.block1']

PLAN = dict(stage_steps=3, et_steps=2, lr=1e-4, batch=3, patience=0, rank=1, finetune_rank=1, probe_size=3)

#: Budgets large enough for the quantization methods to separate on the shared bench
BENCH_PLAN = dict(PLAN, stage_steps=5, et_steps=200, lr=1e-3, batch=4)


def _plan(model, **kwargs):
    options = dict(PLAN)
    options.update(kwargs)
    return CalibrationPlan.for_model(model, **options)


def test_plan_order_is_reversed_inference_order(tiny_model):
    plan = _plan(tiny_model)
    assert plan.order == REVERSED
    assert plan.validate(tiny_model) is plan


@pytest.mark.parametrize('change', [
    dict(order=list(reversed(REVERSED))),
    dict(stage_steps=0),
    dict(et_steps=-1),
    dict(batch=0),
    dict(lr=-1e-5),
])
def test_plan_validation(tiny_model, change):
    options = dict(PLAN, order=REVERSED)
    options.update(change)
    with pytest.raises(ConfigurationError):
        CalibrationPlan(**options).validate(tiny_model)


def test_plan_from_config(tiny_config):
    model = ToyOSDSR.from_config(tiny_config)
    plan = CalibrationPlan.from_config(tiny_config, model, (2, 2))
    assert plan.bits == (2, 2)
    assert plan.stage_steps == 2 and plan.probe_size == 2
    assert plan.losses.a1 == 1. and plan.losses.a2 == 1.


def test_fp_outputs_are_chunked_consistently(trained_model, tiny_pairs):
    whole = trained_model.forward(tiny_pairs.lr, 1000).data
    np.testing.assert_allclose(fp_outputs(trained_model, tiny_pairs.lr, 1000, batch=4), whole, atol=1e-12)


def test_rpq_needs_a_trained_backbone(tiny_model, tiny_pairs):
    with pytest.raises(ConfigurationError):
        run_rpq(tiny_model, _plan(tiny_model), tiny_pairs)


def test_rpq_needs_data(trained_model):
    with pytest.raises(DataError):
        run_rpq(trained_model, _plan(trained_model), np.zeros((0, 8, 8, 3)))


def test_rpq_stages(trained_model, tiny_pairs):
    digest = trained_model.frozen_digest()
    log = StageLog()
    run_rpq(trained_model, _plan(trained_model), tiny_pairs, log)

    assert trained_model.frozen_digest() == digest
    assert trained_model.quantized_names() == list(reversed(REVERSED))
    assert [s['stage'] for s in log.summaries] == REVERSED
    for s in log.summaries:
        assert s['end'] <= s['start']
    for name in REVERSED:
        assert [r[1] for r in log.stage_rows(name)] == [1, 2, 3]
    for name in REVERSED[:-1]:
        assert all(r[2] is not None and r[4] >= r[3] for r in log.stage_rows(name))
    # a module trains in its own stage and every later one
    assert [log.grad_counts[n] for n in REVERSED] == [12, 9, 6, 3]
    assert all(h.fq.q_w.mode == QuantizerMode.learned_step for h in trained_model.registry())
    assert trained_model.stage_log is log


def test_last_rpq_stage_trains_on_the_image_loss_alone(trained_model, tiny_pairs):
    log = StageLog()
    run_rpq(trained_model, _plan(trained_model), tiny_pairs, log)
    last = log.stage_rows(REVERSED[-1])
    assert len(last) == 3
    for stage, step, l_module, l_image, total in last:
        assert l_module is None
        assert total == l_image
    assert log.summaries[-1]['stage'] == REVERSED[-1]
    assert trained_model.quantized_names() == list(reversed(REVERSED))


def test_rpq_detects_isolation_violations(trained_model, tiny_pairs):
    log = StageLog()
    log.grad_counts['decoder.layer2'] = 1
    with pytest.raises(TrainingError):
        run_rpq(trained_model, _plan(trained_model), tiny_pairs, log)


def test_rpq_detects_changed_fp_weights(trained_model, tiny_pairs, monkeypatch):
    class TamperingSGD(SGD):
        def step(self):
            super().step()
            trained_model.c_y.data += 1e-3

    monkeypatch.setattr('calib.pipeline.build_optimizer', lambda name, params, lr: TamperingSGD(params, lr))
    with pytest.raises(FrozenWeightError):
        run_rpq(trained_model, _plan(trained_model), tiny_pairs)


def test_rpq_stage_checkpoints(trained_model, tiny_pairs, tmp_path):
    run_rpq(trained_model, _plan(trained_model), tiny_pairs, checkpoint_dir=str(tmp_path / 'stages'))
    assert sorted(listdir(str(tmp_path / 'stages'))) == ['stage{:02d}_{}.qart'.format(i, n)
                                                         for i, n in enumerate(REVERSED)]


def test_et_needs_every_module_quantized(trained_model, tiny_pairs):
    trained_model.attach_quantizers((4, 4), tiny_pairs.lr, 1000, names=['decoder.layer2'])
    with pytest.raises(ConfigurationError):
        run_et(trained_model, _plan(trained_model), tiny_pairs)


def test_qartsr_runs_rpq_then_et(trained_model, tiny_pairs, tmp_path):
    digest = trained_model.frozen_digest()
    log = StageLog()
    run_qartsr(trained_model, _plan(trained_model), tiny_pairs, log)
    assert [s['stage'] for s in log.summaries] == REVERSED + ['et']
    et_rows = log.stage_rows('et')
    assert len(et_rows) == 2 and all(r[2] is None for r in et_rows)
    assert log.summaries[-1]['end'] <= log.summaries[-1]['start']
    assert trained_model.frozen_digest() == digest

    file_path = log.write_csv(str(tmp_path / 'stages.csv'))
    with open(file_path) as fin:
        rows = list(csv.reader(fin))
    assert tuple(rows[0]) == STAGE_LOG_COLUMNS
    assert len(rows) == 1 + 4 * 3 + 2
    assert rows[-1][2] == ''


def test_et_after_one_shot(trained_model, tiny_pairs):
    plan = _plan(trained_model, et_steps=3)
    run_one_shot(trained_model, plan, tiny_pairs)
    assert all(h.fq.q_a.mode == QuantizerMode.maxmin_static for h in trained_model.registry())
    run_et(trained_model, plan, tiny_pairs)
    assert all(h.fq.q_a.mode == QuantizerMode.learned_step for h in trained_model.registry())


def test_zero_et_budget_changes_nothing(trained_model, tiny_pairs):
    plan = _plan(trained_model, et_steps=0)
    run_one_shot(trained_model, plan, tiny_pairs)
    before = trained_model.forward(tiny_pairs.lr, 1000, active=trained_model.quantized_names()).data
    log = run_et(trained_model, plan, tiny_pairs).stage_log
    after = trained_model.forward(tiny_pairs.lr, 1000, active=trained_model.quantized_names()).data
    np.testing.assert_array_equal(before, after)
    assert len(log) == 0 and log.summaries[0]['start'] == log.summaries[0]['end']


def test_maxmin_baseline(trained_model, tiny_pairs):
    run_maxmin_baseline(trained_model, (4, 4), tiny_pairs)
    for h in trained_model.registry():
        assert h.fq.rank == 0 and h.fq.finetune_rank == 0
        assert h.fq.parameters() == h.fq.et.parameters()


def test_lsq_baseline_trains_only_step_sizes(trained_model, tiny_pairs):
    digest = trained_model.frozen_digest()
    log = StageLog()
    run_lsq_baseline(trained_model, _plan(trained_model), tiny_pairs, steps=2, log=log)
    assert trained_model.frozen_digest() == digest
    assert [s['stage'] for s in log.summaries] == ['lsq']
    for h in trained_model.registry():
        assert not h.fq.train_et
        assert {p.name for p in h.fq.parameters()} <= {'scale', 'zero_point'}


def test_trq_retrains_at_the_best_timestep(trained_model, tiny_pairs):
    result = run_trq(trained_model, tiny_pairs, [1, 1000], (4, 4), epochs=1, probes=2,
                     train_options=dict(batch=3))
    assert result.best_timestep in (1, 1000)
    assert result.best_timestep == result.profile.best_timestep()
    assert result.backbone.timestep == result.best_timestep
    assert result.profile.timesteps == [1, 1000]
    assert trained_model.quantized_names() == []
    assert result.backbone.config == trained_model.config


def test_trq_needs_candidates(trained_model, tiny_pairs):
    with pytest.raises(ConfigurationError):
        run_trq(trained_model, tiny_pairs, [], (4, 4), epochs=1)


@pytest.mark.slow
def test_ablation_arms(trained_model, tiny_pairs):
    selected = ToyOSDSR(**trained_model.config)
    selected.timestep = 1
    selected.loss_history = []
    for p, q in zip(selected.fp_parameters(), trained_model.fp_parameters()):
        p.data[...] = q.data
    reports = run_ablation(trained_model, selected, dict(PLAN, bits=(4, 4)), tiny_pairs, tiny_pairs.lr[:2])
    assert list(reports) == list(ABLATION_ARMS)
    for arm, report in reports.items():
        assert report.tag == arm and report.bits == (4, 4)
        assert 0 < report.psnr_db <= 99. and -1. <= report.ssim <= 1.
    assert trained_model.quantized_names() == [] and selected.quantized_names() == []
    assert list(reports['TRQ+RPQ*+ET'].stage_losses) == ['et']


@pytest.mark.slow
def test_more_bits_give_higher_fidelity(trained_model, tiny_pairs):
    psnrs = []
    for bits in [(2, 2), (4, 4), (8, 8)]:
        model = clone_model(trained_model, with_quantizers=False)
        run_qartsr(model, _plan(model, bits=bits), tiny_pairs)
        psnrs.append(evaluate_model(model, tiny_pairs.lr, bits=bits).psnr_db)
    assert psnrs == sorted(psnrs)


def test_same_seed_gives_identical_checkpoints(trained_model, tiny_pairs, tmp_path):
    blobs = []
    for name in ('first', 'second'):
        model = clone_model(trained_model, with_quantizers=False)
        run_qartsr(model, _plan(model), tiny_pairs)
        with open(save_model(model, str(tmp_path / (name + '.qart'))), 'rb') as fin:
            blobs.append(fin.read())
    assert blobs[0] == blobs[1]


@pytest.mark.slow
def test_trq_picks_the_smallest_timestep_at_w2a2(bench):
    result = run_trq(clone_model(bench.original, with_quantizers=False), bench.calib, [1, 500, 1000], (2, 2),
                     epochs=1, train_options=dict(batch=4))
    assert result.best_timestep == 1
    assert result.backbone.timestep == 1


@pytest.mark.slow
def test_t1_backbone_keeps_more_fidelity_at_w2a2(bench):
    psnr = {}
    for t, backbone in ((1000, bench.original), (1, bench.selected)):
        model = run_maxmin_baseline(clone_model(backbone, with_quantizers=False), (2, 2), bench.calib)
        psnr[t] = evaluate_model(model, bench.holdout, bits=(2, 2)).psnr_db
    assert psnr[1] >= psnr[1000] + 1.


@pytest.mark.slow
def test_qartsr_beats_maxmin_at_w2a2(bench):
    maxmin = run_maxmin_baseline(clone_model(bench.selected, with_quantizers=False), (2, 2), bench.calib)
    qartsr = clone_model(bench.selected, with_quantizers=False)
    run_qartsr(qartsr, _plan(qartsr, bits=(2, 2), **BENCH_PLAN), bench.calib)
    assert (evaluate_model(maxmin, bench.holdout, bits=(2, 2)).psnr_db <
            evaluate_model(qartsr, bench.holdout, bits=(2, 2)).psnr_db)


@pytest.mark.slow
def test_ablation_ordering_at_w4a4(bench):
    reports = run_ablation(bench.original, bench.selected, dict(BENCH_PLAN, bits=(4, 4)), bench.calib, bench.holdout)
    psnr = {arm: report.psnr_db for arm, report in reports.items()}
    # each component adds at least 0.3 dB
    assert psnr['TRQ+RPQ*+ET'] >= psnr['TRQ+RPQ*'] + 0.3
    assert psnr['TRQ+RPQ*'] >= psnr['baseline'] + 0.3
    assert psnr['TRQ+ET'] >= psnr['TRQ'] + 0.3
