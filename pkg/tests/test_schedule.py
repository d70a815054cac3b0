# -*- coding: utf-8 -*-

import csv
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from common.const import PROFILE_COLUMNS, STAGED_COLUMNS
from common.tensor import Tensor, DimensionError
from common.util import DataError, ParameterError
from diffusion.schedule import NoiseSchedule, TimestepErrorProfile, build_schedule, measure_timestep_error


def test_linear_schedule():
    s = build_schedule('linear', 1000, 1e-4, 2e-2)
    assert s.t_max == 1000
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(2e-2)
    assert s.alpha_bar_at(1) == pytest.approx(1 - 1e-4)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.lam(1000) == pytest.approx(math.sqrt(1 - s.alpha_bar[-1]))
    np.testing.assert_allclose(s.lambdas(), np.sqrt(1 - s.alpha_bar))


@pytest.mark.parametrize('kind', ['scaled_linear', 'cosine'])
def test_other_schedules_are_valid(kind):
    s = build_schedule(kind, 200)
    assert np.all((s.beta > 0) & (s.beta <= 0.999))
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_bad_schedules():
    with pytest.raises(ParameterError):
        build_schedule('sigmoid')
    with pytest.raises(ParameterError):
        build_schedule('linear', 0)
    with pytest.raises(ParameterError):
        NoiseSchedule([0.1, 1.0])


@pytest.mark.parametrize('t', [0, 1001, 2.5])
def test_timestep_range(t):
    with pytest.raises(ParameterError):
        build_schedule().check_timestep(t)


def test_error_gain_grows_with_t():
    s = build_schedule()
    assert s.error_gain(1) < s.error_gain(500) < s.error_gain(1000)


def test_one_step_transform_inverts_forward_noising(rng):
    s = build_schedule()
    z0, eps = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    t = 400
    a_bar = s.alpha_bar_at(t)
    z_t = math.sqrt(a_bar) * z0 + math.sqrt(1 - a_bar) * eps
    z_h = s.lr_to_hr_latent(Tensor(z_t), t, lambda z, step, c: Tensor(eps))
    np.testing.assert_allclose(z_h.data, z0, atol=1e-10)


def test_one_step_transform_is_differentiable(rng):
    s = build_schedule()
    w = Tensor(rng.normal(size=(3,)), requires_grad=True)
    z = Tensor(rng.normal(size=(2, 3)))
    s.lr_to_hr_latent(z, 10, lambda z_l, step, c: z_l * w).sum().backward()
    a_bar = s.alpha_bar_at(10)
    expected = -math.sqrt(1 - a_bar) / math.sqrt(a_bar) * z.data.sum(axis=0)
    np.testing.assert_allclose(w.grad, expected)


def test_one_step_transform_checks_the_noise_shape():
    with pytest.raises(DimensionError):
        build_schedule().lr_to_hr_latent(Tensor(np.ones((2, 3))), 5, lambda z, t, c: Tensor(np.ones(3)))


def test_profile_picks_the_smallest_error_first_on_ties(tmp_path):
    rows = [{'t': 500, 'lambda': 0.5, 'delta_z': 0.1}, {'t': 1, 'lambda': 0.01, 'delta_z': 0.3},
            {'t': 1000, 'lambda': 0.9, 'delta_z': 0.1}]
    profile = TimestepErrorProfile(rows)
    assert profile.timesteps == [1, 500, 1000]
    assert profile.best_timestep() == 500
    file_path = profile.write_csv(str(tmp_path / 'profile.csv'))
    with open(file_path) as fin:
        lines = list(csv.reader(fin))
    assert tuple(lines[0]) == PROFILE_COLUMNS
    assert [int(r[0]) for r in lines[1:]] == [1, 500, 1000]


def test_measure_timestep_error(tiny_model, tiny_pairs):
    profile = measure_timestep_error(tiny_model, (4, 4), [1000, 1, 500], tiny_pairs.lr[:2])
    assert profile.timesteps == [1, 500, 1000]
    assert profile.bits == (4, 4)
    for row in profile:
        assert set(PROFILE_COLUMNS + STAGED_COLUMNS) <= set(row)
        assert row['delta_z'] > 0
        assert row['lambda'] == pytest.approx(tiny_model.schedule.lam(row['t']))


def test_full_precision_bits_measure_no_error(tiny_model, tiny_pairs):
    profile = measure_timestep_error(tiny_model, (32, 32), [1, 1000], tiny_pairs.lr[:2])
    assert np.all(profile.column('delta_z') < 1e-12)


def test_measure_needs_probes(tiny_model):
    with pytest.raises(DataError):
        measure_timestep_error(tiny_model, (4, 4), [1], np.zeros((0, 8, 8, 3)))


@pytest.mark.parametrize('t', [1, 250, 500, 750, 1000])
def test_unit_noise_error_moves_the_latent_by_the_gain(t, rng):
    s = build_schedule()
    z = Tensor(rng.normal(size=(1, 6)))
    eps = rng.normal(size=(1, 6))
    delta = rng.normal(size=(1, 6))
    delta /= np.linalg.norm(delta)
    clean = s.lr_to_hr_latent(z, t, lambda z_l, step, c: Tensor(eps))
    perturbed = s.lr_to_hr_latent(z, t, lambda z_l, step, c: Tensor(eps + delta))
    assert np.linalg.norm(perturbed.data - clean.data) == pytest.approx(s.lam(t), rel=1e-10)


@pytest.mark.slow
def test_latent_error_follows_the_gain(trained_model, tiny_pairs):
    profile = measure_timestep_error(trained_model, (4, 4), [1, 250, 500, 750, 1000], tiny_pairs.lr)
    rho, _ = spearmanr(profile.column('lambda'), profile.column('delta_z'))
    assert rho >= 0.9
