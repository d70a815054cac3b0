# -*- coding: utf-8 -*-
"""Shared fixtures: a tiny model, a tiny paired dataset and a gradient checker."""

import numpy as np
import pytest
import yaml
from munch import Munch

from common.run_conf import load_config
from common.tensor import Tensor
from diffusion.toy import ToyOSDSR, train_backbone
from imaging.dataset import PairDataset
from imaging.degrade import degrade
from imaging.synth import synthesize_set

#: Model settings small enough for a full calibration in a few seconds
TINY_MODEL = dict(channels=4, temb_dim=8, blocks=2, scale=2, seed=0)
TINY_LR = 8


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of the scalar function ``f`` at the array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = f(x)
        x[i] = orig - eps
        lo = f(x)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def check_grad(build, x, atol=1e-5, rtol=1e-4):
    """Compare the autodiff gradient of ``build(Tensor)`` (a scalar tensor) with finite differences."""
    t = Tensor(x, requires_grad=True)
    build(t).backward()
    expected = numeric_grad(lambda a: build(Tensor(a)).item(), x)
    np.testing.assert_allclose(t.grad, expected, atol=atol, rtol=rtol)


def make_pairs(count, seed=0, lr_size=TINY_LR, scale=2):
    hr = synthesize_set(count, seed, lr_size * scale)
    lr = np.stack([degrade(img, seed + i, factor=scale) for i, img in enumerate(hr)])
    return PairDataset(lr, hr)


@pytest.fixture
def tiny_pairs():
    return make_pairs(6)


@pytest.fixture
def tiny_model():
    return ToyOSDSR(**TINY_MODEL)


@pytest.fixture
def trained_model(tiny_pairs):
    model = ToyOSDSR(**TINY_MODEL)
    return train_backbone(model, tiny_pairs, 1000, epochs=2, lr=1e-3, batch=3)


@pytest.fixture(scope='session')
def bench():
    """Backbones trained at T=1000 and at T=1 on one calibration set, plus unseen LR images.

    Shared by the slow tests: clone the backbones before quantizing them.
    """
    calib = make_pairs(12)
    original = train_backbone(ToyOSDSR(**TINY_MODEL), calib, 1000, epochs=20, lr=1e-3, batch=4)
    selected = train_backbone(ToyOSDSR(**TINY_MODEL), calib, 1, epochs=20, lr=1e-3, batch=4)
    return Munch(calib=calib, holdout=make_pairs(4, seed=100).lr, original=original, selected=selected)


@pytest.fixture
def tiny_config_file(tmp_path):
    """A user config that shrinks every budget, written to disk."""
    user = {
        'out_dir': str(tmp_path / 'out'),
        'model': {'channels': 4, 'lr_size': TINY_LR, 'scale': 2, 'temb_dim': 8, 'blocks': 2},
        'data': {'size': 4, 'holdout': 2, 'hr_size': TINY_LR * 2},
        'backbone': {'epochs': 1, 'batch': 2},
        'trq': {'t_candidates': [1, 500, 1000], 'probes': 2},
        'calib': {'stage_steps': 2, 'et_steps': 2, 'batch': 2, 'lr': 1.0e-4, 'patience': 0},
        'lsq': {'steps': 2},
        'report': {'bits': [[4, 4], [2, 2]]},
    }
    file_path = tmp_path / 'tiny.yml'
    with open(file_path, 'w') as fout:
        yaml.safe_dump(user, fout)
    return str(file_path)


@pytest.fixture
def tiny_config(tiny_config_file, monkeypatch):
    monkeypatch.delenv('QART_OUT', raising=False)
    return load_config(tiny_config_file)


@pytest.fixture
def grad_check():
    return check_grad


@pytest.fixture
def pairs_factory():
    return make_pairs
