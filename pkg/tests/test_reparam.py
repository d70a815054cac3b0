# -*- coding: utf-8 -*-

import numpy as np
import pytest

from common.const import FP_BITS, QuantizerMode
from common.optim import SGD
from common.tensor import Tensor, DimensionError
from common.util import ParameterError
from quant.reparam import (apply_conv_as_matmul, default_rank, init_finetune_quantizer, kernel_to_matrix)

FP = (FP_BITS, FP_BITS)


def _direct_conv(x, kernel, bias):
    """Reference stride-1, same-padded convolution with explicit loops."""
    k = kernel.shape[0]
    p = k // 2
    n, h, w, _ = x.shape
    padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((n, h, w, kernel.shape[3]))
    for i in range(h):
        for j in range(w):
            patch = padded[:, i:i + k, j:j + k, :]
            out[:, i, j, :] = np.einsum('nabc,abcd->nd', patch, kernel)
    return out + bias


@pytest.mark.parametrize('k', [1, 3])
def test_conv_as_matmul_matches_direct_convolution(k, rng):
    x = rng.normal(size=(2, 5, 4, 3))
    kernel = rng.normal(size=(k, k, 3, 2))
    bias = rng.normal(size=2)
    np.testing.assert_allclose(apply_conv_as_matmul(kernel, x, bias).data, _direct_conv(x, kernel, bias), atol=1e-12)


def test_kernel_must_be_square():
    with pytest.raises(DimensionError):
        kernel_to_matrix(np.zeros((3, 1, 2, 2)))


def test_default_rank():
    assert default_rank(16, 144) == 1
    assert default_rank(64, 64) == 4
    assert default_rank(3, 5) == 1


def test_rank_limits(rng):
    w = rng.normal(size=(4, 6))
    init_finetune_quantizer(w, None, rank=2, finetune_rank=2)
    with pytest.raises(ParameterError):
        init_finetune_quantizer(w, None, rank=3, finetune_rank=2)
    with pytest.raises(ParameterError):
        init_finetune_quantizer(w, None, rank=-1)


def test_initialization(rng):
    w, b = rng.normal(size=(6, 8)), rng.normal(size=6)
    fq = init_finetune_quantizer(w, b, rank=2, finetune_rank=1, rng=rng)
    assert fq.rank == 2 and fq.finetune_rank == 1
    np.testing.assert_array_equal(fq.f2.data, 0.)
    np.testing.assert_allclose(fq.quant_branch_weight().data + fq.skip().data, w, atol=1e-12)
    np.testing.assert_array_equal(fq.et.phi.data, 1.)
    assert fq.finetune_rank == fq.f1.shape[1]


def test_full_precision_bits_reproduce_the_layer(rng):
    w, b = rng.normal(size=(5, 7)), rng.normal(size=5)
    x = rng.normal(size=(4, 7))
    fq = init_finetune_quantizer(w, b, rank=2, bits=FP, act_samples=[x], rng=rng)
    assert fq.q_b.is_fp
    np.testing.assert_allclose(fq(Tensor(x)).data, x @ w.T + b, atol=1e-10)


def test_equivalent_transform_keeps_the_output(rng):
    w, b = rng.normal(size=(5, 7)), rng.normal(size=5)
    x = rng.normal(size=(4, 7))
    fq = init_finetune_quantizer(w, b, rank=1, bits=FP, rng=rng)
    fq.et.log_phi.data[...] = rng.normal(scale=0.5, size=7)
    fq.et.gamma.data[...] = rng.normal(size=7)
    np.testing.assert_allclose(fq(Tensor(x)).data, x @ w.T + b, atol=1e-10)


def test_equivalent_transform_on_a_convolution(rng):
    kernel = rng.normal(size=(3, 3, 2, 4))
    bias = rng.normal(size=4)
    x = rng.normal(size=(1, 4, 4, 2))
    fq = init_finetune_quantizer(kernel_to_matrix(kernel), bias, rank=1, bits=FP, kernel=3, rng=rng)
    fq.et.log_phi.data[...] = [0.3, -0.2]
    fq.et.gamma.data[...] = [0.1, -0.4]
    np.testing.assert_allclose(fq(Tensor(x)).data, _direct_conv(x, kernel, bias), atol=1e-10)


def test_quantized_layer_is_close_at_eight_bits(rng):
    w, b = rng.normal(size=(8, 16)), rng.normal(size=8)
    x = rng.normal(size=(32, 16))
    fq = init_finetune_quantizer(w, b, bits=(8, 8), act_samples=[x], rng=rng)
    ref = x @ w.T + b
    err = np.abs(fq(Tensor(x)).data - ref).max()
    assert 0 < err < 0.05 * np.abs(ref).max()


def test_only_adapters_receive_gradients(rng):
    w, b = rng.normal(size=(4, 6)), rng.normal(size=4)
    x = rng.normal(size=(8, 6))
    fq = init_finetune_quantizer(w, b, rank=1, finetune_rank=1, bits=(4, 4), act_samples=[x], rng=rng)
    fq.set_mode(QuantizerMode.learned_step)
    params = fq.parameters()
    names = [p.name for p in params]
    assert names[:6] == ['l1', 'l2', 'f1', 'f2', 'log_phi', 'gamma']
    # q_w and q_b are symmetric: scale only
    assert len(params) == 6 + 1 + 2 + 1
    digest = fq.frozen_digest()
    opt = SGD(params, 1e-2)
    for _ in range(3):
        opt.zero_grad()
        (fq(Tensor(x)) ** 2).mean().backward()
        opt.step()
    assert fq.weight.grad is None and fq.bias.grad is None
    assert fq.frozen_digest() == digest
    assert np.any(fq.f2.data != 0.)


def test_train_et_flag_drops_the_transform(rng):
    fq = init_finetune_quantizer(rng.normal(size=(4, 6)), None, rank=0, finetune_rank=0, rng=rng)
    fq.train_et = False
    assert fq.parameters() == []


def test_input_shape_is_checked(rng):
    fq = init_finetune_quantizer(rng.normal(size=(4, 6)), None, rank=1, bits=FP, rng=rng)
    with pytest.raises(DimensionError):
        fq(Tensor(np.ones((2, 5))))


def test_overhead_params(rng):
    x = rng.normal(size=(4, 6))
    fq = init_finetune_quantizer(rng.normal(size=(4, 6)), rng.normal(size=4), rank=1, finetune_rank=1,
                                 bits=(4, 4), act_samples=[x], rng=rng)
    # (r + r')(m + n) + 2·n + per-channel q_w (4 scales, 4 zero points) + q_a (2) + q_b (2)
    assert fq.overhead_params() == 2 * 10 + 12 + 8 + 2 + 2


def test_state_round_trip(rng):
    w, b = rng.normal(size=(4, 6)), rng.normal(size=4)
    x = rng.normal(size=(5, 6))
    fq = init_finetune_quantizer(w, b, rank=1, finetune_rank=1, act_samples=[x], rng=rng)
    fq.f2.data[...] = rng.normal(size=fq.f2.shape)
    fq.et.gamma.data[...] = 0.2
    fq.calibrate_weights()
    restored = init_finetune_quantizer(w, b, rank=1, finetune_rank=1, rng=np.random.default_rng(99))
    restored.load_state(fq.state('m'), 'm')
    np.testing.assert_array_equal(restored(Tensor(x)).data, fq(Tensor(x)).data)
