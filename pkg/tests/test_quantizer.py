# -*- coding: utf-8 -*-

import numpy as np
import pytest

from common.const import FP_BITS, Granularity, QuantizerMode
from common.tensor import Tensor, parameter
from common.util import ParameterError
from quant.quantizer import (CalibrationError, QuantParams, Quantizer, calibrate_maxmin, dequantize, fake_quant,
                             qrange, quantize)


def test_qrange():
    assert qrange(4, True) == (-8, 7)
    assert qrange(4, False) == (0, 15)
    assert qrange(2, True) == (-2, 1)
    with pytest.raises(ParameterError):
        qrange(32, False)
    with pytest.raises(ParameterError):
        qrange(1, False)


def test_quantize_rounds_half_away_and_clips():
    qp = QuantParams(4, 0.5, 0., signed=True)
    np.testing.assert_array_equal(quantize(np.array([0.25, -0.25, 1.0, 100., -100.]), qp), [1, -1, 2, 7, -8])


def test_dequantize_rejects_out_of_window_integers():
    qp = QuantParams(2, 1., 0., signed=False)
    with pytest.raises(ParameterError):
        dequantize(np.array([4]), qp)


def test_scale_must_be_positive():
    with pytest.raises(ParameterError):
        QuantParams(4, 0., 0., signed=False)


def test_maxmin_hits_the_window_ends(rng):
    x = rng.uniform(-1.3, 2.7, size=200)
    qp = calibrate_maxmin(x, 4)
    q = quantize(x, qp)
    assert q[np.argmin(x)] == 0 and q[np.argmax(x)] == 15
    # reconstruction error is at most half a step inside the window
    assert np.max(np.abs(dequantize(q, qp) - x)) <= qp.scale.data / 2 + 1e-12


def test_maxmin_streams_samples(rng):
    chunks = [rng.normal(size=20) for _ in range(4)]
    streamed = calibrate_maxmin(iter(chunks), 3)
    whole = calibrate_maxmin(np.concatenate(chunks), 3)
    np.testing.assert_allclose(streamed.scale.data, whole.scale.data)
    np.testing.assert_allclose(streamed.zero_point.data, whole.zero_point.data)


def test_symmetric_per_channel(rng):
    w = rng.normal(size=(3, 8))
    qp = calibrate_maxmin(w, 4, Granularity.channel, signed=True, symmetric=True, axis=0)
    assert qp.scale.shape == (3, 1)
    np.testing.assert_allclose(qp.scale.data[:, 0], np.abs(w).max(axis=1) / 7)
    np.testing.assert_array_equal(qp.zero_point.data, 0.)
    assert qp.granularity == Granularity.channel


def test_constant_channel_is_reproduced():
    w = np.array([[0.3, 0.3, 0.3], [-1., 0., 1.]])
    qp = calibrate_maxmin(w, 4, 'channel', axis=0)
    assert qp.scale.data[0, 0] == 1e-8
    np.testing.assert_allclose(dequantize(quantize(w, qp), qp)[0], [0.3, 0.3, 0.3])


def test_empty_stream():
    with pytest.raises(CalibrationError):
        calibrate_maxmin([], 4)
    with pytest.raises(CalibrationError):
        calibrate_maxmin([np.zeros(0)], 4)


def test_fake_quant_matches_quantize_dequantize(rng):
    x = rng.normal(size=50)
    qp = calibrate_maxmin(x[:25], 3)
    np.testing.assert_allclose(fake_quant(Tensor(x), qp).data, dequantize(quantize(x, qp), qp))


def test_learned_step_gradients():
    s, z = 0.5, 0.1
    x = Tensor([0.3, 0.9, 5.0, -2.0], requires_grad=True)
    qp = QuantParams(2, parameter(s), parameter(z), signed=False)
    fake_quant(x, qp).sum().backward()
    v = (x.data - z) / s
    inside = (v >= 0) & (v <= 3)
    np.testing.assert_array_equal(x.grad, inside.astype(float))
    rounded = np.sign(v) * np.floor(np.abs(v) + 0.5)
    expected_s = np.where(inside, rounded - v, np.where(v > 3, 3., 0.)).sum()
    assert float(qp.scale.grad) == pytest.approx(expected_s)
    assert float(qp.zero_point.grad) == pytest.approx(float((~inside).sum()))


def test_full_precision_quantizer_passes_input_through():
    q = Quantizer(FP_BITS)
    x = Tensor([1.234567])
    assert q.mode == QuantizerMode.fp_passthrough
    assert q.calibrate([np.ones(3)]) is q and q.qp is None
    assert q(x) is x
    assert q.set_mode(QuantizerMode.learned_step) == []
    assert q.is_fp and q.scalar_count() == 0


def test_mode_switches_need_calibration():
    q = Quantizer(4, name='q')
    with pytest.raises(CalibrationError):
        q.set_mode('learned_step')
    with pytest.raises(CalibrationError):
        q(Tensor([1.]))


def test_learned_mode_exposes_and_keeps_parameters(rng):
    q = Quantizer(4)
    q.calibrate(rng.normal(size=30))
    assert q.parameters() == []
    params = q.set_mode(QuantizerMode.lsq)
    assert len(params) == 2 and all(p.requires_grad for p in params)
    assert q.parameters() == params
    assert q.set_mode(QuantizerMode.learned_step) == []
    q.calibrate(rng.normal(size=30))
    assert q.mode == QuantizerMode.learned_step and len(q.parameters()) == 2


def test_symmetric_learned_mode_freezes_zero_point(rng):
    q = Quantizer(4, signed=True, symmetric=True)
    q.calibrate(rng.normal(size=30))
    params = q.set_mode('learned_step')
    assert params == [q.qp.scale]
    assert q.qp.scale.floor == 1e-8


def test_state_restores_parameters(rng):
    q = Quantizer(3, name='a')
    q.calibrate(rng.normal(size=30))
    state = q.state('m.q_a')
    assert sorted(state) == ['m.q_a.scale', 'm.q_a.zero_point']
    fresh = Quantizer(3)
    fresh.load_state(state, 'm.q_a')
    x = rng.normal(size=10)
    np.testing.assert_array_equal(fresh(Tensor(x)).data, q(Tensor(x)).data)


@pytest.mark.parametrize('bits', [2, 3, 4, 8])
@pytest.mark.parametrize('signed', [False, True])
def test_reconstruction_error_is_at_most_half_a_step(bits, signed, rng):
    x = rng.normal(size=10000)
    qp = calibrate_maxmin(x, bits, signed=signed)
    x_hat = fake_quant(Tensor(x), qp).data
    assert np.max(np.abs(x_hat - x)) <= qp.scale.data / 2 + 1e-12
    # grid points are fixed points
    np.testing.assert_array_equal(fake_quant(Tensor(x_hat), qp).data, x_hat)


def test_error_shrinks_with_more_bits(rng):
    x = rng.normal(size=10000)
    errors = [np.linalg.norm(x - fake_quant(Tensor(x), calibrate_maxmin(x, b)).data) for b in (2, 3, 4, 8)]
    assert errors == sorted(errors, reverse=True)
