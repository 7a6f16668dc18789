import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multimodal_ad.imu import (Calibration, ImuConfig, ImuTrainConfig, build_autoencoder, calibrate,
                               fit_imu_detector, fit_normalizer, per_sample_losses, sigma_data, sigma_mag,
                               train_joint)
from multimodal_ad.tensor import ShapeError


def test_normalizer_maps_range_to_unit_interval():
    x = np.array([[1.0, 5.0, 2.0], [3.0, 5.0, -2.0], [2.0, 5.0, 0.0]])
    norm = fit_normalizer(x)
    z = norm.apply(x)
    np.testing.assert_allclose(z[:, 0], [0.0, 1.0, 0.5])
    np.testing.assert_allclose(z[:, 1], 0.0)  # constant channel: max = min + 1
    np.testing.assert_allclose(z[:, 2], [1.0, 0.0, 0.5])
    np.testing.assert_allclose(norm.invert(z), x)
    # no clipping outside the training range
    assert norm.apply([[5.0, 5.0, 0.0]])[0, 0] == 2.0


@pytest.mark.parametrize("bad", [np.zeros((1, 3)), np.zeros((0, 3)), np.zeros(3)])
def test_normalizer_rejects_degenerate_input(bad):
    with pytest.raises(ValueError):
        fit_normalizer(bad)


def test_sigma_exact_at_calibration_points():
    cal = Calibration(0.02, 0.5)
    assert sigma_data(0.02, cal) == 1.0 and sigma_data(0.0, cal) == 0.0
    assert sigma_mag(0.5, cal) == 1.0 and sigma_mag(0.0, cal) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e3), st.floats(0, 100))
def test_sigma_is_linear_in_loss(l_max, k):
    cal = Calibration(l_max, l_max)
    assert sigma_data(k * l_max, cal) == pytest.approx(k, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("l_max", [0.0, -1.0, float("nan")])
def test_degenerate_calibration_rejected(l_max):
    with pytest.raises(ValueError, match="degenerate"):
        sigma_data(0.1, Calibration(l_max, 1.0))
    with pytest.raises(ValueError, match="degenerate"):
        sigma_mag(0.1, Calibration(1.0, l_max))


def test_autoencoder_is_mirrored():
    ae = build_autoencoder(10, [8, 4])
    assert ae.widths == [10, 8, 4, 8, 10]
    assert [w.shape for w, _ in ae.layers] == [(8, 10), (4, 8), (8, 4), (10, 8)]


@pytest.mark.parametrize("widths", [[3, 3, 3], [3, 2], [4, 2, 5]])
def test_invalid_widths_rejected(widths):
    from multimodal_ad.imu import AutoencoderModel
    with pytest.raises(ValueError):
        AutoencoderModel(widths)


def test_per_sample_loss_matches_manual_mse():
    ae = build_autoencoder(3, [2], seed=4)
    x = np.random.default_rng(0).random((5, 3)).astype(np.float32)
    w1, b1 = (p.data.astype(np.float64) for p in ae.layers[0])
    w2, b2 = (p.data.astype(np.float64) for p in ae.layers[1])
    rec = np.tanh(x @ w1.T + b1) @ w2.T + b2
    np.testing.assert_allclose(per_sample_losses(ae, x), ((rec - x) ** 2).mean(1), rtol=1e-5)
    with pytest.raises(ShapeError):
        per_sample_losses(ae, np.zeros((2, 4)))


def test_calibration_is_max_training_loss():
    rng = np.random.default_rng(1)
    d, m = rng.random((40, 10)), rng.random((40, 3))
    ae_d, ae_m = build_autoencoder(10, [4]), build_autoencoder(3, [2])
    cal = calibrate(ae_d, ae_m, d, m)
    # row-at-a-time float32 matmuls sum in a different order than the batch
    assert cal.l_max_data == pytest.approx(max(per_sample_losses(ae_d, row)[0] for row in d), rel=1e-6)
    assert cal.l_max_mag == pytest.approx(max(per_sample_losses(ae_m, row)[0] for row in m), rel=1e-6)


def test_joint_training_reduces_loss_and_rejects_misalignment():
    t = np.linspace(0, 6, 200)
    d = np.stack([np.sin(t), np.cos(t), np.sin(t) * np.cos(t), 0.5 + 0 * t], 1) * 0.4 + 0.5
    m = np.stack([np.sin(t), np.cos(t), -np.sin(t)], 1) * 0.4 + 0.5
    ae_d, ae_m = build_autoencoder(4, [2]), build_autoencoder(3, [2])
    res = train_joint(ae_d, ae_m, d, m, ImuTrainConfig(epochs=60))
    assert res.history[-1] < 0.2 * res.history[0]
    assert res.calibration.l_max_data > 0 and res.calibration.l_max_mag > 0
    with pytest.raises(ValueError, match="misaligned"):
        train_joint(ae_d, ae_m, d, m[:-1])


def test_training_samples_score_at_most_one():
    rng = np.random.default_rng(2)
    t = np.linspace(0, 20, 300)
    d = np.stack([np.sin(t + k) for k in range(5)], 1) + 0.01 * rng.standard_normal((300, 5))
    m = np.stack([np.cos(t + k) for k in range(3)], 1)
    det, _ = fit_imu_detector(d, m, ImuConfig(data_hidden=(3,), mag_hidden=(2,), train=ImuTrainConfig(epochs=20)))
    sd, sm = det.sigmas(d, m)
    assert sd.max() == pytest.approx(1.0) and sm.max() == pytest.approx(1.0)
    assert sd.min() >= 0 and sm.min() >= 0


def test_constant_corpus_converges():
    d = np.tile(np.array([1, 0, 0, 0, 0.1, 0.2, 0.3, 0, 0, 9.81]), (64, 1))
    m = np.tile(np.array([2.2e5, 0, -3.3e5]), (64, 1))
    det, res = fit_imu_detector(d, m, ImuConfig(train=ImuTrainConfig(epochs=100)))
    l1, l2 = det.losses(d, m)
    assert l1.max() < 1e-4 and l2.max() < 1e-4


def test_turbulent_rows_separate_from_normal():
    from multimodal_ad.data.synthetic import simulate_imu

    rng = np.random.default_rng(0)
    t = np.arange(600) * 0.1
    det, _ = fit_imu_detector(*simulate_imu(t, np.zeros(600, bool), rng),
                              ImuConfig(train=ImuTrainConfig(epochs=100)))
    normal_l1, _ = det.losses(*simulate_imu(100 + t, np.zeros(600, bool), rng))
    ab_l1, _ = det.losses(*simulate_imu(100 + t, np.ones(600, bool), rng, variance_multiplier=4.0))
    # most turbulent rows land above the 95th percentile of normal losses
    assert np.mean(ab_l1 > np.percentile(normal_l1, 95)) > 0.9
