import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multimodal_ad.anglenet import AngleNetConfig, build_anglenet, predict_angles
from multimodal_ad.data.corpus import AlignedSample, FrameLabel, ImuDataSample, ImuMagSample
from multimodal_ad.ensemble import (ABNORMAL, NORMAL, EnsembleConfig, EnsembleWeights, MissingModalityError,
                                    classify, combine, pick_reference, score_stream)

scores = st.floats(0, 50, allow_nan=False)


def test_exact_formula_values():
    assert abs(combine(1, 1, 1) - 2.65) <= 1e-9
    assert abs(combine(0.5, 0.4, 0.2) - 1.01) <= 1e-9
    assert classify(1.0).label == ABNORMAL
    assert classify(math.nextafter(1.0, 0.0)).label == NORMAL


@settings(max_examples=200, deadline=None)
@given(scores, scores, scores)
def test_combine_matches_fsum_oracle(d, m, l):
    assert combine(d, m, l) == pytest.approx(math.fsum([1.0 * d, 0.9 * m, 0.75 * l]), rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(scores, scores, scores, st.floats(0, 10))
def test_combine_is_monotone(d, m, l, bump):
    base = combine(d, m, l)
    assert combine(d + bump, m, l) >= base
    assert combine(d, m + bump, l) >= base
    assert combine(d, m, l + bump) >= base


@settings(max_examples=100, deadline=None)
@given(scores, scores, scores)
def test_single_weight_degenerates_to_that_score(d, m, l):
    assert combine(d, m, l, EnsembleWeights(1.0, 0.0, 0.0)) == d
    assert combine(d, m, l, EnsembleWeights(0.0, 0.0, 1.0)) == l


@pytest.mark.parametrize("bad", [-0.1, float("nan")])
def test_invalid_scores_rejected(bad):
    with pytest.raises(ValueError):
        combine(bad, 0, 0)
    with pytest.raises(ValueError):
        combine(0, 0, bad)


@pytest.mark.parametrize("w", [(-1, 1, 1), (0, 0, 0), (1, float("inf"), 1)])
def test_invalid_weights_rejected(w):
    with pytest.raises(ValueError):
        EnsembleWeights(*w)


def test_threshold_must_be_positive():
    with pytest.raises(ValueError):
        classify(0.5, threshold=0.0)


# -- stream scoring ----------------------------------------------------------------


class FakeImu:
    """sigma_d is the first gyro channel, sigma_m the first field component."""

    def sigmas_data(self, raw):
        return np.asarray(raw)[:, 4].astype(np.float64)

    def sigmas_mag(self, raw):
        return np.asarray(raw)[:, 0].astype(np.float64)


@pytest.fixture(scope="module")
def anglenet():
    return build_anglenet(AngleNetConfig(branch_widths=(2, 2), post_width=2, hidden=(4, 4)), seed=3)


def _stream(n, seed=0, labels=True):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = 0.1 * i
        q = [1.0, 0, 0, 0]
        gyro = [float(rng.uniform(0, 1)), 0, 0]
        data = ImuDataSample.from_vector(t, q + gyro + [0, 0, 9.81])
        mag = ImuMagSample.from_vector(t, [float(rng.uniform(0, 1)), 0, 0])
        lab = FrameLabel(NORMAL if i % 3 else ABNORMAL) if labels else None
        out.append(AlignedSample(t, rng.random((64, 64)).astype(np.float32), data, mag, lab))
    return out


def test_scores_are_self_consistent(anglenet):
    stream = _stream(12)
    ref = pick_reference(stream)
    angles = predict_angles(anglenet, ref, np.stack([s.image for s in stream]))
    for (sc, verdict), s, a in zip(score_stream(stream, anglenet, FakeImu()), stream, angles):
        assert sc.sigma_d == s.imu_data.angular_velocity[0]
        assert sc.sigma_m == s.imu_mag.field[0]
        assert sc.sigma_l == pytest.approx(a / 90.0, rel=1e-12)
        assert sc.N == combine(sc.sigma_d, sc.sigma_m, sc.sigma_l)
        assert verdict.label == (ABNORMAL if sc.N >= 1.0 else NORMAL)


def test_output_is_invariant_to_input_order(anglenet):
    stream = _stream(10, seed=1)
    shuffled = [stream[i] for i in np.random.default_rng(0).permutation(len(stream))]
    assert score_stream(stream, anglenet, FakeImu()) == score_stream(shuffled, anglenet, FakeImu())


def test_reference_is_first_normal_frame():
    stream = _stream(4)
    assert stream[0].label.label == ABNORMAL
    assert pick_reference(stream) is stream[1].image
    unlabelled = _stream(3, labels=False)
    assert pick_reference(unlabelled) is unlabelled[0].image
    assert pick_reference(stream, timestamp=0.3) is stream[3].image
    with pytest.raises(ValueError):
        pick_reference(stream, timestamp=9.9)


def test_strict_mode_rejects_missing_modality(anglenet):
    stream = _stream(3)
    s = stream[1]
    stream[1] = AlignedSample(s.timestamp, s.image, None, s.imu_mag, s.label)
    with pytest.raises(MissingModalityError, match="IMU/data"):
        score_stream(stream, anglenet, FakeImu())


def test_lenient_mode_scales_threshold_by_present_weight(anglenet):
    stream = _stream(3)
    s = stream[2]
    stream[2] = AlignedSample(s.timestamp, s.image, s.imu_data, None, s.label)
    out = score_stream(stream, anglenet, FakeImu(), EnsembleConfig(lenient=True))
    sc, verdict = out[2]
    assert sc.sigma_m == 0.0
    assert verdict.threshold == pytest.approx((1.0 + 0.75) / 2.65)
    assert sc.N == combine(sc.sigma_d, 0.0, sc.sigma_l)
    assert out[0][1].threshold == 1.0


def test_empty_stream_gives_no_records(anglenet):
    assert score_stream([], anglenet, FakeImu()) == []


def test_fully_rotated_image_alone_contributes_its_weight():
    n = combine(0.0, 0.0, 1.0)
    assert n == 0.75 and classify(n).label == NORMAL
    assert classify(combine(0.3, 0.0, 1.0)).label == ABNORMAL


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0.01, 10), st.floats(0, 5))
def test_classify_is_monotone_in_n_and_threshold(n, thr, bump):
    if classify(n, thr).label == ABNORMAL:
        assert classify(n + bump, thr).label == ABNORMAL
    if classify(n, thr + bump).label == ABNORMAL:
        assert classify(n, thr).label == ABNORMAL


def test_one_record_per_sample(anglenet):
    stream = _stream(7, seed=3)
    assert len(score_stream(stream, anglenet, FakeImu())) == 7
