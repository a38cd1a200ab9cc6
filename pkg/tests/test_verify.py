import numpy as np
import pytest
from hypothesis import given, strategies as st

from segverify.errors import CalibrationError, ModelError, ParamError, ShapeError, TilingError
from segverify.imagecore import boundary_strip
from segverify.nnet import RecModel
from segverify.ssim import ssim_score
from segverify.verify import (Label, Thresholds, VerifyConfig, calibrate_thresholds, error_rates,
                              model_inputs, reconstruct, roc_auc, training_pairs,
                              verification_score, verdict, verify_sample)

TH = Thresholds(0.9, 0.8)

pairs = st.lists(st.tuples(st.floats(-1, 1), st.floats(0, 1)), min_size=1, max_size=40)


def test_verdict_boundaries():
    assert verdict(0.9, TH).label is Label.ACCEPT
    assert verdict(0.95, TH).label is Label.ACCEPT
    assert verdict(np.nextafter(0.8, 0), TH).label is Label.REJECT
    assert verdict(0.8, TH).label is Label.UNCERTAIN
    assert verdict(0.85, TH).label is Label.UNCERTAIN
    v = verdict(0.85, TH, l2=1.5)
    assert (v.ssim, v.l2, v.thresholds) == (0.85, 1.5, TH)


def test_thresholds_ordering():
    with pytest.raises(ParamError):
        Thresholds(0.5, 0.6)
    th = Thresholds(0.7, 0.7)
    assert verdict(0.7, th).label is Label.ACCEPT
    assert verdict(0.69, th).label is Label.REJECT


def test_thresholds_roundtrip():
    th = Thresholds(0.9, 0.8, {"dsc_good": 0.7})
    assert Thresholds.from_dict(th.to_dict()) == th
    assert Thresholds.from_dict(th.to_dict()).report == {"dsc_good": 0.7}


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 0.5))
def test_raising_accept_never_creates_accepts(score, t_reject, bump):
    t_accept = max(t_reject, 0.0)
    low = verdict(score, Thresholds(t_accept, min(t_reject, t_accept))).label
    high = verdict(score, Thresholds(t_accept + bump, min(t_reject, t_accept))).label
    if low is not Label.ACCEPT:
        assert high is not Label.ACCEPT


def test_calibration_separated():
    val = [(0.95, 0.9), (0.93, 0.8), (0.6, 0.3), (0.7, 0.5)]
    th = calibrate_thresholds(val, margin=1e-3)
    assert th.t_accept == pytest.approx(0.701)
    assert th.t_reject == pytest.approx(0.701)  # floored at t_accept
    assert th.report["validation_false_negatives"] == 0
    assert th.report["validation_false_positive_rate"] == 0.0
    assert th.report["validation_uncertain_fraction"] == 0.0


def test_calibration_degenerate():
    val = [(0.99, 0.2), (0.9, 0.9), (0.8, 0.95)]
    th = calibrate_thresholds(val)
    assert th.t_accept > max(s for s, _ in val)
    assert th.report["validation_good_not_accepted_rate"] == 1.0
    assert th.report["validation_false_negatives"] == 0


def test_calibration_overlap_gives_uncertain_band():
    val = [(0.9, 0.8), (0.8, 0.9), (0.85, 0.5), (0.5, 0.1)]
    th = calibrate_thresholds(val, margin=0.01)
    assert th.t_accept == pytest.approx(0.86) and th.t_reject == pytest.approx(0.79)
    rates = error_rates(*zip(*val), th)
    assert rates["false_negatives"] == 0
    assert rates["uncertain_fraction"] == 0.5


def test_calibration_needs_positive_margin():
    with pytest.raises(ParamError):
        calibrate_thresholds([(0.5, 0.1), (0.9, 0.9)], margin=0.0)


def test_calibration_without_bad_samples():
    with pytest.raises(CalibrationError):
        calibrate_thresholds([(0.9, 0.9), (0.8, 0.75)])


@given(pairs.filter(lambda p: any(d < 0.7 for _, d in p)), st.randoms())
def test_calibration_zero_validation_fn_and_permutation(val, rnd):
    th = calibrate_thresholds(val)
    for s, d in val:
        if d < 0.7:
            assert verdict(s, th).label is not Label.ACCEPT
    shuffled = list(val)
    rnd.shuffle(shuffled)
    th2 = calibrate_thresholds(shuffled)
    assert (th2.t_accept, th2.t_reject) == (th.t_accept, th.t_reject)


def test_roc_auc():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    # brute-force pair count
    r = np.random.default_rng(0)
    s = r.random(30)
    pos = r.random(30) > 0.5
    wins = sum((a > b) + 0.5 * (a == b) for a in s[pos] for b in s[~pos])
    assert roc_auc(s, pos) == pytest.approx(wins / (pos.sum() * (~pos).sum()))
    with pytest.raises(ParamError):
        roc_auc([0.1, 0.2], [1, 1])


# -- pipeline ----------------------------------------------------------------------------

def scene(size=32):
    r = np.random.default_rng(0)
    img = np.clip(0.3 + 0.4 * (np.arange(size)[:, None] > 12) + 0.03 * r.normal(size=(size, size)), 0, 1)
    seg = np.zeros((size, size), bool)
    seg[13:28, 3:29] = True
    return img, seg


@pytest.mark.parametrize("channel", ["strip", "segmentation"])
def test_model_inputs(channel):
    img, seg = scene()
    cfg = VerifyConfig(patch=16, mask_channel=channel)
    x, grid, strip = model_inputs(img, seg, cfg)
    assert x.shape == (4, 2, 16, 16) and len(grid) == 4
    np.testing.assert_array_equal(strip, boundary_strip(seg, 3))
    masked = np.block([[x[0, 0], x[1, 0]], [x[2, 0], x[3, 0]]])
    assert not masked[strip].any()
    np.testing.assert_array_equal(masked[~strip], img[~strip])
    second = np.block([[x[0, 1], x[1, 1]], [x[2, 1], x[3, 1]]])
    np.testing.assert_array_equal(second, (strip if channel == "strip" else seg).astype(float))


def test_mask_channel_validated():
    with pytest.raises(ParamError):
        VerifyConfig(mask_channel="other")


def test_training_pairs_shapes():
    img, seg = scene()
    x, y = training_pairs([(img, seg), (img, seg)])
    assert x.shape == (8, 2, 16, 16) and y.shape == (8, 1, 16, 16)


def test_reconstruct_and_score():
    img, seg = scene()
    model = RecModel(channels=(4, 8, 8), seed=0)
    rec = reconstruct(img, seg, model)
    assert rec.shape == img.shape and rec.min() >= 0 and rec.max() <= 1
    s, l2 = verification_score(img, rec)
    assert s == ssim_score(img, rec)
    v = verify_sample(img, seg, model, Thresholds(0.5, 0.4))
    assert v.ssim == s and v.l2 == l2


def test_verification_score_cases():
    img, _ = scene()
    assert verification_score(img, img) == (1.0, 0.0)
    r = np.random.default_rng(1).random((32, 32))
    assert verification_score(r, 1 - r)[0] < 0
    with pytest.raises(ShapeError):
        verification_score(img, img[:16])


def test_pipeline_errors():
    img, seg = scene()
    with pytest.raises(ModelError):
        reconstruct(img, seg, None)
    with pytest.raises(TilingError):
        reconstruct(img[:30, :30], seg[:30, :30], RecModel(channels=(4, 8, 8)))
