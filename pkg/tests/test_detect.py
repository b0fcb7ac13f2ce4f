import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from amsl.detect import (ABNORMAL, NORMAL, CalibrationError, DetectionReport, Threshold, calibrate,
                         evaluate, predict)

errs = st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=200)


def test_calibrate_one_to_hundred():
    # rank 1 + 0.99 * 99 = 99.01 sits between 99 and 100
    assert calibrate(np.arange(1, 101), 99).mu == 99.01
    assert calibrate(np.arange(1, 101)).percentile == 99.0


@given(st.floats(-1e6, 1e6), st.floats(0.5, 100))
def test_calibrate_single_element(e, p):
    assert calibrate([e], p).mu == e


@given(errs)
def test_calibrate_p100_is_max(values):
    assert calibrate(values, 100).mu == max(values)


def test_calibrate_errors():
    with pytest.raises(CalibrationError):
        calibrate([])
    with pytest.raises(CalibrationError):
        calibrate([1.0, np.nan])
    with pytest.raises(CalibrationError):
        calibrate([1.0], 0)


def test_predict_boundary():
    th = Threshold(2.5)
    np.testing.assert_array_equal(predict([2.5, np.nextafter(2.5, 3), 0.0], th), [NORMAL, ABNORMAL, NORMAL])
    assert predict([0.0], 0.0)[0] == NORMAL


@given(errs, st.floats(0, 1e4))
def test_calibrate_monotone_under_new_max(values, extra):
    new = max(values) + extra
    for p in (90, 95, 99):
        assert calibrate(values + [new], p).mu >= calibrate(values, p).mu


@given(errs, st.floats(0, 1e4))
def test_predict_monotone(values, mu):
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(predict(np.asarray(values)[order], mu)) >= 0)


@given(errs)
def test_higher_percentile_flags_fewer(values):
    counts = [predict(values, calibrate(values, p)).sum() for p in (50, 90, 95, 99, 100)]
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] == 0


def test_evaluate_perfect_and_symmetric_confusion():
    truth = np.array([0, 1, 1, 0])
    assert all(v == 1.0 for v in evaluate(truth, truth).values())
    # 9 hits per class, one miss each way
    truth = np.array([1] * 10 + [0] * 10)
    pred = np.array([1] * 9 + [0] + [0] * 9 + [1])
    m = evaluate(pred, truth)
    for k in ("mPre", "mRec", "mF1", "Acc"):
        assert m[k] == pytest.approx(0.9, abs=1e-12)


@given(st.lists(st.sampled_from([0, 1]), min_size=2).filter(lambda x: 0 in x and 1 in x))
def test_evaluate_identity_is_all_ones(labels):
    assert set(evaluate(labels, labels).values()) == {1.0}


def test_evaluate_undefined_ratio_warns():
    with pytest.warns(RuntimeWarning, match="undefined"):
        m = evaluate([0, 0], [0, 0])
    assert m["F1_abnormal"] == 0.0 and m["F1_normal"] == 1.0


def test_evaluate_length_mismatch():
    with pytest.raises(ValueError):
        evaluate([0, 1], [0])


def test_metrics_json_round_trip(tmp_path):
    reference = {"mPre": 0.9788, "mRec": 0.9713, "mF1": 0.9750, "Acc": 0.9770}
    rep = DetectionReport(np.array([0.5]), np.array([0]), Threshold(1.0), metrics=reference)
    rep.write_json(tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text())["metrics"] == reference


def test_report_csv(tmp_path):
    rep = DetectionReport(np.array([0.25, 3.0]), np.array([0, 1]), Threshold(1.0), np.array([0, 0]), ["a", "b"])
    rep.write_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines == ["window_id,error,pred,truth", "a,0.25,normal,normal", "b,3.0,abnormal,normal"]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert rep.summary()["n_abnormal_pred"] == 1
