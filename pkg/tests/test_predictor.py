import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vecfl.predictor import (CalibrationPoint, FitError, PowerLawPredictor, fit, marginal_gain, predict,
                             read_calibration_csv, rmse, stage_gain)

P = PowerLawPredictor(100.0, 50.0, 0.5)


def test_predict_examples():
    assert predict(P, 25) == 90.0
    assert predict(P, 1) == 50.0
    assert abs(predict(PowerLawPredictor(80, 40, 1.0), 10**9) - 80) < 1e-3
    with pytest.raises(ValueError):
        predict(P, 0)


def test_marginal_gain_example():
    assert marginal_gain(P, 24) == pytest.approx(90 - (100 - 50 / math.sqrt(24)), abs=1e-12)
    assert marginal_gain(P, 24) == pytest.approx(0.2062, abs=1e-4)


def test_marginal_gain_from_floor():
    p = PowerLawPredictor(100.0, 50.0, 0.5, floor=10.0)
    assert marginal_gain(p, 0) == 40.0


def test_stage_gain_zero_rounds():
    assert stage_gain(P, 0) == 0.0
    assert stage_gain(P, 3) == pytest.approx(50 * (1 - 4**-0.5))


def test_invalid_predictor():
    with pytest.raises(ValueError):
        PowerLawPredictor(1, 0, 1)
    with pytest.raises(ValueError):
        CalibrationPoint(0, 1.0)


def points(a, b, c, ns=(1, 2, 4, 8, 16, 32), noise=0.0, rng=None):
    return [CalibrationPoint(n, a - b * n**-c + (noise * rng.standard_normal() if noise else 0.0)) for n in ns]


def test_fit_noiseless_recovery():
    p, err = fit(points(80, 40, 1.0))
    assert abs(p.a - 80) < 1e-3 and abs(p.b - 40) < 1e-3 and abs(p.c - 1) < 1e-3
    assert err < 1e-6


def test_fit_flat_data_fails():
    with pytest.raises(FitError):
        fit([CalibrationPoint(n, 70.0) for n in (1, 2, 4, 8)])
    with pytest.raises(FitError):
        fit([CalibrationPoint(1, 70.0), CalibrationPoint(2, 75.0)])


@given(st.floats(50, 100), st.floats(5, 60), st.floats(0.2, 2.5))
def test_fit_inverts_generation(a, b, c):
    p, err = fit(points(a, b, c, ns=(1, 2, 4, 8, 16, 32, 64)))
    assert abs(p.a - a) < 1e-3 and abs(p.b - b) < 1e-3 and abs(p.c - c) < 1e-3


@given(st.floats(50, 100), st.floats(5, 60), st.floats(0.2, 2.5), st.integers(0, 2**32))
def test_fit_rmse_is_recomputable(a, b, c, seed):
    pts = points(a, b, c, noise=0.5, rng=np.random.default_rng(seed))
    p, err = fit(pts)
    assert err == pytest.approx(rmse(p, pts), rel=1e-9, abs=1e-12)


@given(st.floats(-100, 100), st.floats(0.01, 100), st.floats(0.01, 3), st.integers(1, 10**6))
def test_predict_monotone_concave(a, b, c, n):
    p = PowerLawPredictor(a, b, c)
    f0, f1, f2 = predict(p, n), predict(p, n + 1), predict(p, n + 2)
    assert f1 >= f0
    assert (f2 - f1) - (f1 - f0) <= 1e-12 * max(1.0, abs(b))


@given(st.floats(0.1, 100), st.floats(0.05, 3), st.integers(2, 200))
def test_marginal_gains_telescope(b, c, big_n):
    p = PowerLawPredictor(90, b, c)
    total = sum(marginal_gain(p, n) for n in range(1, big_n))
    assert total == pytest.approx(predict(p, big_n) - predict(p, 1), rel=1e-9, abs=1e-9)
    assert marginal_gain(p, big_n) < marginal_gain(p, big_n - 1)


def test_read_calibration_csv(tmp_path):
    f = tmp_path / "c.csv"
    f.write_text("# demo\nresource,accuracy\n1,40.0\n2,60.0\n4,70.0\n")
    assert read_calibration_csv(f) == [CalibrationPoint(1, 40.0), CalibrationPoint(2, 60.0),
                                       CalibrationPoint(4, 70.0)]
