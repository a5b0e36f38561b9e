import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marsest.errors import DataValidationError, NumericalError
from marsest.mels import (
    MeRegressionProblem,
    interaction_sigma,
    isserlis_avar,
    log_diff_propagate,
    mels_fit,
)


def me_draw(rng, n, sigma2=1.0, beta=1.0):
    xs = rng.normal(size=n)
    x = xs + rng.normal(scale=math.sqrt(sigma2), size=n)
    y = beta * xs + rng.normal(size=n)
    return x, y


def test_zero_sigma_is_ols(rng):
    x = rng.normal(size=(200, 3))
    y = x @ [1.0, -2.0, 0.5] + 3.0 + rng.normal(size=200)
    fit = mels_fit(MeRegressionProblem(y, x, np.zeros(3)))
    design = np.column_stack([np.ones(200), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    assert np.allclose(fit.beta, coef[1:], rtol=0, atol=1e-12)
    assert fit.intercept == pytest.approx(coef[0], abs=1e-12)
    # HC0 sandwich on the demeaned design
    xc, e = x - x.mean(0), y - design @ coef
    bread = np.linalg.inv(xc.T @ xc)
    hc0 = bread @ (xc.T * e**2) @ xc @ bread
    assert np.allclose(fit.cov, hc0, rtol=1e-10, atol=0)


def test_moment_zero_at_fit(rng):
    x, y = me_draw(rng, 500)
    sig = rng.uniform(0.5, 1.5, 500)[:, None]
    fit = mels_fit(MeRegressionProblem(y, x, sig))
    xc, yc = x - x.mean(), y - y.mean()
    moment = np.mean(xc * (yc - xc * fit.beta[0]) + sig[:, 0] * fit.beta[0])
    assert abs(moment) < 1e-8
    assert fit.diagnostics["moment_max_abs"] < 1e-8


def test_homogeneous_equals_broadcast(rng):
    x, y = me_draw(rng, 300)
    a = mels_fit(MeRegressionProblem(y, x, np.array([1.0])))
    b = mels_fit(MeRegressionProblem(y, x, np.ones((300, 1))))
    assert np.array_equal(a.beta, b.beta) and np.array_equal(a.avar, b.avar)


def test_corrects_attenuation(rng):
    x, y = me_draw(rng, 20000)
    naive = mels_fit(MeRegressionProblem(y, x, [0.0]))
    fit = mels_fit(MeRegressionProblem(y, x, [1.0]))
    assert naive.beta[0] == pytest.approx(0.5, abs=0.03)
    assert fit.beta[0] == pytest.approx(1.0, abs=4 * fit.se[0])


def test_error_free_regressor(rng):
    n = 20000
    xs = rng.normal(size=n)
    w = 0.5 * xs + rng.normal(size=n)
    y = xs + 2.0 * w + rng.normal(size=n)
    x = np.column_stack([xs + rng.normal(size=n), w])
    fit = mels_fit(MeRegressionProblem(y, x, [1.0, 0.0]))
    assert fit.beta == pytest.approx([1.0, 2.0], abs=4 * fit.se.max())


def test_isserlis_population_value():
    # Var(X*)=1, Sigma=1, E[eps^2]=1, beta=1: A = 1, Pi = 1 + 2 + 1
    assert isserlis_avar([[1.0]], [[1.0]], 1.0, [1.0], [1.0])[0, 0] == 5.0
    assert isserlis_avar([[2.0]], [[2.0]], 1.0, [0.0], [1.0])[0, 0] == 0.5


def test_sandwich_close_to_isserlis(rng):
    x, y = me_draw(rng, 5000)
    fit = mels_fit(MeRegressionProblem(y, x, [1.0]))
    assert fit.avar[0, 0] == pytest.approx(5.0, rel=0.15)


def test_indefinite_correction_raises(rng):
    x, y = me_draw(rng, 100)
    with pytest.raises(NumericalError) as e:
        mels_fit(MeRegressionProblem(y, x, [10.0]))
    assert "insufficient labels" in str(e.value)
    assert e.value.details["min_eigenvalue"] < 0


def test_n_le_k():
    with pytest.raises(DataValidationError):
        mels_fit(MeRegressionProblem([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]))


def test_negative_sigma_rejected():
    with pytest.raises(DataValidationError):
        MeRegressionProblem([1.0, 2.0, 3.0], [1.0, 2.0, 4.0], [-1.0])


def test_clustered_singletons_match_score_form(rng):
    x, y = me_draw(rng, 400)
    fit_c = mels_fit(MeRegressionProblem(y, x, [0.5], clusters=np.arange(400)))
    assert fit_c.diagnostics["variance_form"] == "clustered-score"
    xc, yc = x - x.mean(), y - y.mean()
    b = fit_c.beta[0]
    g = xc * (yc - xc * b) + 0.5 * b
    omega = np.mean(xc * xc) - 0.5
    assert fit_c.avar[0, 0] == pytest.approx(np.mean(g * g) / omega**2, rel=1e-10)


def test_clustered_wider_with_common_shocks(rng):
    n, g = 2000, 50
    c = np.repeat(np.arange(g), n // g)
    xs = rng.normal(size=n) + rng.normal(size=g)[c]
    x = xs + rng.normal(size=n)
    y = xs + rng.normal(size=n) + rng.normal(size=g)[c]
    a = mels_fit(MeRegressionProblem(y, x, [1.0]))
    b = mels_fit(MeRegressionProblem(y, x, [1.0], clusters=c))
    assert b.se[0] > a.se[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_variance_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(80, 2))
    y = x @ [1.0, -1.0] + rng.normal(size=80)
    fit = mels_fit(MeRegressionProblem(y, x + rng.normal(scale=0.3, size=(80, 2)), [0.09, 0.09]))
    assert np.array_equal(fit.avar, fit.avar.T)
    eig = np.linalg.eigvalsh(fit.avar)
    assert eig[0] >= -1e-8 * abs(eig[-1])


def test_report_json(tmp_path, rng):
    x, y = me_draw(rng, 200)
    fit = mels_fit(MeRegressionProblem(y, x, [1.0], names=("epu",)))
    path = tmp_path / "fit.json"
    fit.save(path)
    doc = json.loads(path.read_text())
    assert set(doc["coefficients"]) == {"epu"}
    assert doc["coefficients"]["epu"]["ci_low"] < doc["coefficients"]["epu"]["beta"]
    assert "condition_number" in doc["diagnostics"]


# ---------------------------------------------------------------- interaction and log differences


def test_interaction_sigma_examples():
    period = np.array([1, 1, 2, 2])
    out = interaction_sigma(np.ones(4), {0: 0.5, 1: 0.5, 2: 0.5}, period)
    assert out.tolist() == [1.0] * 4
    assert interaction_sigma(np.ones(4), {0: 0.0, 1: 0.0, 2: 0.0}, period).tolist() == [0.0] * 4
    assert interaction_sigma(np.zeros(4), {0: 0.5, 1: 0.5, 2: 0.5}, period).tolist() == [0.0] * 4


def test_interaction_sigma_within_period_mean():
    out = interaction_sigma([1.0, 3.0, 2.0], {1: 0.1, 2: 0.2, 3: 0.3}, [2, 2, 3])
    assert out[:2] == pytest.approx([5.0 * 0.3] * 2)
    assert out[2] == pytest.approx(4.0 * 0.5)


def test_interaction_sigma_missing_predecessor():
    with pytest.raises(DataValidationError) as e:
        interaction_sigma([1.0], {5: 0.1}, [5])
    assert e.value.rule == "missing-predecessor"


def test_interaction_sigma_text_periods():
    out = interaction_sigma([2.0, 2.0], {"2020q1": 0.1, "2020q2": 0.3}, ["2020q2", "2020q2"])
    assert out.tolist() == pytest.approx([1.6, 1.6])


def test_log_diff_examples():
    assert log_diff_propagate([(3.0, 0.0)] * 3) == [(0.0, 0.0), (0.0, 0.0)]
    ((d, v),) = log_diff_propagate([(1.0, 0.01), (math.e, 0.01)])
    assert d == pytest.approx(1.0, abs=1e-15)
    assert v == pytest.approx(0.01 + 0.01 * math.exp(-2), rel=1e-14)
    with pytest.raises(NumericalError):
        log_diff_propagate([(1.0, 0.1), (0.0, 0.1)])
