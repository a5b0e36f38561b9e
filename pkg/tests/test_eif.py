import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marsest import eif
from marsest.errors import ConfigError, DataValidationError, EstimatorError, NumericalError
from marsest.eif import (
    Estimate,
    aipw_mean,
    cluster_variance,
    decompose_mean,
    did_attgt,
    difference_combine,
    eif_variance,
    estimate_from_phi,
    iv_effect,
    mean_functional,
    ols_coefficient,
    pseudo_outcome,
    ratio_combine,
    rdd_local,
    residualize,
)

from conftest import make_dataset


# ---------------------------------------------------------------- pseudo-outcomes and the mean


def test_pseudo_outcome_rows():
    ds = make_dataset([2, np.nan, 5], [1, 0, 1], [0.5, 0.5, 0.25])
    po = pseudo_outcome(ds, [1.0, 3.0, 5.0])
    assert po.tolist() == [3.0, 3.0, 5.0]


def test_pseudo_outcome_length_mismatch(four_rows):
    with pytest.raises(DataValidationError):
        pseudo_outcome(four_rows, [1.0, 2.0, 3.0])


def test_aipw_mean_worked_example(four_rows):
    est = aipw_mean(four_rows, [1, 3, 5, 1])
    assert est.theta == 2.5
    assert est.variance == 0.75
    assert est.se == pytest.approx(math.sqrt(0.75 / 4), abs=1e-15)
    assert est.n == 4


def test_aipw_full_annotation_is_sample_mean(rng):
    m = rng.normal(size=50)
    ds = make_dataset(m, np.ones(50), np.ones(50))
    assert aipw_mean(ds, rng.normal(size=50)).theta == pytest.approx(m.mean(), abs=1e-14)


def test_aipw_zero_imputer_is_labeled_mean(rng):
    n = 40
    a = (rng.random(n) < 0.3).astype(int)
    a[:2] = 1
    m = np.where(a == 1, rng.normal(size=n), np.nan)
    ds = make_dataset(m, a, np.full(n, a.mean()))
    assert aipw_mean(ds, np.zeros(n)).theta == pytest.approx(np.nanmean(m), rel=1e-13)


def test_empty_estimation_set(four_rows):
    with pytest.raises(EstimatorError):
        aipw_mean(four_rows, [1, 3, 5, 1], indices=[])


def test_decomposition_worked_example(four_rows):
    assert decompose_mean(four_rows, [1, 3, 5, 1]) == (2.5, 2.5, 2.5)


def test_decomposition_constant_imputer(four_rows):
    aipw, ppi, fra = decompose_mean(four_rows, [1.5] * 4)
    # PPI = c + (labeled mean - c)
    assert ppi == pytest.approx(1.5 + (3.0 - 1.5))
    assert aipw == pytest.approx(ppi, abs=1e-15) and fra == pytest.approx(ppi, abs=1e-15)


def test_decomposition_full_annotation():
    ds = make_dataset([1, 2, 6], [1, 1, 1], [1, 1, 1])
    assert decompose_mean(ds, [0, 0, 0]) == (3.0, 3.0, 3.0)


def test_decomposition_rejects_wrong_score():
    ds = make_dataset([1, np.nan, np.nan], [1, 0, 0], [0.5, 0.5, 0.5])
    with pytest.raises(DataValidationError):
        decompose_mean(ds, [0, 0, 0])
    ds = make_dataset([1, np.nan], [1, 0], [0.5, 0.6])
    with pytest.raises(DataValidationError):
        decompose_mean(ds, [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 200))
def test_decomposition_identity_random(seed, n):
    rng = np.random.default_rng(seed)
    a = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(int)
    a[0] = 1
    m = np.where(a == 1, rng.normal(3, 2, n), np.nan)
    ds = make_dataset(m, a, np.full(n, a.sum() / n))
    aipw, ppi, fra = decompose_mean(ds, rng.normal(3, 2, n))
    scale = max(1.0, abs(aipw))
    assert abs(aipw - ppi) <= 1e-12 * scale
    assert abs(aipw - fra) <= 1e-12 * scale


def test_mean_functional_reductions(four_rows):
    pred = [1, 3, 5, 1]
    one = mean_functional(four_rows, pred, 1.0)
    base = aipw_mean(four_rows, pred)
    assert one.theta == base.theta and np.array_equal(one.phi, base.phi)
    assert mean_functional(four_rows, pred, [2, 2, 2, 2]).theta == 5.0
    zero = mean_functional(four_rows, pred, np.zeros(4))
    assert zero.theta == 0.0 and zero.variance == 0.0


def test_mean_functional_rejects_non_finite_weights(four_rows):
    with pytest.raises(DataValidationError):
        mean_functional(four_rows, [1, 3, 5, 1], [1, np.inf, 1, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_phi_is_centered(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 500))
    a = (rng.random(n) < 0.4).astype(int)
    a[0] = 1
    m = np.where(a == 1, rng.normal(10, 5, n), np.nan)
    ds = make_dataset(m, a, rng.uniform(0.1, 1, n))
    est = mean_functional(ds, rng.normal(10, 5, n), rng.normal(1, 1, n))
    assert abs(est.phi.mean()) <= 1e-10 * (1 + abs(est.theta))
    assert est.variance == pytest.approx(np.mean(est.phi**2), rel=1e-12, abs=1e-300)


# ---------------------------------------------------------------- variance


def test_eif_variance_examples():
    var, se = eif_variance(np.array([3.0, 3.0, 3.0, 1.0]))
    assert var == 0.75 and se == pytest.approx(0.4330127018922193)
    assert eif_variance(np.full(5, 2.0)) == (0.0, 0.0)
    var, se = eif_variance(np.array([1.0, -1.0]))
    assert var == 1.0 and se == pytest.approx(0.7071067811865476)


def test_cluster_variance_singletons_bit_identical(rng):
    phi = rng.normal(size=257)
    assert cluster_variance(phi, np.arange(257)) == eif_variance(phi)
    ids = rng.permutation(257)  # still singletons, in any labeling
    assert cluster_variance(phi, ids) == eif_variance(phi)


def test_cluster_variance_cancellation():
    var, se = cluster_variance(np.array([1.0, -1.0, 1.0, -1.0]), np.array([0, 0, 1, 1]))
    assert var == 0.0 and se == 0.0


def test_cluster_variance_two_clusters():
    var, se = cluster_variance(np.array([1.0, 1.0, -1.0, -1.0]), np.array(["x", "x", "y", "y"]))
    # cluster totals (2, -2): sum of squares / n^2 = 8 / 16
    assert se**2 == pytest.approx(0.5, abs=1e-15)
    assert var == 2.0


def test_cluster_variance_length_mismatch():
    with pytest.raises(DataValidationError):
        cluster_variance(np.zeros(3), np.zeros(2))


# ---------------------------------------------------------------- combiners


def _est(theta, phi):
    return estimate_from_phi(theta, np.asarray(phi, float), "test")


def test_ratio_unit_denominator(rng):
    num = _est(3.0, rng.normal(size=20))
    out = ratio_combine(num, _est(1.0, np.zeros(20)))
    assert out.theta == num.theta
    np.testing.assert_array_equal(out.phi, num.phi)
    assert out.variance == num.variance


def test_ratio_self_is_one(rng):
    e = _est(2.0, rng.normal(size=20))
    out = ratio_combine(e, e)
    assert out.theta == 1.0
    assert np.all(out.phi == 0.0) and out.variance == 0.0


def test_ratio_matches_quadratic_form(rng):
    n = 1000
    pn = rng.normal(size=n)
    pd = rng.normal(size=n)
    pn -= pn.mean()
    pd -= pd.mean()
    out = ratio_combine(_est(3.0, pn), _est(2.0, pd))
    theta = 1.5
    v_n, v_d, cov = np.mean(pn * pn), np.mean(pd * pd), np.mean(pn * pd)
    direct = (v_n - 2 * theta * cov + theta**2 * v_d) / 4.0
    assert out.variance == pytest.approx(direct, rel=1e-12)


def test_ratio_matches_finite_difference_gradient(rng):
    a, b, h = 3.0, 2.0, 1e-5
    f = lambda x, y: x / y
    g_num = (f(a + h, b) - f(a - h, b)) / (2 * h)
    g_den = (f(a, b + h) - f(a, b - h)) / (2 * h)
    pn, pd = rng.normal(size=50), rng.normal(size=50)
    out = ratio_combine(_est(a, pn), _est(b, pd))
    np.testing.assert_allclose(out.phi, g_num * pn + g_den * pd, rtol=1e-4, atol=1e-12)
    assert g_num == pytest.approx(1 / b, rel=1e-4) and g_den == pytest.approx(-a / b**2, rel=1e-4)


def test_ratio_floor():
    with pytest.raises(EstimatorError) as exc:
        ratio_combine(_est(1.0, [0.1, -0.1]), _est(1e-12, [1.0, -1.0]))
    assert exc.value.rule == "weak-denominator"
    with pytest.raises(EstimatorError):
        ratio_combine(_est(1.0, [0.0, 0.0]), _est(0.5, [0.0, 0.0]), floor=1.0)


def test_difference_combine(rng):
    a = _est(2.0, rng.normal(size=10))
    zero = _est(0.0, np.zeros(10))
    out = difference_combine(a, zero)
    assert out.theta == a.theta and np.array_equal(out.phi, a.phi)
    same = difference_combine(a, a)
    assert same.theta == 0.0 and same.variance == 0.0
    with pytest.raises(DataValidationError):
        difference_combine(a, _est(0.0, np.zeros(3)))


def test_difference_of_disjoint_indicator_weights(rng):
    n = 300
    m = rng.normal(size=n)
    a = (rng.random(n) < 0.5).astype(int)
    a[0] = 1
    ds = make_dataset(np.where(a == 1, m, np.nan), a, np.full(n, 0.5))
    g = (rng.random(n) < 0.4).astype(float)
    pred = rng.normal(size=n)
    ea = mean_functional(ds, pred, g / g.mean())
    eb = mean_functional(ds, pred, (1 - g) / (1 - g).mean())
    out = difference_combine(ea, eb)
    d = ea.phi - eb.phi
    assert out.variance == pytest.approx(np.mean((d - d.mean()) ** 2), rel=1e-12)


def test_ci_uses_normal_quantile(four_rows):
    est = aipw_mean(four_rows, [1, 3, 5, 1])
    lo, hi = est.ci(0.05)
    assert hi - est.theta == pytest.approx(1.959963984540054 * est.se)
    d = est.to_dict()
    assert set(d) >= {"theta", "se", "variance", "ci_level", "ci_low", "ci_high", "n", "estimator", "options"}
    assert d["ci_level"] == 0.95


# ---------------------------------------------------------------- residualization and regression


def _reg_ds(m, a, pi, **cols):
    return make_dataset(m, a, pi, control={k: v for k, v in cols.items()})


def test_residualize_cases(rng):
    x = rng.normal(size=30)
    z = rng.normal(size=30)
    ds = _reg_ds(np.ones(30), np.ones(30), np.ones(30), x=x, z=z)
    np.testing.assert_allclose(residualize(ds, "x"), x - x.mean(), atol=1e-12)
    r = residualize(ds, "x", ["z"])
    assert abs(r @ z) < 1e-10 and abs(r.sum()) < 1e-10
    # already orthogonal target comes back unchanged
    np.testing.assert_allclose(residualize(make_dataset(np.ones(30), np.ones(30), np.ones(30), control={"r": r, "z": z}), "r", ["z"]), r, atol=1e-12)
    combo = 2 * z + 1
    ds2 = _reg_ds(np.ones(30), np.ones(30), np.ones(30), c=combo, z=z)
    np.testing.assert_allclose(residualize(ds2, "c", ["z"]), 0, atol=1e-12)


def test_residualize_rank_deficient(rng):
    z = rng.normal(size=10)
    ds = _reg_ds(np.ones(10), np.ones(10), np.ones(10), x=rng.normal(size=10), z=z, z2=2 * z)
    with pytest.raises(NumericalError):
        residualize(ds, "x", ["z", "z2"])


def test_ols_hand_example(four_rows):
    ds = make_dataset([2, np.nan, 4, np.nan], [1, 0, 1, 0], [0.5] * 4, control={"x": [0.0, 1.0, 2.0, 3.0]})
    est = ols_coefficient(ds, [1, 3, 5, 1], "x", controls=[])
    # pseudo-outcomes (3,3,3,1), residual (-1.5,-0.5,0.5,1.5): sum = -3, sum sq = 5
    assert est.theta == pytest.approx(-3.0 / 5.0, abs=1e-15)
    assert est.notes == (eif.KNOWN_RESIDUAL_NOTE,)


def test_ols_constant_pseudo_outcome():
    ds = make_dataset([2, 2, 2], [1, 1, 1], [1, 1, 1], control={"x": [0.0, 1.0, 5.0]})
    assert ols_coefficient(ds, [0, 0, 0], "x", controls=[]).theta == pytest.approx(0.0, abs=1e-15)


def test_ols_zero_variance_regressor():
    ds = make_dataset([1, 2, 3], [1, 1, 1], [1, 1, 1], control={"x": [1.0, 1.0, 1.0]})
    with pytest.raises(EstimatorError):
        ols_coefficient(ds, [0, 0, 0], "x", controls=[])


def test_iv_wald_example():
    ds = make_dataset(
        [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1], predictions=[1, 1, 0, 0],
        outcome=[3.0, 5.0, 0.0, 2.0], instrument=[1.0, 1.0, 0.0, 0.0],
    )
    assert iv_effect(ds, ds.column("prediction"), controls=[]).theta == pytest.approx(3.0, abs=1e-14)


def test_iv_zero_outcome():
    ds = make_dataset([1, 1, 0, 0], [1, 1, 1, 1], [1] * 4, outcome=np.zeros(4), instrument=[1.0, 1.0, 0.0, 0.0])
    assert iv_effect(ds, [1, 1, 0, 0], controls=[]).theta == 0.0


def test_iv_weak_instrument():
    ds = make_dataset([1, 0, 1, 0], [1, 1, 1, 1], [1] * 4, outcome=[1.0, 2.0, 3.0, 4.0], instrument=[1.0, 1.0, 0.0, 0.0])
    with pytest.raises(EstimatorError) as exc:
        iv_effect(ds, [1, 0, 1, 0], controls=[])
    assert exc.value.rule == "weak-denominator"


def test_did_two_by_two():
    ds = make_dataset([3, 5, 1, 1], [1] * 4, [1] * 4, cohort=[1, 1, 0, 0], never_treated=[0, 0, 1, 1])
    est = did_attgt(ds, np.zeros(4), cohort=2, period=2)
    assert est.theta == pytest.approx(3.0, abs=1e-14)
    assert est.options["cohort"] == 2


def test_did_symmetric_groups():
    ds = make_dataset([1, 4, 4, 1], [1] * 4, [1] * 4, cohort=[1, 1, 0, 0], never_treated=[0, 0, 1, 1])
    assert did_attgt(ds, (np.zeros(4), np.ones(4))).theta == pytest.approx(0.0, abs=1e-14)


def test_did_empty_group():
    ds = make_dataset([3, 5], [1, 1], [1, 1], cohort=[0, 0], never_treated=[1, 1])
    with pytest.raises(EstimatorError):
        did_attgt(ds, np.zeros(2))


def test_rdd_full_window_is_group_difference():
    ds = make_dataset([1, 2, 6, 8], [1] * 4, [1] * 4, running=[-1.0, -0.5, 0.5, 1.0], treated=[0, 0, 1, 1])
    assert rdd_local(ds, np.zeros(4), (-2, 2)).theta == pytest.approx(7.0 - 1.5, abs=1e-14)


def test_rdd_empty_window():
    ds = make_dataset([1, 2, 6, 8], [1] * 4, [1] * 4, running=[-1.0, -0.5, 0.5, 1.0], treated=[0, 0, 1, 1])
    with pytest.raises(EstimatorError):
        rdd_local(ds, np.zeros(4), (5, 6))


@pytest.mark.parametrize(
    "call, role",
    [
        (lambda ds: iv_effect(ds, np.zeros(ds.n)), "outcome"),
        (lambda ds: did_attgt(ds, np.zeros(ds.n)), "cohort"),
        (lambda ds: rdd_local(ds, np.zeros(ds.n), (0, 1)), "running"),
        (lambda ds: aipw_mean(ds, np.zeros(ds.n), cluster=True), "cluster"),
    ],
)
def test_estimators_name_missing_roles(four_rows, call, role):
    with pytest.raises(ConfigError, match=role):
        call(four_rows)


def test_clustered_estimate_uses_cluster_ids(rng):
    n = 60
    m = rng.normal(size=n)
    ds = make_dataset(m, np.ones(n), np.ones(n), cluster=np.repeat(np.arange(6), 10))
    est = aipw_mean(ds, np.zeros(n), cluster=True)
    var, se = cluster_variance(m, np.repeat(np.arange(6), 10))
    assert est.se == se


# ---------------------------------------------------------------- reduction laws


def _tsls(y, endog, inst, exog):
    x = np.column_stack([exog, endog])
    z = np.column_stack([exog, inst])
    pz = z @ np.linalg.solve(z.T @ z, z.T)
    return np.linalg.solve(x.T @ pz @ x, x.T @ pz @ y)[-1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reduction_laws_full_annotation(seed):
    rng = np.random.default_rng(seed)
    n = 200
    c1, c2 = rng.normal(size=n), rng.normal(size=n)
    z = rng.normal(size=n) + 0.5 * c2
    m = 1 + 0.8 * z + 0.3 * c2 + rng.normal(size=n)
    y = 2 + 1.5 * m - c2 + rng.normal(size=n)
    g = (rng.random(n) < 0.4).astype(int)
    never = 1 - g
    r = rng.uniform(-1, 1, n)
    d = (r >= 0).astype(int)
    ones = np.ones(n)
    ds = make_dataset(
        m, ones, ones, predictions=m,
        control={"c1": c1, "c2": c2}, outcome=y, instrument=z,
        cohort=g, never_treated=never, running=r, treated=d,
    )
    noise = rng.normal(size=n)  # with pi = 1 the imputer must not matter
    tol = 1e-10

    assert abs(aipw_mean(ds, noise).theta - m.mean()) <= tol * (1 + abs(m.mean()))

    design = np.column_stack([ones, c2, c1])
    beta = np.linalg.lstsq(design, m, rcond=None)[0][-1]
    assert abs(ols_coefficient(ds, noise, "c1", ["c2"]).theta - beta) <= tol * (1 + abs(beta))

    ref = _tsls(y, m, z, np.column_stack([ones, c2]))
    assert abs(iv_effect(ds, noise, ["c2"]).theta - ref) <= tol * (1 + abs(ref))

    ref = m[g == 1].mean() - m[never == 1].mean()
    assert abs(did_attgt(ds, noise).theta - ref) <= tol * (1 + abs(ref))

    inside = np.abs(r) <= 0.5
    ref = m[inside & (d == 1)].mean() - m[inside & (d == 0)].mean()
    assert abs(rdd_local(ds, noise, (-0.5, 0.5)).theta - ref) <= tol * (1 + abs(ref))
