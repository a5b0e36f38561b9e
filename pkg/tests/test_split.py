import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marsest.errors import ConfigError, DataValidationError
from marsest.split import (
    CrossFitPlan,
    SplitPlan,
    load_plan,
    make_crossfit,
    make_split,
    save_plan,
)

from conftest import make_dataset


def _ds(annotated):
    annotated = np.asarray(annotated)
    label = np.where(annotated == 1, 1.0, np.nan)
    return make_dataset(label, annotated, np.full(annotated.size, 0.5))


def test_exact_halves():
    ds = _ds([1, 1, 1, 1, 0, 0, 0, 0])
    plan = make_split(ds, 0.5, seed=3)
    for part in (plan.estimation, plan.tuning):
        assert part.size == 4
        assert ds.annotated[part].sum() == 2


def test_deterministic():
    ds = _ds([1, 0] * 10)
    a, b = make_split(ds, 0.3, 11), make_split(ds, 0.3, 11)
    np.testing.assert_array_equal(a.estimation, b.estimation)
    np.testing.assert_array_equal(a.tuning, b.tuning)
    assert not np.array_equal(make_split(ds, 0.3, 12).estimation, a.estimation)


def test_round_half_up_by_enumeration():
    ds = _ds([1] * 5)
    for seed in range(20):
        plan = make_split(ds, 0.5, seed)
        assert (plan.estimation.size, plan.tuning.size) == (3, 2)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_bad_fraction(fraction):
    with pytest.raises(ConfigError):
        make_split(_ds([1, 1, 0]), fraction, 0)


def test_too_few_annotated():
    with pytest.raises(DataValidationError):
        make_split(_ds([1, 0, 0]), 0.5, 0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.booleans(), min_size=2, max_size=60).filter(lambda a: sum(a) >= 2),
    st.floats(0.05, 0.95),
    st.integers(0, 2**63 - 1),
)
def test_split_invariants(flags, fraction, seed):
    ds = _ds(np.array(flags, dtype=int))
    plan = make_split(ds, fraction, seed)
    est, tun = plan.estimation, plan.tuning
    assert np.intersect1d(est, tun).size == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([est, tun])), np.arange(ds.n))
    assert ds.annotated[est].any() and ds.annotated[tun].any()
    overall = ds.annotated.mean()
    assert abs(ds.annotated[est].mean() - overall) <= 1 / est.size + 1e-12


def test_crossfit_example():
    ds = _ds([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    plan = make_crossfit(ds, 2, seed=5)
    assert [f.size for f in plan.folds] == [5, 5]
    assert [int(ds.annotated[f].sum()) for f in plan.folds] == [2, 2]


def test_crossfit_boundary():
    ds = _ds([1, 1, 0, 0, 0])
    plan = make_crossfit(ds, 2, seed=1)
    assert [int(ds.annotated[f].sum()) for f in plan.folds] == [1, 1]


def test_crossfit_errors():
    with pytest.raises(ConfigError):
        make_crossfit(_ds([1, 1, 1]), 1, 0)
    with pytest.raises(DataValidationError):
        make_crossfit(_ds([1, 1, 0, 0]), 3, 0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.booleans(), min_size=4, max_size=50).filter(lambda a: sum(a) >= 4),
    st.integers(2, 4),
    st.integers(0, 2**32),
    st.randoms(use_true_random=False),
)
def test_crossfit_permutation_property(flags, k, seed, rnd):
    flags = np.array(flags, dtype=int)
    if flags.sum() < k:
        return
    perm = np.array(rnd.sample(range(flags.size), flags.size))
    a = make_crossfit(_ds(flags), k, seed)
    b = make_crossfit(_ds(flags[perm]), k, seed)
    assert sorted(f.size for f in a.folds) == sorted(f.size for f in b.folds)
    sizes = [f.size for f in a.folds]
    assert max(sizes) - min(sizes) <= 1
    np.testing.assert_array_equal(np.sort(np.concatenate(a.folds)), np.arange(flags.size))
    ds = _ds(flags)
    for i in range(k):
        assert ds.annotated[a.complement(i)].any()


def test_plans_serialize(tmp_path):
    ds = _ds([1, 0] * 6)
    split = make_split(ds, 0.5, 9)
    save_plan(split, tmp_path / "s.json")
    back = load_plan(tmp_path / "s.json")
    assert isinstance(back, SplitPlan)
    np.testing.assert_array_equal(back.estimation, split.estimation)
    cf = make_crossfit(ds, 3, 9)
    save_plan(cf, tmp_path / "c.json")
    back = load_plan(tmp_path / "c.json")
    assert isinstance(back, CrossFitPlan) and back.seed == 9
    for x, y in zip(back.folds, cf.folds):
        np.testing.assert_array_equal(x, y)
