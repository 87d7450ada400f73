import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlcopula.pooling import (
    PoolingError,
    mean_estimate,
    ols_estimate,
    pool,
    pool_from_csv,
    write_pooled_csv,
)


def test_pool_example_three():
    p = pool([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
    assert (p.q_bar, p.B, p.W_bar, p.M) == (2.0, 1.0, 0.5, 3)
    assert p.T == pytest.approx(0.5 + 4 / 3, abs=1e-15)


def test_pool_example_two():
    p = pool([0.0, 2.0], [1.0, 1.0])
    assert (p.q_bar, p.B, p.T) == (1.0, 2.0, 4.0)


def test_pool_equal_estimates():
    p = pool([1.5] * 4, [0.2, 0.4, 0.6, 0.8])
    assert p.B == 0.0 and p.T == p.W_bar
    assert math.isinf(p.df)


def test_pool_errors():
    with pytest.raises(PoolingError):
        pool([1.0], [1.0])
    with pytest.raises(PoolingError):
        pool([1.0, 2.0], [1.0, -0.1])
    with pytest.raises(PoolingError):
        pool([1.0, 2.0], [1.0])


def test_df_formula():
    p = pool([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
    r = (1 + 1 / 3) * 1.0
    assert p.df == pytest.approx(2 * (1 + 0.5 / r) ** 2)


finite = st.floats(-1e3, 1e3, allow_nan=False)
positive = st.floats(0, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, positive), min_size=2, max_size=20), st.randoms(use_true_random=False))
def test_pool_permutation_invariant(pairs, rnd):
    q, w = map(list, zip(*pairs))
    idx = list(range(len(q)))
    rnd.shuffle(idx)
    a = pool(q, w)
    b = pool([q[i] for i in idx], [w[i] for i in idx])
    assert a.q_bar == pytest.approx(b.q_bar, rel=1e-12, abs=1e-9)
    assert a.B == pytest.approx(b.B, rel=1e-9, abs=1e-9)
    assert a.T == pytest.approx(b.T, rel=1e-9, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, positive), min_size=2, max_size=20), st.floats(-10, 10), finite)
def test_pool_affine_equivariance(pairs, a, c):
    q, w = map(np.array, zip(*pairs))
    base = pool(q, w)
    moved = pool(a * q + c, a * a * w)
    assert moved.q_bar == pytest.approx(a * base.q_bar + c, rel=1e-9, abs=1e-6)
    assert moved.B == pytest.approx(a * a * base.B, rel=1e-9, abs=1e-6)
    assert moved.T == pytest.approx(a * a * base.T, rel=1e-9, abs=1e-6)


def _write(path, rows):
    path.write_text("estimand,imputation_index,estimate,variance\n" + "".join(f"{r}\n" for r in rows))


def test_pool_from_csv_two_estimands(tmp_path):
    p = tmp_path / "est.csv"
    _write(p, ["a,1,1.0,0.5", "b,1,10,1", "a,2,2.0,0.5", "b,2,12,1", "a,3,3.0,0.5", "b,3,14,1"])
    out = pool_from_csv(p)
    assert list(out) == ["a", "b"]
    assert out["a"] == pool([1.0, 2.0, 3.0], [0.5] * 3)
    write_pooled_csv(out, tmp_path / "pooled.csv")
    lines = (tmp_path / "pooled.csv").read_text().splitlines()
    assert lines[0] == "estimand,M,q_bar,B,W_bar,T,df"
    assert len(lines) == 3


def test_pool_from_csv_missing_index(tmp_path):
    p = tmp_path / "est.csv"
    _write(p, ["a,1,1.0,0.5", "a,3,3.0,0.5"])
    with pytest.raises(PoolingError, match=r"'a'.*index 2"):
        pool_from_csv(p)


def test_pool_from_csv_duplicate_index(tmp_path):
    p = tmp_path / "est.csv"
    _write(p, ["a,1,1.0,0.5", "a,1,3.0,0.5"])
    with pytest.raises(PoolingError, match="duplicate"):
        pool_from_csv(p)


def test_pool_from_csv_mixed_m(tmp_path):
    p = tmp_path / "est.csv"
    _write(p, ["a,1,1,1", "a,2,2,1", "b,1,1,1", "b,2,1,1", "b,3,1,1"])
    with pytest.raises(PoolingError, match="different numbers"):
        pool_from_csv(p)


def test_mean_and_ols_estimates():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    m, v = mean_estimate(x)
    assert m == 2.5 and v == pytest.approx(np.var(x, ddof=1) / 4)
    X = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    y = 1.0 + 2.0 * X + np.array([0.1, -0.1, 0.0, 0.1, -0.1])
    coef, var = ols_estimate(y, X)
    np.testing.assert_allclose(coef, np.polyfit(X, y, 1)[::-1])
    assert np.all(var > 0)
