import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from uvb import evaluate
from uvb.evaluate import ScoreTable


def gaussian_kl(m1, s1, m2, s2):
    return np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2 * s2**2) - 0.5


@pytest.mark.parametrize("m2,s2", [(0.0, 1.0), (1.0, 1.0), (0.5, 2.0)])
def test_knn_kl_matches_gaussian_closed_form(m2, s2):
    rng = np.random.default_rng(0)
    p = rng.normal(0.0, 1.0, 5000)
    q = rng.normal(m2, s2, 5000)
    assert abs(evaluate.knn_kl(p, q) - gaussian_kl(0.0, 1.0, m2, s2)) < 0.08


def test_knn_kl_multivariate():
    rng = np.random.default_rng(1)
    p = rng.standard_normal((4000, 3))
    q = rng.standard_normal((4000, 3)) + np.array([1.0, 0.0, 0.0])
    assert abs(evaluate.knn_kl(p, q) - 0.5) < 0.15


def test_knn_kl_handles_duplicates():
    p = np.repeat(np.random.default_rng(2).standard_normal(50), 3)
    q = np.random.default_rng(3).standard_normal(150)
    assert np.isfinite(evaluate.knn_kl(p, q))


@given(seed=st.integers(0, 1000))
def test_knn_kl_clipped_non_negative(seed):
    r = np.random.default_rng(seed)
    assert evaluate.knn_kl(r.standard_normal(100), r.standard_normal(100)) >= 0.0


def test_knn_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        evaluate.knn_kl(np.zeros((5, 2)), np.zeros((5, 3)))


def test_cumulative_scores_and_warning():
    assert_allclose(evaluate.cumulative_log_score([-1.0, -2.0, -0.5]), [-1.0, -3.0, -3.5])
    with pytest.warns(RuntimeWarning):
        evaluate.cumulative_log_score([-1.0, -np.inf])


def test_rcmr():
    assert_allclose(evaluate.rcmr([[1.0, 1.0], [3.0, 1.0]], 2.0), [1.0, 1.5])
    with pytest.raises(ValueError):
        evaluate.rcmr([1.0], 0.0)


def test_gradient_variance_trace_truncates():
    out = evaluate.gradient_variance_trace([[1.0, 2.0, 3.0], [3.0, 4.0]])
    assert_allclose(out, [2.0, 3.0])


def test_score_table_round_trip_and_order():
    t = ScoreTable()
    t.add(1, "uvb", 1, 20, "cls", -3.25)
    t.add(0, "uvb", 1, 10, "cls", 0.1 + 0.2)
    t.add(0, "uvb", 1, 20, "cls", -1.0)
    text = t.to_csv()
    back = ScoreTable.from_csv(text)
    assert back.to_csv() == text
    assert text.splitlines()[1].startswith("0,uvb,1,10,cls,0.30000000000000004")


def test_score_table_check_boundaries():
    t = ScoreTable()
    t.add(0, "svb", 1, 20, "cls", 0.0)
    t.add(0, "svb", 1, 10, "cls", 0.0)
    with pytest.raises(ValueError):
        t.check()


def test_summary_markdown():
    t = ScoreTable()
    t.add(0, "svb", 1, 10, "accuracy", 0.8)
    t.add(1, "svb", 1, 10, "accuracy", 0.9)
    assert "| accuracy | svb | 1 | 10 | 0.8500 | 2 |" in evaluate.summary_markdown(t)
