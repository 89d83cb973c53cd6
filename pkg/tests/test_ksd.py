import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from spmcmc import ksd as ksd_mod
from spmcmc.kernels import PreconditionedIMQ, SteinKernel
from spmcmc.ksd import EmptyStateError, QuantisationState, ksd_of, read_points_csv, write_points_csv
from spmcmc.targets import standard_normal, two_mode_mixture

LAM = np.array([[1.5, 1.0], [1.0, 1.5]])


def mixture_points(rng, n):
    t = two_mode_mixture()
    X = rng.standard_normal((n, 2)) * 1.7
    _, S = t.log_p_and_grad_batch(X, count=False)
    return X, S


def test_empty_state_errors():
    st_ = QuantisationState(SteinKernel(PreconditionedIMQ(np.eye(2))))
    with pytest.raises(EmptyStateError):
        st_.ksd()
    st_.commit_add(np.zeros(2), np.zeros(2))
    with pytest.raises(EmptyStateError):
        st_.removal_ksd(0)
    with pytest.raises(EmptyStateError):
        st_.commit_remove(0)


def test_single_point_ksd():
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    st_ = QuantisationState(sk)
    st_.commit_add(np.zeros(2), np.zeros(2))
    assert st_.ksd() == pytest.approx(math.sqrt(2.0), rel=1e-15)


def test_ksd_matches_loop_oracle():
    rng = np.random.default_rng(0)
    X, S = mixture_points(rng, 200)
    sk = SteinKernel(PreconditionedIMQ(LAM))
    st_ = QuantisationState(sk)
    for x, s in zip(X, S):
        st_.commit_add(x, s)
    assert st_.ksd() == pytest.approx(oracles.ksd_loop(X, S, LAM), rel=1e-10)
    assert ksd_of(sk, X, S) == pytest.approx(oracles.ksd_loop(X, S, LAM), rel=1e-10)
    assert st_.total == pytest.approx(st_.row_sums.sum(), rel=1e-9)


def test_duplicating_points_leaves_ksd_unchanged():
    rng = np.random.default_rng(1)
    X, S = mixture_points(rng, 30)
    sk = SteinKernel(PreconditionedIMQ(LAM))
    a = ksd_of(sk, X, S)
    b = ksd_of(sk, np.vstack([X, X]), np.vstack([S, S]))
    assert a == pytest.approx(b, rel=1e-12)


def test_add_score_values():
    sk = SteinKernel(PreconditionedIMQ(1.0, dim=1))
    st_ = QuantisationState(sk)
    y, sy = np.array([1.0]), np.array([-1.0])
    k11 = sk(y, sy, y, sy)
    assert st_.add_score(y, sy) == pytest.approx(0.5 * k11)
    st_.commit_add(np.zeros(1), np.zeros(1))
    assert st_.add_score(y, sy) == pytest.approx(0.5 * k11 - 0.5303300858899107, abs=1e-12)


def test_add_scores_mark_invalid_candidates():
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    st_ = QuantisationState(sk)
    st_.commit_add(np.zeros(2), np.zeros(2))
    Y = np.array([[1.0, 0.0], [2.0, 2.0]])
    S = np.array([[np.nan, np.nan], [-2.0, -2.0]])
    out = st_.add_scores(Y, S)
    assert out[0] == math.inf and math.isfinite(out[1])
    with pytest.raises(ValueError):
        st_.add_scores(Y, S[:, :1])


def test_greedy_argmin_matches_recomputed_ksd():
    rng = np.random.default_rng(2)
    sk = SteinKernel(PreconditionedIMQ(LAM))
    for trial in range(50):
        X, S = mixture_points(rng, int(rng.integers(1, 40)))
        Y, SY = mixture_points(rng, 12)
        st_ = QuantisationState.from_points(sk, X, S)
        scores = st_.add_scores(Y, SY)
        after = [oracles.ksd_loop(np.vstack([X, y]), np.vstack([S, s]), LAM) for y, s in zip(Y, SY)]
        assert int(np.argmin(scores)) == int(np.argmin(after))
        for sc, a in zip(scores, after):
            assert st_.ksd_after_add(sc) == pytest.approx(a, rel=1e-9)


def test_commit_add_matches_enlarged_set():
    rng = np.random.default_rng(3)
    X, S = mixture_points(rng, 25)
    sk = SteinKernel(PreconditionedIMQ(LAM))
    st_ = QuantisationState.from_points(sk, X[:-1], S[:-1])
    idx = st_.commit_add(X[-1], S[-1])
    assert idx == 24
    K = oracles.stein_gram_loop(X, S, LAM)
    np.testing.assert_allclose(st_.row_sums, K.sum(axis=1), rtol=1e-10)
    assert st_.ksd() == pytest.approx(oracles.ksd_loop(X, S, LAM), rel=1e-10)


def test_duplicate_commit_keeps_total_nonnegative():
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    st_ = QuantisationState(sk)
    for _ in range(5):
        st_.commit_add(np.ones(2), -np.ones(2))
    assert st_.total >= 0


def test_removal_ksd_matches_brute_force_for_every_index():
    rng = np.random.default_rng(4)
    X, S = mixture_points(rng, 100)
    sk = SteinKernel(PreconditionedIMQ(LAM))
    st_ = QuantisationState.from_points(sk, X, S)
    all_r = st_.removal_ksds()
    K = oracles.stein_gram_loop(X, S, LAM)
    for i in range(100):
        keep = np.arange(100) != i
        expect = math.sqrt(K[np.ix_(keep, keep)].sum()) / 99
        assert st_.removal_ksd(i) == pytest.approx(expect, rel=1e-9)
        assert all_r[i] == pytest.approx(expect, rel=1e-9)


def test_symmetric_pair_ties_break_to_first_index():
    sk = SteinKernel(PreconditionedIMQ(np.eye(1)))
    st_ = QuantisationState(sk)
    st_.commit_add(np.array([-1.0]), np.array([1.0]))
    st_.commit_add(np.array([1.0]), np.array([-1.0]))
    assert st_.removal_ksd(0) == pytest.approx(st_.removal_ksd(1), rel=1e-15)
    assert st_.most_influential() == 0
    assert st_.least_influential() == 0


def test_most_influential_on_clustered_instance():
    t = standard_normal(1)
    sk = SteinKernel(PreconditionedIMQ(1.0, dim=1))
    X = np.array([[0.0], [0.05], [3.0]])
    _, S = t.log_p_and_grad_batch(X, count=False)
    st_ = QuantisationState.from_points(sk, X, S)
    brute = [oracles.ksd_loop(np.delete(X, i, 0), np.delete(S, i, 0), 1.0) for i in range(3)]
    assert st_.most_influential() == int(np.argmax(brute))
    assert st_.least_influential() == int(np.argmin(brute))
    assert 0 <= st_.most_influential() < 3


def test_remove_then_readd_restores_total():
    rng = np.random.default_rng(5)
    X, S = mixture_points(rng, 40)
    sk = SteinKernel(PreconditionedIMQ(LAM))
    st_ = QuantisationState.from_points(sk, X, S)
    total = st_.total
    x, s = st_.points[7].copy(), st_.scores[7].copy()
    st_.commit_remove(7)
    np.testing.assert_array_equal(st_.points[7], X[8])  # order preserved
    st_.commit_add(x, s)
    assert st_.total == pytest.approx(total, rel=1e-9)
    with pytest.raises(IndexError):
        st_.commit_remove(40)


def test_interleaved_adds_and_removes_match_brute_force():
    rng = np.random.default_rng(6)
    sk = SteinKernel(PreconditionedIMQ(LAM))
    st_ = QuantisationState(sk, capacity=4)
    X, S = mixture_points(rng, 300)
    ops = ["a"] * 300 + ["r"] * 100
    rng.shuffle(ops)
    i = 0
    for op in ops:
        if op == "r" and st_.n >= 2:
            st_.commit_remove(int(rng.integers(st_.n)))
        elif i < 300:
            st_.commit_add(X[i], S[i])
            i += 1
    K = oracles.stein_gram_loop(st_.points, st_.scores, LAM)
    assert st_.total == pytest.approx(K.sum(), rel=1e-9)
    np.testing.assert_allclose(st_.row_sums, K.sum(axis=1), rtol=1e-9, atol=1e-9 * abs(K.sum()))
    np.testing.assert_allclose(st_.diag, np.diag(K), rtol=1e-12)


def test_periodic_recompute_runs(monkeypatch):
    calls = []
    original = QuantisationState.recompute

    def spy(self):
        calls.append(self.n)
        original(self)

    monkeypatch.setattr(QuantisationState, "recompute", spy)
    monkeypatch.setattr(ksd_mod, "RECOMPUTE_EVERY", 10)
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    st_ = QuantisationState(sk)
    X, S = mixture_points(np.random.default_rng(7), 25)
    for x, s in zip(X, S):
        st_.commit_add(x, s)
    assert calls == [10, 20]


def test_negative_drift_is_clamped_with_warning(caplog):
    sk = SteinKernel(PreconditionedIMQ(np.eye(2)))
    st_ = QuantisationState(sk)
    st_.commit_add(np.zeros(2), np.zeros(2))
    st_.total = -1.0  # simulate gross drift
    with caplog.at_level(logging.WARNING):
        st_._after_commit()
    assert st_.total == 0.0
    assert "clamping" in caplog.text


def test_copy_is_independent():
    X, S = mixture_points(np.random.default_rng(8), 10)
    st_ = QuantisationState.from_points(SteinKernel(PreconditionedIMQ(LAM)), X, S)
    c = st_.copy()
    c.commit_remove(0)
    assert st_.n == 10 and c.n == 9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 30), beta=st.floats(-0.9, -0.1))
def test_bookkeeping_invariants_property(seed, n, beta):
    rng = np.random.default_rng(seed)
    sk = SteinKernel(PreconditionedIMQ(LAM, beta))
    X, S = mixture_points(rng, n)
    st_ = QuantisationState(sk, capacity=1)
    for x, s in zip(X, S):
        st_.commit_add(x, s)
    if rng.random() < 0.5:
        st_.commit_remove(int(rng.integers(st_.n)))
    assert st_.total >= 0
    assert st_.total == pytest.approx(st_.row_sums.sum(), rel=1e-9, abs=1e-12)
    r = st_.removal_ksds()
    assert np.all(r >= 0)
    assert st_.most_influential() == int(np.argmax(r))


def test_points_csv_round_trip(tmp_path):
    X = np.random.default_rng(9).standard_normal((7, 3)) * 1e-3
    p = tmp_path / "pts.csv"
    write_points_csv(p, X)
    assert p.read_text().splitlines()[0] == "x0,x1,x2"
    np.testing.assert_array_equal(read_points_csv(p), X)
