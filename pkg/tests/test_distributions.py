import numpy as np
import pytest
from scipy import stats

from mrsv import distributions as dist


def test_truncated_normal_matches_exact_law():
    rng = np.random.default_rng(0)
    cases = [
        (0.0, 1.0, -1.0, 1.0),
        (1.0, 2.0, -3.0, 0.5),
        (2.0, 0.5, 3.0, np.inf),
        (0.0, 1.0, -np.inf, -5.0),
        (0.0, 1.0, 8.0, 9.0),
        (0.0, 1.0, 30.0, 31.0),
        (-1.0, 3.0, -np.inf, np.inf),
    ]
    for mean, sd, lo, hi in cases:
        draws = np.array([dist.sample_truncated_normal(rng, mean, sd, lo, hi) for _ in range(4000)])
        a, b = (lo - mean) / sd, (hi - mean) / sd
        ref = stats.truncnorm(a, b, loc=mean, scale=sd)
        stat, pval = stats.kstest(draws, ref.cdf)
        assert pval > 1e-3, (mean, sd, lo, hi, stat, pval)
        assert np.all(draws > lo) and np.all(draws < hi)


def test_truncated_normal_deep_tail_is_robust():
    # far beyond where the plain CDF underflows
    rng = np.random.default_rng(1)
    draws = np.array([dist.sample_truncated_normal(rng, 0.0, 1.0, 50.0, 60.0) for _ in range(2000)])
    assert np.all(draws > 50.0) and np.all(draws < 60.0)
    assert 50.0 < draws.mean() < 50.1  # tail mass decays at rate ~1/50


def test_truncated_normal_never_returns_endpoint():
    rng = np.random.default_rng(2)
    for lo, hi in [(5.0, 5.0 + 1e-12), (-1.0, -1.0 + 1e-13), (0.0, 5e-324 * 4)]:
        for _ in range(200):
            x = dist.sample_truncated_normal(rng, 0.0, 1.0, lo, hi)
            assert lo < x < hi


def test_truncated_normal_rejects_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="empty"):
        dist.sample_truncated_normal(rng, 0.0, 1.0, 2.0, 2.0)
    with pytest.raises(ValueError, match="positive"):
        dist.sample_truncated_normal(rng, 0.0, 0.0, 0.0, 1.0)


def test_inverse_gamma_law():
    rng = np.random.default_rng(3)
    a, b = 3.0, 2.0
    draws = dist.sample_inverse_gamma(rng, a, b, size=200_000)
    assert draws.mean() == pytest.approx(b / (a - 1.0), abs=0.02)
    stat, pval = stats.kstest(draws[:5000], stats.invgamma(a, scale=b).cdf)
    assert pval > 1e-3
    with pytest.raises(ValueError):
        dist.sample_inverse_gamma(rng, -1.0, 1.0)


def test_inverse_wishart_mean():
    rng = np.random.default_rng(4)
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    df = 7.0
    draws = np.stack([dist.sample_inverse_wishart(rng, df, S) for _ in range(40_000)])
    assert np.allclose(draws.mean(axis=0), S / (df - 2.0 - 1.0), rtol=0.03)
    with pytest.raises(ValueError):
        dist.sample_inverse_wishart(rng, 1.0, S)


def test_inverse_wishart_collapses_to_inverse_gamma_at_p1():
    rng = np.random.default_rng(5)
    nu, s = 6.0, 2.5
    draws = np.array([dist.sample_inverse_wishart(rng, nu, np.array([[s]]))[0, 0] for _ in range(5000)])
    stat, pval = stats.kstest(draws, stats.invgamma(0.5 * nu, scale=0.5 * s).cdf)
    assert pval > 1e-3


def test_matrix_normal_moments():
    rng = np.random.default_rng(6)
    M = np.array([[1.0, -2.0], [0.5, 3.0]])
    U = np.array([[1.0, 0.4], [0.4, 0.5]])  # rows
    V = np.array([[2.0, -0.3], [-0.3, 1.0]])  # columns
    draws = np.stack([dist.sample_matrix_normal(rng, M, U, V) for _ in range(60_000)])
    vecs = np.stack([d.flatten(order="F") for d in draws])
    assert np.allclose(draws.mean(axis=0), M, atol=0.03)
    emp = np.cov(vecs.T)
    assert np.allclose(emp, np.kron(V, U), atol=0.05)


def test_truncated_mvn_box_rejection_path():
    rng = np.random.default_rng(7)
    mean = np.array([0.8, 0.7])
    cov = np.array([[0.05, 0.03], [0.03, 0.04]])
    draws = []
    for _ in range(5000):
        x, fb = dist.sample_truncated_mvn_box(rng, mean, cov)
        assert not fb
        draws.append(x)
    draws = np.asarray(draws)
    assert np.all(np.abs(draws) < 1.0)
    # brute-force reference with the same law
    L = np.linalg.cholesky(cov)
    ref = []
    while len(ref) < 5000:
        cand = mean + L @ rng.standard_normal(2)
        if np.all(np.abs(cand) < 1.0):
            ref.append(cand)
    ref = np.asarray(ref)
    for c in range(2):
        stat, pval = stats.ks_2samp(draws[:, c], ref[:, c])
        assert pval > 1e-3


def test_truncated_mvn_box_fallback_path():
    rng = np.random.default_rng(8)
    mean = np.array([5.0, 5.0])  # far outside the box: rejection can't land
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    draws = []
    for _ in range(200):
        x, fb = dist.sample_truncated_mvn_box(rng, mean, cov, max_rejects=5)
        assert fb
        assert np.all(np.abs(x) < 1.0)
        draws.append(x)
    assert np.all(np.mean(draws, axis=0) > 0.5)  # mass piles up at the near corner


def test_seeded_determinism():
    a = dist.sample_truncated_normal(np.random.default_rng(9), 0.0, 1.0, -2.0, 0.5)
    b = dist.sample_truncated_normal(np.random.default_rng(9), 0.0, 1.0, -2.0, 0.5)
    assert a == b
    A = dist.sample_inverse_wishart(np.random.default_rng(9), 5.0, np.eye(3))
    B = dist.sample_inverse_wishart(np.random.default_rng(9), 5.0, np.eye(3))
    assert np.array_equal(A, B)
