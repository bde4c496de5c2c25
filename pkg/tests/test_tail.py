import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from cdkformer.numerics import RngStream
from cdkformer.scene import normalize_frame
from cdkformer.synthetic import generate_synthetic
from cdkformer.tail import (RarityModels, apply_tail_scores, cv_kalman_forecast, difficulty_score, fit_gmm,
                            fit_tail_scores, fpca_fit, fpca_reconstruct, fpca_scores, gmm_bic, gmm_nll, normalize,
                            rarity_score, read_scores_csv, scores_csv, select_gmm_bic, smooth_scores,
                            smoothed_density, tail_score)


def _two_blobs(n=300, seed=0):
    g = np.random.default_rng(seed)
    return np.vstack([g.normal([0, 0], 0.5, (n, 2)), g.normal([6, 3], 0.5, (n, 2))])


def test_kalman_exact_on_constant_velocity():
    T = 20
    pos = np.stack([np.arange(T) * 0.8, np.arange(T) * -0.3], axis=1)
    fut = cv_kalman_forecast(pos, np.ones(T, bool), 5, 0.1)
    expect = pos[-1] + np.arange(1, 6)[:, None] * np.array([0.8, -0.3])
    assert np.allclose(fut, expect, atol=1e-9)


def test_difficulty_higher_for_tails():
    corpus = [normalize_frame(s) for s in generate_synthetic(40, 0.5, RngStream(2))]
    head = [difficulty_score(s) for s in corpus if not s.is_tail]
    tail = [difficulty_score(s) for s in corpus if s.is_tail]
    assert np.median(tail) > np.median(head)


def test_gmm_em_monotone_and_recovers_means():
    x = _two_blobs()
    m = fit_gmm(x, 2, RngStream(1))
    ll = np.array(m.log_likelihoods)
    assert np.all(np.diff(ll) >= -1e-12 * np.abs(ll[1:]))
    means = m.means[np.argsort(m.means[:, 0])]
    assert np.allclose(means, [[0, 0], [6, 3]], atol=0.1)
    assert m.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_gmm_nll_matches_scipy_oracle():
    m = fit_gmm(_two_blobs(), 3, RngStream(2))
    pts = np.random.default_rng(3).normal(2, 3, (10, 2))
    dens = sum(w * multivariate_normal(mu, c).pdf(pts) for w, mu, c in zip(m.weights, m.means, m.covariances))
    assert np.allclose(gmm_nll(m, pts), -np.log(dens), rtol=0, atol=1e-10)
    assert isinstance(gmm_nll(m, pts[0]), float)


def test_gmm_errors_and_bic():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((3, 2)), 4, RngStream(0))
    with pytest.raises(ValueError):
        fit_gmm(np.ones((20, 2)), 2, RngStream(0))
    x = _two_blobs(150)
    best = select_gmm_bic(x, [1, 2, 3, 4], RngStream(0))
    assert best.k == 2
    assert gmm_bic(best, x) < gmm_bic(fit_gmm(x, 1, RngStream(0)), x)


def test_fpca_orthonormal_and_reconstructs():
    g = np.random.default_rng(0)
    t = np.linspace(0, 1, 30)
    a, b = g.normal(0, 2, (50, 1)), g.normal(0, 1, (50, 1))
    traj = np.stack([a * t + b * t**2, a * np.sin(t)], axis=2)
    basis = fpca_fit(traj, threshold=0.9)
    for comp in basis.components:
        assert np.allclose(comp @ comp.T, np.eye(len(comp)), atol=1e-8)
        assert len(comp) <= 4
    r = fpca_reconstruct(basis, fpca_scores(basis, traj[0]))
    assert np.abs(r - traj[0]).max() < 0.5


def test_normalize_and_tail_score():
    assert normalize([1, 2, 3]).tolist() == [0.0, 0.5, 1.0]
    assert normalize([5, 5]).tolist() == [0.0, 0.0]
    assert normalize([0, 10], 2, 4).tolist() == [0.0, 1.0]
    assert tail_score(0.25, 1.0) == 0.5
    with pytest.raises(ValueError):
        tail_score(-0.1, 0.5)


def test_lds_weights_mean_one_and_upweight_rare():
    g = np.random.default_rng(0)
    s = np.clip(np.concatenate([g.normal(0.2, 0.05, 200), g.normal(0.9, 0.02, 5)]), 0, 1)
    w = smooth_scores(s)
    assert w.mean() == pytest.approx(1.0, abs=1e-12)
    assert w[-5:].mean() > w[:200].mean()
    dens = smoothed_density(s)
    assert dens.sum() == pytest.approx(1.0)


def test_pipeline_identities_and_ranking():
    train = generate_synthetic(200, 0.25, RngStream(21))
    models, rows = fit_tail_scores(train, RngStream(22))
    for r in rows:
        assert r.S == math.sqrt(r.S_d * r.S_r)
        assert r.S_r == math.sqrt(r.S_rs * r.S_rt)
    assert np.mean([r.S_tilde for r in rows]) == pytest.approx(1.0, abs=1e-9)
    by_tail = {True: [], False: []}
    for s, r in zip(train, rows):
        by_tail[s.is_tail].append(r.S)
    assert np.mean(by_tail[True]) > np.mean(by_tail[False])
    top = sorted(zip(rows, train), key=lambda p: -p[0].S)[:20]
    assert sum(s.is_tail for _, s in top) >= 15


def test_models_round_trip_and_apply():
    train = generate_synthetic(60, 0.25, RngStream(5))
    models, rows = fit_tail_scores(train, RngStream(6))
    again = RarityModels.from_json(models.to_json({"seed": 6}))
    applied = apply_tail_scores(again, train)
    for a, b in zip(rows, applied):
        assert a.S == pytest.approx(b.S, abs=1e-12)
    s_rs, s_rt, s_r = rarity_score(again, train[0])
    assert s_r == pytest.approx(rows[0].S_r, abs=1e-12)
    back = read_scores_csv(scores_csv(rows, "hdr"))
    assert [r.S for r in back] == [r.S for r in rows]
    with pytest.raises(ValueError):
        read_scores_csv("id,S\nx,1\n")
