import numpy as np
import pytest

from cdkformer.deviation import (circular_mean, circular_std, cohort_size, cohort_stats, deviation_bundle,
                                 displacement_orientations, group_deviation, individual_deviation, summary_features)
from cdkformer.numerics import RngStream
from cdkformer.scene import AgentTrack, Scenario
from cdkformer.synthetic import generate_synthetic


def _track(pos, speed, heading=None, kind="target", mask=None):
    pos = np.asarray(pos, float)
    T = len(pos)
    h = np.full(T, 0.0) if heading is None else np.asarray(heading, float)
    return AgentTrack(pos, h, np.full(T, float(speed)) if np.ndim(speed) == 0 else np.asarray(speed, float),
                      np.ones(T, bool) if mask is None else mask, kind)


def _scene(agents, T=20):
    return Scenario("x", agents, [], np.zeros((30, 2)), T, 30, 10.0)


def test_constant_velocity_straight_track_is_all_zero():
    T = 20
    pos = np.stack([np.arange(T) * 1.2, np.zeros(T)], axis=1)
    b = deviation_bundle(_scene([_track(pos, 12.0)]))
    assert np.array_equal(b.individual, np.zeros((T, 6)))


def test_turning_track_descriptor():
    T = 10
    th = np.linspace(0, 0.9, T)
    pos = np.cumsum(np.stack([np.cos(th), np.sin(th)], axis=1), axis=0)
    v = np.linspace(10, 8, T)
    d = individual_deviation(_track(pos, v, th), T - 1).values
    assert d[0] == pytest.approx(0.9)
    assert d[4] == pytest.approx(-2.0)
    assert d[5] == pytest.approx(np.std(v))
    assert d[3] == pytest.approx(np.std(th), abs=1e-12)


def test_circular_statistics_wrap():
    assert circular_std([0.3] * 5) == 0.0
    assert circular_mean([np.pi - 0.1, -np.pi + 0.1]) == pytest.approx(np.pi, abs=1e-12)
    assert circular_std([np.pi - 0.1, -np.pi + 0.1]) == pytest.approx(0.1, abs=1e-12)


def test_orientation_carried_over_zero_moves():
    pos = np.array([[0, 0], [1, 1], [1, 1], [2, 1]], float)
    a = displacement_orientations(_track(pos, 1.0, [0.5, 0.5, 0.5, 0.5]))
    assert a.tolist() == pytest.approx([0.5, np.pi / 4, np.pi / 4, 0.0])


def test_group_deviation_and_degenerate():
    T = 3
    tgt = _track(np.zeros((T, 2)), 10.0)
    n1 = _track(np.ones((T, 2)), 12.0, [0.1] * T, kind="neighbor")
    n2 = _track(np.ones((T, 2)), 14.0, [0.3] * T, kind="neighbor")
    g = group_deviation(_scene([tgt, n1, n2], T), 2)
    assert g.values[0] == pytest.approx(3.0)
    assert g.values[1] == pytest.approx(0.1)
    assert group_deviation(_scene([tgt], T), 2).degenerate


def test_single_valid_step_is_degenerate():
    mask = np.zeros(5, bool)
    mask[4] = True
    d = individual_deviation(_track(np.zeros((5, 2)), 1.0, mask=mask), 4)
    assert d.degenerate and not d.values.any()


def test_cohort_stats_separate_tails():
    corpus = generate_synthetic(60, 0.3, RngStream(4))
    scores = [1.0 if s.is_tail else 0.0 for s in corpus]
    rows = {r["metric"]: r for r in cohort_stats(corpus, scores, 0.1)}
    assert cohort_size(60, 0.1) == 6
    assert rows["sigma_V_ind"]["tail_mean"] > rows["sigma_V_ind"]["head_mean"]
    with pytest.raises(ValueError):
        cohort_stats(corpus[:5], scores[:5], 0.1)
    assert set(summary_features(deviation_bundle(corpus[0]))) == set(rows)
