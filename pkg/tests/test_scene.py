import json
from dataclasses import replace

import numpy as np
import pytest

from cdkformer.features import collate, scene_features, to_world
from cdkformer.numerics import RngStream
from cdkformer.scene import (AgentTrack, ScenarioError, dumps_corpus, fill_masked, load_scenarios, normalize_frame,
                             rigid_transform, save_scenarios, validate, wrap_angle)
from cdkformer.synthetic import MANEUVERS, generate_synthetic


def test_wrap_angle_range_and_identity_inside():
    a = np.linspace(-20, 20, 401)
    w = wrap_angle(a)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert np.allclose(np.cos(w), np.cos(a)) and np.allclose(np.sin(w), np.sin(a))
    inside = np.array([-3.0, 0.0, 1.5, np.pi])
    assert np.array_equal(wrap_angle(inside), inside)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)


def test_fill_masked_forward_and_leading():
    v = np.array([[9.0], [1.0], [9.0], [3.0]])
    out = fill_masked(v, np.array([False, True, False, True]))
    assert out[:, 0].tolist() == [1.0, 1.0, 1.0, 3.0]


def test_generator_counts_and_determinism():
    a = generate_synthetic(40, 0.3, RngStream(7))
    b = generate_synthetic(40, 0.3, RngStream(7))
    assert sum(s.is_tail for s in a) == 12
    assert dumps_corpus(a, 20, 30, 10) == dumps_corpus(b, 20, 30, 10)
    assert {s.label["maneuver"] for s in a if s.is_tail} <= set(MANEUVERS)
    for s in a:
        validate(s)
        assert 1 <= len(s.agents) <= 16


def test_test_split_has_no_futures():
    for s in generate_synthetic(5, 0.5, RngStream(1), split="test"):
        assert s.future is None and all(a.future is None for a in s.agents)


def test_corpus_round_trip(tmp_path):
    corpus = generate_synthetic(6, 0.5, RngStream(2))
    p = tmp_path / "c.jsonl"
    save_scenarios(p, corpus, {"seed": 2})
    back = load_scenarios(p)
    assert dumps_corpus(back, 20, 30, 10) == dumps_corpus(corpus, 20, 30, 10)


def test_loader_errors_name_the_problem(tmp_path):
    corpus = generate_synthetic(2, 0.0, RngStream(3))
    text = dumps_corpus(corpus, 20, 30, 10).splitlines()
    rec = json.loads(text[1])
    rec["agents"][0]["positions"] = rec["agents"][0]["positions"][:5]
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join([text[0], json.dumps(rec)]) + "\n")
    with pytest.raises(ScenarioError, match="positions"):
        load_scenarios(bad)
    (tmp_path / "garbage.jsonl").write_text("{not json\n")
    with pytest.raises(ScenarioError, match="parse error"):
        load_scenarios(tmp_path / "garbage.jsonl")
    (tmp_path / "empty.jsonl").write_text("")
    assert load_scenarios(tmp_path / "empty.jsonl") == []


def test_validate_rejects_two_targets():
    s = generate_synthetic(1, 0.0, RngStream(4))[0]
    bad = replace(s, agents=[s.agents[0], replace(s.agents[0])])
    with pytest.raises(ScenarioError, match="target"):
        validate(bad)


def test_normalize_frame_puts_target_at_origin_heading_x():
    s = generate_synthetic(3, 0.0, RngStream(5))[0]
    n = normalize_frame(s)
    t = n.target
    assert np.allclose(t.positions[t.last_valid], 0.0, atol=1e-9)
    assert abs(t.headings[t.last_valid]) < 1e-9


def test_normalize_frame_removes_rigid_motion():
    s = generate_synthetic(2, 0.5, RngStream(6))[1]
    moved = rigid_transform(s, 1.234, np.array([17.0, -4.0]))
    a, b = normalize_frame(s), normalize_frame(moved)
    assert np.allclose(a.future, b.future, atol=1e-9)
    for x, y in zip(a.agents, b.agents):
        assert np.allclose(x.positions, y.positions, atol=1e-9)


def test_stationary_target_uses_identity_rotation():
    s = generate_synthetic(1, 0.0, RngStream(8))[0]
    t = s.target
    still = replace(t, positions=np.repeat(t.positions[-1:], len(t.positions), axis=0), headings=t.headings + 0.7)
    s2 = replace(s, agents=[still] + s.agents[1:])
    n = normalize_frame(s2)
    assert np.allclose(n.future, s2.future - still.positions[-1])


def test_features_shapes_and_world_round_trip():
    s = generate_synthetic(2, 0.5, RngStream(9))[0]
    f = scene_features(s)
    assert f.agents.shape == (len(s.agents), 20, 6)
    assert f.individual.shape == (20, 6) and f.group.shape == (20, 2)
    assert np.allclose(to_world(f, f.future), s.future, atol=1e-9)
    assert not f.neighbor_future_mask[0]


def test_collate_pads_and_masks():
    corpus = generate_synthetic(4, 0.5, RngStream(10))
    feats = [scene_features(s) for s in corpus]
    b = collate(feats, [1.0, 2.0, 3.0, 4.0])
    A = max(f.n_agents for f in feats)
    assert b.agents.shape[:2] == (4, A)
    for i, f in enumerate(feats):
        assert int(b.agent_valid[i].sum()) == f.n_agents
        assert int(b.poly_valid[i].sum()) == len(f.polylines)
    assert b.context_mask.shape == (4, b.centers.shape[1])
    assert b.weights.tolist() == [1.0, 2.0, 3.0, 4.0]
