import numpy as np
import pytest

from cdkformer.evaluation import (ScenarioMetrics, cvar, cvar_table, displacement_metrics, dumps_predictions,
                                  feature_bins, load_predictions, quantile_bins, rows_csv, sliced_report, top_ids)


def test_perfect_prediction():
    gt = np.random.default_rng(0).normal(size=(30, 2))
    m = displacement_metrics(gt[None], np.array([1.0]), gt)
    assert (m.min_ade, m.min_fde, m.b_min_fde, m.miss) == (0.0, 0.0, 0.0, 0)


def test_miss_when_all_candidates_far():
    gt = np.zeros((5, 2))
    tr = np.zeros((2, 5, 2))
    tr[0, -1] = [3.0, 0.0]
    tr[1, -1] = [0.0, -3.0]
    assert displacement_metrics(tr, np.array([0.5, 0.5]), gt).miss == 1


def test_brier_variants():
    gt = np.zeros((4, 2))
    tr = np.zeros((2, 4, 2))
    tr[0, -1] = [1.0, 0.0]
    tr[1, -1] = [5.0, 0.0]
    p = np.array([0.5, 0.5])
    assert displacement_metrics(tr, p, gt).b_min_fde == pytest.approx(1.25)
    assert displacement_metrics(tr, p, gt, brier="conventional").b_min_fde == pytest.approx(1.25)
    p = np.array([0.2, 0.8])
    assert displacement_metrics(tr, p, gt).b_min_fde == pytest.approx(1.0 + (0.64 + 0.64) / 2)
    assert displacement_metrics(tr, p, gt, brier="conventional").b_min_fde == pytest.approx(1.64)


def test_metric_errors():
    with pytest.raises(ValueError, match="K mismatch"):
        displacement_metrics(np.zeros((2, 3, 2)), np.ones(3) / 3, np.zeros((3, 2)))
    with pytest.raises(ValueError):
        displacement_metrics(np.zeros((2, 3, 2)), np.ones(2) / 2, np.zeros((3, 2)), brier="x")


def test_rigid_invariance():
    g = np.random.default_rng(1)
    tr, gt, p = g.normal(size=(3, 6, 2)), g.normal(size=(6, 2)), np.array([0.2, 0.3, 0.5])
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    a = displacement_metrics(tr, p, gt)
    b = displacement_metrics(tr @ R.T + 4, p, gt @ R.T + 4)
    assert a.min_ade == pytest.approx(b.min_ade) and a.min_fde == pytest.approx(b.min_fde)


def test_cvar_examples():
    assert cvar(np.arange(1, 101), 90) == 95.5
    assert cvar([2.5] * 7, 93) == 2.5
    e = np.random.default_rng(0).exponential(size=57)
    vals = [cvar(e, a) for a in range(90, 100)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))
    assert cvar(e, 1e-9) == pytest.approx(e.mean())
    assert cvar(e, 99.999) == e.max()
    with pytest.raises(ValueError):
        cvar([], 90)


def _metrics(n):
    g = np.random.default_rng(n)
    return {f"s{i:03d}": ScenarioMetrics(float(a), float(a) * 2, float(a) * 2 + 0.1, int(a > 1))
            for i, a in enumerate(g.uniform(0, 2, n))}


def test_slices_and_top_ids():
    m = _metrics(100)
    scores = {k: float(i) for i, k in enumerate(m)}
    rows = sliced_report(m, scores)
    assert [r["slice"] for r in rows] == ["all", "top-10%", "top-5%"]
    assert [r["count"] for r in rows] == [100, 10, 5]
    assert set(top_ids(scores, 0.1)) == {f"s{i:03d}" for i in range(90, 100)}
    assert sliced_report({"a": m["s000"]})[0]["minADE"] == m["s000"].min_ade
    with pytest.raises(ValueError):
        sliced_report(m, scores, custom={"none": []})


def test_quantile_and_feature_bins():
    bins = quantile_bins(np.random.default_rng(0).normal(size=100))
    assert [len(b) for b in bins] == [20] * 5
    rows = feature_bins({"f": np.arange(10.0)}, np.arange(10.0) * 2)
    assert [r["median"] for r in rows] == [0.5, 2.5, 4.5, 6.5, 8.5]
    assert rows[0]["mean_minADE"] == 1.0 and rows[0]["stderr"] == pytest.approx(1.0)


def test_cvar_table_and_csv():
    m = _metrics(50)
    t = cvar_table(m)
    assert [r["alpha"] for r in t] == [90, 95, 99]
    text = rows_csv(t, ("alpha", "minADE", "minFDE"), "hdr")
    assert text.startswith("# hdr\nalpha,minADE,minFDE\n")


def test_prediction_file_round_trip(tmp_path):
    g = np.random.default_rng(0)
    preds = [(g.normal(size=(6, 30, 2)), np.full(6, 1 / 6)) for _ in range(2)]
    p = tmp_path / "p.jsonl"
    p.write_text(dumps_predictions(["a", "b"], preds, {"seed": 0}))
    back = load_predictions(p)
    assert np.array_equal(back["b"][0], preds[1][0])
    p.write_text('{"format":"x"}\n')
    with pytest.raises(ValueError):
        load_predictions(p)
