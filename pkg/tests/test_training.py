import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_config
from cdkformer.features import collate
from cdkformer.model import CDKFormer
from cdkformer.numerics import DTYPE, NonFiniteError, RngStream
from cdkformer.training import (TrainConfig, compute_loss, load_checkpoint, lr_at, metrics_csv, predict,
                                save_checkpoint, train, winner_index)


def test_winner_by_final_displacement():
    gt = torch.zeros(1, 3, 2, dtype=DTYPE)
    trajs = torch.zeros(1, 2, 3, 2, dtype=DTYPE)
    trajs[0, 0, :2] = 0.0
    trajs[0, 0, 2] = 1.0  # best ADE-ish but worse endpoint
    trajs[0, 1, :2] = 2.0
    trajs[0, 1, 2] = 0.1
    assert winner_index(trajs, gt).tolist() == [1]


def test_loss_terms_and_alpha_weighting(small_batch):
    model = CDKFormer(tiny_config(), RngStream(0))
    with torch.no_grad():
        out = model(small_batch)
    l0 = compute_loss(out, small_batch, alpha=0.0)
    l1 = compute_loss(out, small_batch, alpha=0.5)
    w = small_batch.weights
    assert float(l1.total - l0.total) == pytest.approx(0.5 * float(l1.future_t), rel=1e-12)
    raw = compute_loss(out, small_batch, 0.5, weights=torch.ones_like(w))
    assert float(raw.future_t) == pytest.approx(float(raw.future_t_raw), rel=1e-12)
    v = l1.values()
    assert v["total"] == pytest.approx(v["mode_reg"] + v["mode_cls"] + v["future_r"] + 0.5 * v["future_t"]
                                       + v["scene_reg"] + v["scene_cls"] + v["group"], rel=1e-12)
    with pytest.raises(ValueError):
        compute_loss(out, small_batch, alpha=-1)


def test_group_loss_ignores_unsupervised_neighbors(small_batch):
    model = CDKFormer(tiny_config(), RngStream(0))
    with torch.no_grad():
        out = model(small_batch)
    masked = replace(small_batch, neighbor_future=torch.where(
        small_batch.neighbor_future_mask[..., None, None], small_batch.neighbor_future,
        small_batch.neighbor_future + 100.0))
    assert float(compute_loss(out, masked).group) == float(compute_loss(out, small_batch).group)


def test_cosine_schedule():
    cfg = TrainConfig(epochs=10)
    lrs = [lr_at(e, cfg) for e in range(10)]
    assert lrs[0] == cfg.lr and lrs[-1] < lrs[0]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lr_at(3, TrainConfig(schedule="constant")) == 3e-3


def test_training_reduces_loss_and_is_deterministic(small_feats, tmp_path):
    feats = small_feats[:6]
    cfg = TrainConfig(epochs=3, batch_size=3, seed=4)
    runs = []
    for i in range(2):
        model = CDKFormer(tiny_config(dropout=0.1), RngStream(1))
        hist = train(model, feats, [1.0] * 6, cfg, checkpoint_path=tmp_path / f"m{i}.json")
        runs.append(hist)
    assert runs[0][-1].losses["total"] < runs[0][0].losses["total"]
    assert (tmp_path / "m0.json").read_bytes() == (tmp_path / "m1.json").read_bytes()
    assert metrics_csv(runs[0]) == metrics_csv(runs[1])
    assert "wall_time" not in metrics_csv(runs[0]) and "wall_time" in metrics_csv(runs[0], wall_time=True)


def test_checkpoint_round_trip(small_feats, tmp_path):
    model = CDKFormer(tiny_config(), RngStream(2))
    p = tmp_path / "c.json"
    save_checkpoint(p, model, TrainConfig(), epoch=0, provenance={"seed": 2})
    back, meta = load_checkpoint(p)
    assert meta["provenance"] == {"seed": 2} and meta["model_config"] == model.cfg.to_dict()
    a, b = predict(model, small_feats[:2]), predict(back, small_feats[:2])
    for (ta, pa), (tb, pb) in zip(a, b):
        assert np.array_equal(ta, tb) and np.array_equal(pa, pb)
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_predict_maps_back_to_world(small_feats):
    model = CDKFormer(tiny_config(), RngStream(3))
    f = small_feats[0]
    (tw, pw), = predict(model, [f], world=True)
    (tl, _), = predict(model, [f], world=False)
    c, s = math.cos(f.theta), math.sin(f.theta)
    R = np.array([[c, -s], [s, c]])
    assert np.allclose(tw, tl @ R.T + f.origin, atol=1e-9)
    assert pw.sum() == pytest.approx(1.0)


def test_nonfinite_loss_is_reported(small_feats):
    model = CDKFormer(tiny_config(), RngStream(0))
    with torch.no_grad():
        model.decoder.traj_head.layers[-1].b.fill_(float("inf"))
    with pytest.raises(NonFiniteError, match="batch 0"):
        train(model, small_feats[:2], None, TrainConfig(epochs=1, batch_size=2))


def test_train_input_errors(small_feats):
    model = CDKFormer(tiny_config(), RngStream(0))
    with pytest.raises(ValueError):
        train(model, [], None, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(model, small_feats[:2], [1.0], TrainConfig(epochs=1))
