import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridmim import tensor as T
from hybridmim.data import PhantomSpec, make_corpus
from hybridmim.errors import CheckpointError, ConfigError, DimensionError, MetricUndefinedError
from hybridmim.finetune import (FinetuneConfig, build_segmenter, dice, evaluate_masks, finetune_run, hd95,
                                label_subset, one_hot, predict, segmentation_loss, soft_dice_loss)
from hybridmim.masking import GridSpec
from hybridmim.model import HybridUNet, ModelConfig, save_checkpoint
from oracles import hd95_brute

GRID = {"volume_shape": (16, 16, 16), "sub_volume_size": 8, "patch_size": 4}
MODEL = {"base_width": 2, "max_width": 4, "projection_dim": 4}


def tiny(**kw) -> FinetuneConfig:
    base = dict(grid=GRID, model=MODEL, epochs=1, seed=0)
    base.update(kw)
    return FinetuneConfig(**base)


@pytest.fixture(scope="module")
def split():
    data = make_corpus(6, PhantomSpec((16, 16, 16), axis_range=(2, 4)), 3)
    return data[:4], data[4:]


# -- Dice / HD95 ---------------------------------------------------------------------

def test_dice_examples():
    a = np.zeros((10, 10, 10), bool)
    a[:5, :5, :4] = True  # 100 voxels
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 5, axis=0)) == 0.0
    b = np.zeros_like(a)
    b[:5, :5, 2:6] = True  # 100 voxels, 50 shared
    assert (a & b).sum() == 50 and dice(a, b) == 0.5
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(DimensionError):
        dice(np.zeros(3), np.zeros(4))


def test_hd95_examples():
    a = np.zeros((5, 5, 5), bool)
    a[0, 0, 0] = True
    b = np.zeros_like(a)
    b[1, 0, 0] = True
    assert hd95(a, a) == 0.0
    assert hd95(a, b) == 1.0
    with pytest.raises(MetricUndefinedError):
        hd95(a, np.zeros_like(a))


@given(st.integers(0, 10_000))
def test_hd95_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((7, 7, 7)) < 0.15
    b = rng.random((7, 7, 7)) < 0.15
    a[3, 3, 3] = b[1, 1, 1] = True
    assert hd95(a, b) == pytest.approx(hd95_brute(a, b), abs=1e-6)


@given(st.integers(0, 10_000))
def test_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6, 6)) < 0.3, rng.random((6, 6, 6)) < 0.3
    a[0, 0, 0] = b[5, 5, 5] = True
    assert dice(a, b) == dice(b, a)
    assert hd95(a, b) == hd95(b, a) >= 0


def test_hd95_respects_spacing():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = b[0, 0, 2] = True
    assert hd95(a, b, spacing=(1, 1, 2.5)) == pytest.approx(5.0)


def test_evaluate_masks_permutation_invariant(rng):
    preds = [rng.integers(0, 3, (6, 6, 6)) for _ in range(4)]
    truths = [rng.integers(0, 3, (6, 6, 6)) for _ in range(4)]
    a = evaluate_masks(preds, truths, 3)
    order = [2, 0, 3, 1]
    b = evaluate_masks([preds[i] for i in order], [truths[i] for i in order], 3)
    assert a.dice == pytest.approx(b.dice) and a.hd95 == pytest.approx(b.hd95)
    assert a.classes == [1, 2]


def test_missing_class_gives_nan_hd95():
    t = np.zeros((4, 4, 4), int)
    t[1, 1, 1] = 1
    m = evaluate_masks([t], [t], 3)
    assert m.dice == [1.0, 1.0] and m.hd95[0] == 0.0 and np.isnan(m.hd95[1])
    assert m.to_dict()["hd95"] == [0.0, None]


# -- losses -----------------------------------------------------------------------------

@given(st.integers(0, 10_000))
def test_soft_dice_equals_one_minus_dice_at_one_hot(seed):
    rng = np.random.default_rng(seed)
    c = 3
    pred = rng.integers(0, c, (2, 5, 5, 5))
    truth = rng.integers(0, c, (2, 5, 5, 5))
    with T.precision(np.float64):
        loss = soft_dice_loss(T.Tensor(one_hot(pred, c)), one_hot(truth, c)).item()
    expected = np.mean([dice(pred[i] == k, truth[i] == k) for i in range(2) for k in range(c)])
    assert loss == pytest.approx(1 - expected, abs=1e-9)


def test_segmentation_loss_gradient():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, (1, 3, 3, 3))
    assert T.grad_check(lambda z: segmentation_loss(z, labels), rng.normal(size=(1, 3, 3, 3, 3))) < 1e-5


def test_one_hot_range_checked():
    with pytest.raises(ConfigError):
        one_hot(np.array([[0, 3]]), 3)


# -- runs ---------------------------------------------------------------------------------

def test_label_subset_prefix_property():
    full, half = label_subset(10, 1.0, 4), label_subset(10, 0.5, 4)
    assert sorted(full) == list(range(10))
    np.testing.assert_array_equal(half, full[:5])
    assert len(label_subset(10, 0.01, 4)) == 1


def test_zero_epochs_reports_initial_model(split):
    train, val = split
    res = finetune_run(tiny(epochs=0), train, val)
    direct = evaluate_masks(predict(build_segmenter(tiny()), [v for v, _ in val]), [y for _, y in val], 3)
    assert res.best.dice == direct.dice and res.curves == [] and res.best_epoch == 0


def test_transfer_fidelity(tmp_path):
    cfg = tiny()
    pre = HybridUNet(cfg.model_config(), seed=11)
    path = save_checkpoint(tmp_path / "p.hmck", pre)
    seg = build_segmenter(tiny(init=str(path)))
    pre_state, seg_state = pre.state_dict(), seg.state_dict()
    for k, v in pre_state.items():
        if not k.startswith("head."):
            np.testing.assert_array_equal(seg_state[k], v.astype(np.float32), err_msg=k)
    assert seg.classes == 3


def test_incompatible_checkpoint(tmp_path):
    other = HybridUNet(ModelConfig(GridSpec(**GRID), base_width=3, max_width=6, projection_dim=4))
    path = save_checkpoint(tmp_path / "p.hmck", other)
    with pytest.raises(CheckpointError, match="encoder"):
        build_segmenter(tiny(init=str(path)))


def test_run_is_deterministic_and_writes_outputs(tmp_path, split):
    train, val = split
    a = finetune_run(tiny(epochs=2), train, val, out_dir=tmp_path / "a")
    b = finetune_run(tiny(epochs=2), train, val, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "curves.csv").read_text() == (tmp_path / "b" / "curves.csv").read_text()
    header = (tmp_path / "a" / "curves.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_dice_1,val_dice_2,val_hd95_1,val_hd95_2"
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["best_epoch"] == a.best_epoch == b.best_epoch
    assert 0.0 <= summary["mean_dice"] <= 1.0


def test_steps_per_epoch_fixes_update_count(split):
    train, val = split
    res = finetune_run(tiny(epochs=2, steps_per_epoch=3, label_fraction=0.25), train, val)
    assert len(res.train_indices) == 1 and len(res.curves) == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny(classes=0)
    with pytest.raises(ConfigError):
        tiny(label_fraction=0.0)
    with pytest.raises(ConfigError):
        finetune_run(tiny(), [], [])
