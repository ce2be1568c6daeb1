import numpy as np
import pytest

from hybridmim import losses as L
from hybridmim import tensor as T
from hybridmim.errors import CheckpointError, ConfigError, DimensionError, FormatError, StateError
from hybridmim.masking import GridSpec, make_plan, select_target_region
from hybridmim.model import HybridUNet, ModelConfig, load_checkpoint, replace_head, save_checkpoint
from hybridmim.pretrain import pair_features

SMALL = ModelConfig(GridSpec((16, 16, 16), 8, 4), base_width=2, max_width=8, projection_dim=4)


@pytest.fixture(scope="module")
def x16():
    return np.random.default_rng(0).normal(size=(2, 1, 16, 16, 16)).astype(np.float32)


def test_shapes_for_64_cube_s1_32():
    cfg = ModelConfig(GridSpec((64, 64, 64), 32, 16), base_width=2, max_width=8, projection_dim=4)
    assert cfg.depth == 5
    pred = HybridUNet(cfg).forward_pretrain(np.zeros((1, 64, 64, 64), np.float32), training=False)
    assert pred.recon.shape == (1, 64, 64, 64)
    assert pred.num_logits.shape == (8, 9)
    assert pred.loc_probs.shape == (8, 8)
    assert pred.feature.shape == (4,)


@pytest.mark.parametrize("shape,s1,depth", [((16, 8, 8), 8, 3), ((16, 16, 16), 8, 1), ((8, 8, 8), 4, 2)])
def test_bottleneck_cells_equal_subvolumes(shape, s1, depth):
    grid = GridSpec(shape, s1, s1 // 2)
    model = HybridUNet(ModelConfig(grid, base_width=2, max_width=4, depth=depth, projection_dim=3))
    pred = model.forward_pretrain(np.zeros((2, 1) + shape, np.float32), training=False)
    assert pred.num_logits.shape == (2, grid.n_subvolumes, 9)
    assert pred.recon.shape == (2, 1) + shape


def test_depth_must_divide_subvolume():
    with pytest.raises(ConfigError):
        ModelConfig(GridSpec((16, 16, 16), 8, 4), depth=4)


def test_eval_forward_is_pure(x16):
    model = HybridUNet(SMALL, seed=3)
    a = model.forward_pretrain(x16, training=False, seed=1)
    b = model.forward_pretrain(x16, training=False, seed=2)
    for f in ("recon", "num_logits", "loc_probs", "feature"):
        np.testing.assert_array_equal(getattr(a, f).numpy(), getattr(b, f).numpy())


def test_dropout_seeds_change_features(x16):
    model = HybridUNet(SMALL, seed=3)
    a = model.forward_pretrain(x16, training=True, seed=1, decode=False)
    b = model.forward_pretrain(x16, training=True, seed=2, decode=False)
    c = model.forward_pretrain(x16, training=True, seed=1, decode=False)
    assert not np.array_equal(a.feature.numpy(), b.feature.numpy())
    np.testing.assert_array_equal(a.feature.numpy(), c.feature.numpy())
    assert b.recon is None


def test_feature_is_unit_norm(x16):
    f = HybridUNet(SMALL).forward_pretrain(x16, training=False).feature.numpy()
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-5)


def test_same_seed_same_weights():
    a, b = HybridUNet(SMALL, seed=9).state_dict(), HybridUNet(SMALL, seed=9).state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_partial_decode_covers_region_box():
    cfg = ModelConfig(GridSpec((32, 32, 32), 8, 4), base_width=2, max_width=4, projection_dim=3)
    region = select_target_region(cfg.grid, 16)  # centres 12 and 20 per axis
    x = np.zeros((1, 1, 32, 32, 32), np.float32)
    pred = HybridUNet(cfg).forward_pretrain(x, training=False, region=region)
    assert pred.recon_box == ((8, 24),) * 3
    assert pred.recon.shape == (1, 1, 16, 16, 16)


def test_input_shape_checked():
    with pytest.raises(DimensionError):
        HybridUNet(SMALL).forward_pretrain(np.zeros((1, 1, 8, 8, 8), np.float32))


def test_every_parameter_receives_gradient(x16):
    model = HybridUNet(SMALL, seed=4)
    plans = [make_plan(SMALL.grid, 0.4, s) for s in (0, 1)]
    masked = x16 * np.stack([~p.voxel_mask() for p in plans])[:, None]
    named = model.named_parameters()
    with T.Tape() as tape:
        a = model.forward_pretrain(masked, training=True, seed=1)
        b = model.forward_pretrain(masked, training=True, seed=2, decode=False)
        region = select_target_region(SMALL.grid, 16)
        rep = L.loss_total(
            L.loss_pr(a.recon, x16, plans, region),
            L.loss_num(a.num_probs, np.stack([p.count_labels for p in plans])),
            L.loss_loc(a.loc_probs, np.stack([p.location_labels for p in plans])),
            L.loss_con(a.num_probs, a.loc_probs),
            L.loss_cl(pair_features(a.feature, b.feature)),
            L.LossWeights())
    grads = tape.backward(rep.total_tensor, wrt=[p for _, p in named])
    dead = [name for (name, _), g in zip(named, grads) if not np.any(g)]
    assert dead == []


# -- segmentation head -------------------------------------------------------------

def test_segment_head_shape_and_softmax(x16):
    seg = replace_head(HybridUNet(SMALL), 2, seed=0)
    logits = seg.forward_segment(x16[0])
    assert logits.shape == (2, 16, 16, 16)
    p = T.softmax(logits, axis=0).numpy()
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-5)
    np.testing.assert_array_equal(seg.forward_segment(x16[0]).numpy(), logits.numpy())


def test_replace_head_keeps_body_and_reseeds_head():
    base = HybridUNet(SMALL, seed=1)
    a, b = replace_head(base, 3, seed=5), replace_head(base, 3, seed=5)
    sa, sb, s0 = a.state_dict(), b.state_dict(), base.state_dict()
    for k in s0:
        if not k.startswith("head."):
            np.testing.assert_array_equal(sa[k], s0[k])
    for k in ("head.weight", "head.bias"):
        np.testing.assert_array_equal(sa[k], sb[k])


def test_replace_head_parameter_count():
    base = HybridUNet(SMALL)
    head_in = SMALL.widths()[0]
    for c in (1, 2, 5):
        delta = replace_head(base, c).num_parameters() - base.num_parameters()
        assert delta == (c - SMALL.in_channels) * (head_in + 1)


def test_replace_head_errors():
    with pytest.raises(ConfigError):
        replace_head(HybridUNet(SMALL), 0)
    with pytest.raises(StateError):
        HybridUNet(SMALL).forward_segment(np.zeros((1, 16, 16, 16), np.float32))
    with pytest.raises(StateError):
        replace_head(HybridUNet(SMALL), 2).forward_pretrain(np.zeros((1, 16, 16, 16), np.float32))


# -- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, x16):
    model = HybridUNet(SMALL, seed=2)
    extra = {"optim/m/x": np.arange(3, dtype=np.float32)}
    path = save_checkpoint(tmp_path / "m.hmck", model, extra, {"step": 7})
    ck = load_checkpoint(path)
    assert ck.meta["step"] == 7
    np.testing.assert_array_equal(ck.arrays["optim/m/x"], extra["optim/m/x"])
    a = model.forward_pretrain(x16, training=False).recon.numpy()
    b = ck.model.forward_pretrain(x16, training=False).recon.numpy()
    np.testing.assert_array_equal(a, b)


def test_segmenter_checkpoint_round_trip(tmp_path):
    seg = replace_head(HybridUNet(SMALL), 4)
    ck = load_checkpoint(save_checkpoint(tmp_path / "s.hmck", seg))
    assert ck.model.head_kind == "segment" and ck.model.classes == 4


def test_checkpoint_mismatch_lists_shapes(tmp_path):
    path = save_checkpoint(tmp_path / "m.hmck", HybridUNet(SMALL))
    other = ModelConfig(SMALL.grid, base_width=3, max_width=8, projection_dim=4)
    with pytest.raises(CheckpointError, match="encoder.0.conv_a.conv.weight"):
        load_checkpoint(path, other)


def test_checkpoint_format_errors(tmp_path):
    path = save_checkpoint(tmp_path / "m.hmck", HybridUNet(SMALL))
    blob = path.read_bytes()
    bad = tmp_path / "bad.hmck"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    bad.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.hmck")
