import numpy as np
from PIL import Image

from bsnet.data import SyntheticSpec, generate_synthetic, sample_episode
from bsnet.engine import build_model, predict, score_episode
from bsnet.explain import (
    RED_HEAT,
    cam_from_features,
    colorize,
    episode_heatmaps,
    grad_cam,
    upsample,
    write_episode_heatmaps,
)


def channel0_mean(leaf):
    return leaf[0].mean()


def test_channel_zero_head_gives_relu_of_channel_zero(rng):
    feats = rng.normal(size=(4, 5, 6))
    values, zero = cam_from_features(feats, channel0_mean)
    expect = np.maximum(feats[0], 0.0)
    expect = (expect - expect.min()) / (expect.max() - expect.min())
    np.testing.assert_allclose(values, expect, atol=1e-12)
    assert not zero


def test_zero_features_give_flagged_zero_map():
    values, zero = cam_from_features(np.zeros((3, 4, 4)), channel0_mean)
    assert zero
    np.testing.assert_array_equal(values, 0.0)


def test_zero_gradient_flagged(rng):
    values, zero = cam_from_features(rng.normal(size=(3, 4, 4)), lambda leaf: leaf[0, 0, 0] * 0.0)
    assert zero and not values.any()


def test_positive_rescaling_invariance(rng):
    feats = rng.normal(size=(4, 5, 5))
    w = rng.normal(size=(4, 5, 5))
    a, _ = cam_from_features(feats, lambda leaf: (leaf * w).sum())
    b, _ = cam_from_features(feats, lambda leaf: (leaf * w).sum() * 37.5)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.min() == 0.0 and a.max() == 1.0


def test_red_heat_table_fixed():
    assert RED_HEAT.shape == (256, 3) and RED_HEAT.dtype == np.uint8
    np.testing.assert_array_equal(RED_HEAT[0], [0, 0, 0])
    np.testing.assert_array_equal(RED_HEAT[85], [255, 0, 0])
    np.testing.assert_array_equal(RED_HEAT[170], [255, 255, 0])
    np.testing.assert_array_equal(RED_HEAT[255], [255, 255, 255])
    assert np.all(np.diff(RED_HEAT.astype(int).sum(axis=1)) >= 0)
    np.testing.assert_array_equal(colorize(np.array([[0.0, 1.0]])), [[[0, 0, 0], [255, 255, 255]]])


def test_upsample_shape_and_range(rng):
    up = upsample(rng.random((19, 19)))
    assert up.shape == (84, 84) and up.min() >= 0 and up.max() <= 1


def test_model_heatmaps_and_files(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_classes=6, images_per_class=4))
    ep = sample_episode(ds, 3, 1, 1, np.random.default_rng(0))
    model = build_model("conv4", ["relation", "cosine"], seed=0)
    maps = episode_heatmaps(model, ep, 1)
    assert set(maps) == {"relation", "cosine", "mean"}
    predicted = int(predict(score_episode(model, ep).scores)[1])
    for hm in maps.values():
        assert hm.values.shape == (19, 19) and hm.overlay.shape == (3, 84, 84)
        assert hm.values.min() >= 0 and hm.values.max() <= 1
        assert hm.target_class == predicted
    single = grad_cam(model, ep, 1, target_class=2, head=0)
    assert single.head == "relation" and single.target_class == 2

    paths = write_episode_heatmaps(model, ep, 7, tmp_path, queries=[0], target="true")
    assert len(paths) == 3
    names = sorted(p.name for p in paths)
    assert names == sorted(f"7_0_{int(ep.query_labels[0])}_{h}.png" for h in ("relation", "cosine", "mean"))
    with Image.open(paths[0]) as im:
        assert im.size == (84, 84) and im.mode == "RGB"
