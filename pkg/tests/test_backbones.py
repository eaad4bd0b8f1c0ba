import numpy as np
import pytest

from bsnet.autodiff import ShapeError
from bsnet.backbones import (
    BACKBONES,
    Backbone,
    backbone_spec,
    embed,
    from_local_descriptors,
    local_descriptors,
)


@pytest.mark.parametrize("kind,expected", [("conv4", (64, 19, 19)), ("conv6", (64, 19, 19)),
                                           ("conv8", (64, 19, 19)), ("conv64f", (64, 21, 21))])
def test_output_shape_contract(kind, expected):
    spec = backbone_spec(kind)
    assert spec.output_shape() == expected
    out = embed(Backbone(spec, np.random.default_rng(0)), np.zeros((1, 3, 84, 84)), "eval")
    assert out.shape == (1,) + expected


def test_block_counts():
    assert [len(BACKBONES[k].blocks) for k in ("conv4", "conv6", "conv8", "conv64f")] == [4, 6, 8, 4]
    assert all(b.slope == 0.2 for b in BACKBONES["conv64f"].blocks)


def test_wrong_input_shape_names_backbone():
    bb = Backbone(backbone_spec("conv4"), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="conv4"):
        bb(np.zeros((1, 3, 32, 32)))


def test_unknown_backbone():
    with pytest.raises(ValueError):
        backbone_spec("resnet18")


def test_zero_image_first_conv_is_zero():
    bb = Backbone(backbone_spec("conv4"), np.random.default_rng(0)).eval()
    first = bb.block[0].conv(np.zeros((1, 3, 84, 84)))
    np.testing.assert_array_equal(first.data, 0.0)
    assert np.all(np.isfinite(bb(np.zeros((1, 3, 84, 84))).data))


def test_initialization_statistics():
    bb = Backbone(backbone_spec("conv4"), np.random.default_rng(0))
    w = bb.block[1].conv.weight.data
    assert abs(w.std() - np.sqrt(2.0 / (64 * 9))) < 0.01 * np.sqrt(2.0 / (64 * 9)) * 10
    np.testing.assert_array_equal(bb.block[1].conv.bias.data, 0.0)
    np.testing.assert_array_equal(bb.block[1].bn.gamma.data, 1.0)


def test_eval_embed_pure_and_batch_equivariant(rng):
    bb = Backbone(backbone_spec("conv4"), np.random.default_rng(1))
    x = rng.normal(size=(3, 3, 84, 84))
    a = embed(bb, x, "eval").data
    b = embed(bb, x, "eval").data
    np.testing.assert_array_equal(a, b)
    perm = [2, 0, 1]
    np.testing.assert_allclose(embed(bb, x[perm], "eval").data, a[perm], rtol=1e-12, atol=1e-12)


def test_train_embed_batch_equivariant(rng):
    bb = Backbone(backbone_spec("conv4"), np.random.default_rng(1))
    x = rng.normal(size=(3, 3, 84, 84))
    a = embed(bb, x, "train").data
    perm = [1, 2, 0]
    np.testing.assert_allclose(embed(bb, x[perm], "train").data, a[perm], rtol=1e-9, atol=1e-9)


def test_local_descriptors_conv64f_count():
    d = local_descriptors(np.zeros((1, 64, 21, 21)))
    assert d.shape == (1, 441, 64)


def test_local_descriptors_single_position(rng):
    f = rng.normal(size=(1, 64, 1, 1))
    d = local_descriptors(f)
    np.testing.assert_array_equal(d.data[0, 0], f[0, :, 0, 0])


def test_local_descriptors_row_major_and_round_trip(rng):
    f = rng.normal(size=(2, 5, 3, 4))
    d = local_descriptors(f).data
    np.testing.assert_array_equal(d[1, 2 * 4 + 3], f[1, :, 2, 3])
    np.testing.assert_array_equal(from_local_descriptors(d, 3, 4).data, f)
