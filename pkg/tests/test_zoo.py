import numpy as np
import pytest

from oracles import naive_conv
from xtransfer import nn, zoo
from xtransfer.errors import GenerationError, SegmentationError, ShapeError
from xtransfer.stats import mmc, silhouette
from xtransfer.zoo import ResourceCost, TensorShape, resource_of, segment_model


def test_tensor_shape_validation():
    s = TensorShape(3, 1, 128)
    assert s.size == 384 and s.hw == (1, 128)
    with pytest.raises(ShapeError):
        TensorShape(0, 4, 4)
    with pytest.raises(ShapeError):
        TensorShape(2.5, 4, 4)


def test_plain_spec_one_unit_per_layer():
    m = segment_model(zoo.plain_spec((3, 8, 8)))
    assert m.depth == 4
    assert all(u.kind == "conv_block" for u in m.lunits)


def test_resnet18_has_nine_blocks():
    m = segment_model(zoo.resnet18_spec())
    assert m.depth == 9
    assert [u.kind for u in m.lunits].count("residual_block") == 8
    m1 = segment_model(zoo.resnet18_spec((6, 1, 128), one_d=True))
    assert m1.depth == 9


def test_broken_chain_raises():
    spec = {"input_shape": [3, 8, 8], "layers": [
        {"kind": "conv", "out_channels": 4, "kernel": 3, "padding": 1, "out_shape": [4, 8, 8]},
        {"kind": "conv", "out_channels": 4, "kernel": 3, "in_shape": [5, 8, 8]},
    ]}
    with pytest.raises(SegmentationError):
        segment_model(spec)


def test_residual_block_is_atomic():
    m = segment_model(zoo.resnet18_spec(width=4))
    blk = m.lunits[3]
    assert blk.residual and len(blk.main_ops) == 2
    # the shortcut conv of a downsampling block lives in the same unit
    assert blk.shortcut_op is not None


def test_identity_dense_unit():
    spec = {"input_shape": [4, 1, 1], "layers": [{"kind": "dense", "out_features": 4},
                                                 {"kind": "dense", "out_features": 4}]}
    m = segment_model(spec, params=[(np.eye(4), np.zeros(4)), (np.eye(4), np.zeros(4))])
    x = np.random.default_rng(0).normal(size=(5, 4, 1, 1))
    assert np.array_equal(zoo.forward_lunit(m.lunits[0], x), x)


def test_zero_conv_outputs_bias():
    spec = {"input_shape": [2, 5, 5], "layers": [{"kind": "conv", "out_channels": 3, "kernel": 3},
                                                 {"kind": "conv", "out_channels": 3, "kernel": 1}]}
    b = np.array([0.5, 0.0, 2.0])
    m = segment_model(spec, params=[(np.zeros((3, 2, 3, 3)), b), (np.zeros((3, 3, 1, 1)), np.zeros(3))])
    out = zoo.forward_lunit(m.lunits[0], np.random.default_rng(1).normal(size=(2, 2, 5, 5)))
    assert np.array_equal(out, np.broadcast_to(b[None, :, None, None], out.shape))


@pytest.mark.parametrize("stride,padding", [((1, 1), (0, 0)), ((2, 2), (1, 1)), ((1, 2), (0, 1))])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y, _ = nn.conv2d_forward(x, w, b, stride, padding)
    assert np.allclose(y, naive_conv(x, w, b, stride, padding), atol=1e-6)


def test_forward_shape_mismatch():
    m = segment_model(zoo.plain_spec((3, 8, 8)))
    with pytest.raises(ShapeError):
        zoo.forward_lunit(m.lunits[0], np.zeros((1, 2, 8, 8)))


def test_resource_counts():
    spec = {"input_shape": [3, 4, 4], "layers": [{"kind": "conv", "out_channels": 8, "kernel": 1},
                                                 {"kind": "dense", "out_features": 10},
                                                 {"kind": "dense", "out_features": 10}]}
    m = segment_model(spec)
    assert resource_of(m.lunits[0]).flops == 2 * (3 * 8) * 16 + 8 * 16
    assert resource_of(m.lunits[2]).params == 110
    total = sum((resource_of(u) for u in m.lunits), ResourceCost())
    assert total == m.cost
    assert resource_of(m.lunits[0]) + resource_of(m.lunits[1]) == ResourceCost(
        resource_of(m.lunits[0]).flops + resource_of(m.lunits[1]).flops,
        resource_of(m.lunits[0]).params + resource_of(m.lunits[1]).params)


def test_unit_params_are_read_only(small_source):
    w = small_source.lunits[0].params[0][0]
    with pytest.raises(ValueError):
        w[0, 0, 0, 0] = 1.0


def test_generation_meets_floor_and_is_deterministic():
    a = zoo.generate_synthetic_source(1, 8, (3, 32, 32), 4)
    b = zoo.generate_synthetic_source(1, 8, (3, 32, 32), 4)
    feats = mmc(a.forward(a.source_exemplars)[-1])
    assert silhouette(feats, a.exemplar_labels)[0] >= 0.3
    assert a.param_hash() == b.param_hash()
    assert np.array_equal(a.source_exemplars, b.source_exemplars)
    # weights are float32-representable
    w = a.lunits[1].params[0][0]
    assert np.array_equal(w, w.astype(np.float32).astype(np.float64))


def test_generation_preconditions():
    with pytest.raises(GenerationError):
        zoo.generate_synthetic_source(0, 1, (3, 16, 16), 4)
    with pytest.raises(GenerationError) as e:
        zoo.generate_synthetic_source(0, 6, (3, 16, 16), 4, silhouette_floor=1.5, max_rounds=1, epochs=1)
    assert e.value.score is not None


def test_shapes_chain_through_model(small_source):
    outs = small_source.forward(small_source.source_exemplars)
    for u, o in zip(small_source.lunits, outs):
        assert o.shape[1:] == u.out_shape.as_tuple()
