import numpy as np
import pytest

from fairprune import tensor as T
from fairprune.models import (
    Conv,
    GlobalAvgPool,
    ModelSpec,
    ResidualBlock,
    SoftmaxHead,
    SpecError,
    build_model,
    forward,
    load_state,
    predict,
    preset,
    save_state,
)
from fairprune.tensor import ShapeError, Tensor
from oracles import naive_conv2d


def _enumerated_params(state):
    return sum(a.size for v in state.params.values() for a in v.values())


class TestSpec:
    def test_single_conv_layer_parameter_count(self):
        spec = ModelSpec((Conv(8, 3, 1, 1), GlobalAvgPool(), SoftmaxHead(2)), (1, 16, 16))
        state = build_model(spec, 0)
        assert state.params["conv0"]["weight"].shape == (8, 1, 3, 3)
        assert sum(a.size for a in state.params["conv0"].values()) == 80

    @pytest.mark.parametrize("name", ["mini-plain", "mini-res"])
    def test_analytic_count_matches_enumeration(self, name):
        spec = preset(name)
        assert spec.param_count() == _enumerated_params(build_model(spec, 3))

    def test_head_must_be_last(self):
        with pytest.raises(SpecError):
            ModelSpec((Conv(4), SoftmaxHead(2), GlobalAvgPool()))

    def test_needs_exactly_one_head(self):
        with pytest.raises(SpecError):
            ModelSpec((Conv(4), GlobalAvgPool()))

    def test_bad_shape_chain_names_layer(self):
        with pytest.raises(SpecError, match="conv1"):
            ModelSpec((Conv(4, 3, 1, 0), Conv(4, 9, 1, 0), GlobalAvgPool(), SoftmaxHead(2)), (1, 8, 8))

    def test_round_trip_dict(self):
        for name in ("mini-plain", "mini-res"):
            spec = preset(name)
            again = ModelSpec.from_dict(spec.to_dict())
            assert again.to_dict() == spec.to_dict()
            assert again.plan == spec.plan

    def test_residual_projection_added_when_channels_change(self):
        ids = [s.id for s in preset("mini-res").conv_layers()]
        assert "res2.proj" in ids
        assert "res1.proj" not in ids


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = build_model(preset("mini-res"), 7), build_model(preset("mini-res"), 7)
        assert a.equals(b)

    def test_different_seeds_differ(self):
        assert not build_model(preset("mini-plain"), 1).equals(build_model(preset("mini-plain"), 2))

    def test_he_scale_and_zero_bias(self):
        state = build_model(ModelSpec((Conv(400, 3, 1, 1), GlobalAvgPool(), SoftmaxHead(2)), (4, 8, 8)), 0)
        w = state.params["conv0"]["weight"]
        assert w.std() == pytest.approx(np.sqrt(2.0 / 36), rel=0.05)
        assert not state.params["conv0"]["bias"].any()


class TestForward:
    def test_rows_sum_to_one(self, rng):
        state = build_model(preset("mini-res"), 0)
        p = forward(state, rng.normal(size=(5, 1, 16, 16)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_pure(self, rng):
        state = build_model(preset("mini-plain"), 0)
        x = rng.normal(size=(3, 1, 16, 16))
        np.testing.assert_array_equal(forward(state, x), forward(state, x))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward(build_model(preset("mini-plain"), 0), np.zeros((1, 1, 8, 8)))

    def test_zeroed_last_conv_gives_constant_output(self, rng):
        state = build_model(preset("mini-plain"), 0)
        for name in state.params["conv2"]:
            state.params["conv2"][name][...] = 0.0
        p = forward(state, rng.normal(size=(2, 1, 16, 16)))
        np.testing.assert_array_equal(p[0], p[1])

    def test_trace_matches_replayed_prefix(self, rng):
        # replay conv0 -> affine -> relu -> conv1 by hand with the naive loop oracle
        state = build_model(preset("mini-plain"), 4)
        x = rng.normal(size=(2, 1, 16, 16))
        _, trace = forward(state, x, record_trace=True)
        assert set(trace.feature_maps) == {"conv0", "conv1", "conv2"}
        h = x
        for layer, stride in (("conv0", 1), ("conv1", 2)):
            p = state.params[layer]
            h = naive_conv2d(h, p["weight"], p["bias"], stride, 1)
            h = np.maximum(h * p["scale"][None, :, None, None] + p["shift"][None, :, None, None], 0.0)
            np.testing.assert_allclose(trace.feature_maps[layer].data, h, rtol=0, atol=1e-12)

    def test_zero_residual_block_is_identity(self, rng):
        spec = ModelSpec((ResidualBlock(Conv(3), Conv(3)), GlobalAvgPool(), SoftmaxHead(2)), (3, 6, 6))
        state = build_model(spec, 0)
        for name in ("res0.conv1", "res0.conv2"):
            for arr in state.params[name].values():
                arr[...] = 0.0
        x = np.abs(rng.normal(size=(2, 3, 6, 6)))
        _, trace = forward(state, x, record_trace=True)
        # the block output feeds the pool; recompute the pool from the input
        pooled = x.mean(axis=(2, 3))
        p = state.params["head"]
        logits = pooled @ p["weight"].T + p["bias"]
        np.testing.assert_allclose(trace.logits.data, logits, atol=1e-12)


class TestPredict:
    def test_argmax_ties_go_low(self):
        probs = np.array([[0.7, 0.3], [0.5, 0.5]])
        assert probs.argmax(axis=1).tolist() == [0, 0]

    def test_agrees_with_forward(self, rng):
        state = build_model(preset("mini-plain"), 0)
        x = rng.normal(size=(300, 1, 16, 16))
        probs, pred = predict(state, x, batch_size=64)
        np.testing.assert_array_equal(probs[:10], forward(state, x[:10]))
        np.testing.assert_array_equal(pred, probs.argmax(axis=1))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            predict(build_model(preset("mini-plain"), 0), np.zeros((0, 1, 16, 16)))


class TestSerialization:
    def test_save_load_round_trip(self, tmp_path):
        state = build_model(preset("mini-res"), 5)
        save_state(state, tmp_path / "m.npz")
        again = load_state(tmp_path / "m.npz")
        assert again.equals(state)
        assert again.spec.to_dict() == state.spec.to_dict()
        assert again.seed == 5
