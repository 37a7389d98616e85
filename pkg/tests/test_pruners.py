import numpy as np
import pytest

from fairprune import tensor as T
from fairprune.fair_loss import make_loss
from fairprune.models import Conv, GlobalAvgPool, ModelSpec, SoftmaxHead, as_tensors, build_model, preset, run
from fairprune.prune_graph import build_dependency_graph, count_flops, validate_mask
from fairprune.pruners import (
    AutoBotConfig,
    TargetUnreachable,
    TaylorConfig,
    autobot_prune,
    gated_flops,
    random_prune,
    raw_taylor_scores,
    taylor_importance,
    taylor_prune,
)
from fairprune.tensor import Tape, Tensor
from toys import SIGNAL_FILTER, enumerate_best_kept, planted_toy, toy_loss


def _kept_filters(mask):
    return np.flatnonzero(mask["conv0"]).tolist()


def _feature_grads(state, x, loss, gates=None):
    params = as_tensors(state, requires_grad=True)
    with Tape() as tape:
        trace = run(state.spec, params, x, gates)
        value = loss(trace.probs, np.arange(len(x)))
    grads = tape.backward(value)
    return trace, {k: grads[t] for k, t in trace.feature_maps.items()}


class TestPlantedToy:
    def test_oracle_picks_signal_filter(self):
        for seed in range(3):
            state, x, y = planted_toy(seed)
            ranked = enumerate_best_kept(state, x, y, keep=1)
            assert ranked[0][1] == (SIGNAL_FILTER,)
            best_pairs = enumerate_best_kept(state, x, y, keep=2)
            assert SIGNAL_FILTER in best_pairs[0][1]

    @pytest.mark.parametrize("method", ["taylor", "autobot"])
    def test_signal_filter_survives(self, method):
        kept = 0
        for seed in range(3):
            state, x, y = planted_toy(seed)
            target = 0.4 * count_flops(state.spec).total
            if method == "taylor":
                res = taylor_prune(state, x, toy_loss(y), TaylorConfig(batch_size=32, seed=seed), target)
            else:
                res = autobot_prune(state, x, toy_loss(y), AutoBotConfig(batch_size=32, iterations=100, seed=seed), target)
            assert count_flops(state.spec, res.mask).total <= target
            kept += SIGNAL_FILTER in _kept_filters(res.mask)
        assert kept >= 2


class TestAutoBot:
    def test_target_at_original_keeps_all(self):
        state, x, y = planted_toy(0)
        res = autobot_prune(state, x, toy_loss(y), AutoBotConfig(), count_flops(state.spec).total)
        assert all(m.all() for m in res.mask.values())

    def test_weights_frozen(self):
        state, x, y = planted_toy(0)
        before = state.copy()
        autobot_prune(state, x, toy_loss(y), AutoBotConfig(iterations=5), 0.5 * count_flops(state.spec).total)
        assert state.equals(before)

    @pytest.mark.parametrize("name", ["mini-plain", "mini-res"])
    def test_gated_flops_at_saturation(self, name):
        spec = preset(name)
        g = build_dependency_graph(spec)
        gates = Tensor(np.full(len(g.groups), 1.0 - 1e-6))
        assert gated_flops(g, gates).item() == pytest.approx(count_flops(spec).total, rel=1e-3)

    def test_doubling_beta_does_not_widen_gap(self):
        gaps = {1.0: [], 2.0: []}
        for seed in range(3):
            state, x, y = planted_toy(seed)
            target = 0.6 * count_flops(state.spec).total
            for beta in gaps:
                res = autobot_prune(state, x, toy_loss(y), AutoBotConfig(beta=beta, iterations=30, seed=seed), target)
                gaps[beta].append(abs(count_flops(state.spec, res.mask).total - target))
        assert np.median(gaps[2.0]) <= np.median(gaps[1.0])

    def test_deterministic(self):
        state, x, y = planted_toy(1)
        target = 0.5 * count_flops(state.spec).total
        cfg = AutoBotConfig(iterations=10, seed=4)
        a = autobot_prune(state, x, toy_loss(y), cfg, target)
        b = autobot_prune(state, x, toy_loss(y), cfg, target)
        np.testing.assert_array_equal(a.gates, b.gates)


class TestTaylorScores:
    def test_zero_activation_scores_zero(self, rng):
        fmap = np.zeros((2, 3, 4, 4))
        fmap[:, 1:] = rng.random((2, 2, 4, 4))
        raw = raw_taylor_scores({"c": fmap}, {"c": rng.normal(size=fmap.shape)})
        assert raw["c"][0] == 0.0

    def test_single_filter_normalizes_to_one(self, rng):
        spec = ModelSpec((Conv(1), GlobalAvgPool(), SoftmaxHead(2)), (1, 4, 4))
        g = build_dependency_graph(spec)
        scores = taylor_importance(None, None, g, raw={"conv0": np.array([0.37])})
        assert scores.tolist() == [1.0]

    def test_zero_norm_layer_stays_zero(self):
        spec = ModelSpec((Conv(3), GlobalAvgPool(), SoftmaxHead(2)), (1, 4, 4))
        scores = taylor_importance(None, None, build_dependency_graph(spec), raw={"conv0": np.zeros(3)})
        assert not scores.any()

    def test_batch_permutation_invariance(self, rng):
        state = build_model(preset("mini-plain"), 0)
        x = rng.normal(size=(8, 1, 16, 16))
        y = rng.integers(0, 2, 8)
        perm = rng.permutation(8)
        t1, g1 = _feature_grads(state, x, make_loss("ce", y, 2))
        t2, g2 = _feature_grads(state, x[perm], make_loss("ce", y[perm], 2))
        a, b = raw_taylor_scores(t1.feature_maps, g1), raw_taylor_scores(t2.feature_maps, g2)
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-10)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            raw_taylor_scores({"c": np.zeros((2, 3, 4, 4))}, {"c": np.zeros((2, 2, 4, 4))})

    def test_equals_gate_derivative(self, rng):
        state = build_model(preset("mini-plain"), 1)
        x = rng.normal(size=(4, 1, 16, 16))
        loss = make_loss("ce", rng.integers(0, 2, 4), 2)
        trace, grads = _feature_grads(state, x, loss)
        raw = raw_taylor_scores(trace.feature_maps, grads)
        params = as_tensors(state)
        eps = 1e-4
        for f in (0, 5):
            def value(delta):
                g = np.ones(8)
                g[f] += delta
                return loss(run(state.spec, params, x, {"conv0": Tensor(g)}).probs, np.arange(4)).item()

            fd = (value(eps) - value(-eps)) / (2 * eps)
            assert raw["conv0"][f] == pytest.approx(abs(fd), rel=1e-3, abs=1e-12)


class TestTaylorPrune:
    def test_schedule_arithmetic(self):
        spec = ModelSpec((Conv(8, 3, 1, 1), GlobalAvgPool(), SoftmaxHead(2)), (1, 8, 8))
        state = build_model(spec, 0)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 1, 8, 8))
        y = np.arange(64) % 2
        full = count_flops(spec).total
        target = full * 2 / 8 + 1  # six removals of eight filters
        res = taylor_prune(state, x, make_loss("ce", y, 2), TaylorConfig(prune_frequency=5, filters_per_prune=1), target)
        assert res.batches == 30
        assert int(res.mask["conv0"].sum()) == 2

    def test_target_at_original(self):
        state, x, y = planted_toy(0)
        res = taylor_prune(state, x, toy_loss(y), TaylorConfig(), count_flops(state.spec).total)
        assert res.batches == 0 and res.mask["conv0"].all()

    def test_removed_filters_zeroed_in_returned_state(self):
        state, x, y = planted_toy(0)
        res = taylor_prune(state, x, toy_loss(y), TaylorConfig(seed=0), 0.5 * count_flops(state.spec).total)
        for f in np.flatnonzero(~res.mask["conv0"]):
            assert not res.state.params["conv0"]["weight"][f].any()


class TestRandomPrune:
    @pytest.mark.parametrize("name", ["mini-plain", "mini-res"])
    def test_stopping_rule(self, name):
        spec = preset(name)
        g = build_dependency_graph(spec)
        full = count_flops(spec).total
        for seed in range(5):
            target = full / 3
            res = random_prune(spec, g, target, seed)
            validate_mask(g, res.mask)
            achieved = count_flops(spec, res.mask, g).total
            assert achieved <= target
            assert res.log[-2]["flops"] > target  # the last removal was needed

    def test_same_seed_same_mask(self):
        spec = preset("mini-res")
        a = random_prune(spec, None, count_flops(spec).total / 2, 9)
        b = random_prune(spec, None, count_flops(spec).total / 2, 9)
        assert all(np.array_equal(a.mask[k], b.mask[k]) for k in a.mask)

    def test_target_at_original(self):
        spec = preset("mini-plain")
        res = random_prune(spec, None, count_flops(spec).total, 0)
        assert all(m.all() for m in res.mask.values())

    def test_unreachable_names_layer(self):
        spec = preset("mini-plain")
        with pytest.raises(TargetUnreachable, match="binding layer conv"):
            random_prune(spec, None, 10.0, 0)
