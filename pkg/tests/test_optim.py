import math

import numpy as np
import pytest

from fairprune.fair_loss import make_loss
from fairprune.models import Conv, GlobalAvgPool, ModelSpec, SoftmaxHead, build_model, predict, preset
from fairprune.optim import AdamW, LRSchedule, TrainConfig, loss_and_grads, train
from fairprune.prune_graph import build_dependency_graph, mask_from_removed


def _toy(rng, n=64):
    """Two classes separable by mean brightness."""
    y = np.arange(n) % 2
    x = 0.1 * rng.normal(size=(n, 1, 8, 8)) + np.where(y == 1, 1.0, -1.0)[:, None, None, None]
    return x, y


def _small_spec():
    return ModelSpec((Conv(4, 3, 1, 1), GlobalAvgPool(), SoftmaxHead(2)), (1, 8, 8))


class TestAdamW:
    def test_zero_lr_leaves_params_bit_identical(self, rng):
        p = {"w": rng.normal(size=(3, 4))}
        before = p["w"].copy()
        opt = AdamW(weight_decay=0.1)
        for _ in range(5):
            opt.step(p, {"w": rng.normal(size=(3, 4))}, lr=0.0)
        np.testing.assert_array_equal(p["w"], before)

    def test_decoupled_decay_factor(self):
        p = {"w": np.full(3, 2.0)}
        AdamW(weight_decay=0.5).step(p, {"w": np.zeros(3)}, lr=0.1)
        np.testing.assert_allclose(p["w"], 2.0 * (1 - 0.1 * 0.5))

    def test_first_step_moves_by_lr(self):
        p = {"w": np.zeros(2)}
        AdamW().step(p, {"w": np.array([3.0, -0.5])}, lr=0.01)
        np.testing.assert_allclose(p["w"], [-0.01, 0.01], rtol=1e-6)

    def test_missing_grad_treated_as_zero(self):
        p = {"w": np.ones(2)}
        AdamW().step(p, {}, lr=0.1)
        np.testing.assert_array_equal(p["w"], 1.0)


class TestSchedule:
    def test_cosine_endpoints(self):
        s = LRSchedule("cosine", 0.2, 10)
        assert s.lr(0) == 0.2
        assert s.lr(10) == pytest.approx(0.0, abs=1e-18)
        assert s.lr(5) == pytest.approx(0.1)

    def test_constant(self):
        assert LRSchedule("constant", 0.3, 10).lr(7) == 0.3

    def test_unknown(self):
        with pytest.raises(ValueError):
            LRSchedule("step")


class TestTrain:
    def test_separable_toy_reaches_full_accuracy(self, rng):
        x, y = _toy(rng)
        state = build_model(_small_spec(), 0)
        out = train(state, x, make_loss("ce", y, 2), TrainConfig(lr=0.05, epochs=20, batch_size=16))
        assert (predict(out, x)[1] == y).mean() == 1.0

    def test_deterministic(self, rng):
        x, y = _toy(rng)
        cfg = TrainConfig(lr=0.01, epochs=2, batch_size=16, seed=3)
        a = train(build_model(_small_spec(), 0), x, make_loss("ce", y, 2), cfg)
        b = train(build_model(_small_spec(), 0), x, make_loss("ce", y, 2), cfg)
        assert a.equals(b)

    def test_does_not_mutate_input(self, rng):
        x, y = _toy(rng)
        state = build_model(_small_spec(), 0)
        before = state.copy()
        train(state, x, make_loss("ce", y, 2), TrainConfig(lr=0.01, epochs=1))
        assert state.equals(before)

    def test_freeze_epochs_only_move_head(self, rng):
        x, y = _toy(rng)
        state = build_model(_small_spec(), 0)
        out = train(state, x, make_loss("ce", y, 2), TrainConfig(lr=0.01, epochs=2, freeze_epochs=2))
        np.testing.assert_array_equal(out.params["conv0"]["weight"], state.params["conv0"]["weight"])
        assert not np.array_equal(out.params["head"]["weight"], state.params["head"]["weight"])

    def test_mask_keeps_removed_filters_zero(self, rng):
        x = rng.normal(size=(32, 1, 16, 16))
        y = np.arange(32) % 2
        state = build_model(preset("mini-plain"), 0)
        g = build_dependency_graph(state.spec)
        mask = mask_from_removed(g, [g.group_of("conv1", 2).index])
        out = train(state, x, make_loss("ce", y, 2), TrainConfig(lr=0.01, epochs=1, batch_size=16), mask=mask, graph=g)
        assert not out.params["conv1"]["weight"][2].any()
        assert not out.params["conv2"]["weight"][:, 2].any()

    def test_val_selection_returns_best_epoch(self, rng):
        x, y = _toy(rng)
        loss = make_loss("ce", y, 2)
        seen = []
        out = train(
            build_model(_small_spec(), 0), x, loss, TrainConfig(lr=0.05, epochs=4, batch_size=16),
            val_idx=np.arange(16), on_epoch=lambda e, s: seen.append(s.copy()),
        )
        assert any(out.equals(s) for s in seen)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            train(build_model(_small_spec(), 0), np.zeros((0, 1, 8, 8)), None, TrainConfig(), train_idx=[])

    def test_loss_is_finite_and_grads_cover_params(self, rng):
        x, y = _toy(rng, 8)
        state = build_model(_small_spec(), 0)
        value, grads, _, _ = loss_and_grads(state, x, np.arange(8), make_loss("ce", y, 2))
        assert math.isfinite(value)
        assert set(grads) == set(state.flat())
