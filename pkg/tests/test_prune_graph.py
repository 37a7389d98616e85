import numpy as np
import pytest

from fairprune.models import Conv, GlobalAvgPool, ModelSpec, SoftmaxHead, as_tensors, build_model, forward, preset, run
from fairprune.prune_graph import (
    MaskError,
    build_dependency_graph,
    count_flops,
    full_mask,
    mask_from_removed,
    pseudo_prune,
    speedup,
    structural_prune,
)
from maskgen import random_valid_mask
from oracles import conv_macs, spec_macs


class TestDependencyGraph:
    def test_plain_groups_are_singletons(self):
        g = build_dependency_graph(preset("mini-plain"))
        assert all(len(grp.members) == 1 for grp in g.groups)
        assert len(g.groups) == 8 + 16 + 16

    def test_mini_res_hand_traced(self):
        # conv0 feeds the identity skip of res1, so conv0 and res1.conv2 share
        # one space; res2 joins its inner conv with the 1x1 projection.
        g = build_dependency_graph(preset("mini-res"))
        assert [tuple(s) for s in g.spaces] == [
            ("conv0", "res1.conv2"),
            ("res1.conv1",),
            ("res2.conv1",),
            ("res2.conv2", "res2.proj"),
        ]
        assert len(g.groups) == 8 + 8 + 16 + 16
        assert g.group_of("res1.conv2", 3).members == (("conv0", 3), ("res1.conv2", 3))

    def test_every_filter_in_exactly_one_group(self):
        spec = preset("mini-res")
        g = build_dependency_graph(spec)
        seen = [m for grp in g.groups for m in grp.members]
        expected = [(c.id, f) for c in spec.conv_layers() for f in range(c.filters)]
        assert sorted(seen) == sorted(expected)

    def test_deterministic(self):
        a = build_dependency_graph(preset("mini-res"))
        b = build_dependency_graph(preset("mini-res"))
        assert a.groups == b.groups


class TestMasks:
    def test_split_group_rejected(self):
        spec = preset("mini-res")
        g = build_dependency_graph(spec)
        mask = full_mask(spec)
        mask["conv0"][0] = False  # res1.conv2[0] still kept
        with pytest.raises(MaskError, match="splits coupled group"):
            pseudo_prune(build_model(spec, 0), mask, g)

    def test_empty_layer_rejected(self):
        spec = preset("mini-plain")
        mask = full_mask(spec)
        mask["conv1"][:] = False
        with pytest.raises(MaskError, match="fewer than 1"):
            structural_prune(build_model(spec, 0), mask)


class TestPseudoPrune:
    def test_all_keep_is_identity(self):
        state = build_model(preset("mini-res"), 0)
        assert pseudo_prune(state, full_mask(state.spec)).equals(state)

    def test_removed_feature_map_is_zero(self, rng):
        state = build_model(preset("mini-plain"), 0)
        g = build_dependency_graph(state.spec)
        mask = mask_from_removed(g, [g.group_of("conv1", 5).index])
        _, trace = forward(pseudo_prune(state, mask, g), rng.normal(size=(4, 1, 16, 16)), record_trace=True)
        assert not trace.feature_maps["conv1"].data[:, 5].any()

    def test_does_not_mutate_input(self):
        state = build_model(preset("mini-plain"), 0)
        before = state.copy()
        g = build_dependency_graph(state.spec)
        pseudo_prune(state, mask_from_removed(g, [0, 1]), g)
        assert state.equals(before)


class TestStructuralPrune:
    def test_all_keep_unchanged(self):
        state = build_model(preset("mini-res"), 2)
        spec2, state2 = structural_prune(state, full_mask(state.spec))
        assert spec2.to_dict() == state.spec.to_dict()
        assert state2.equals(state)

    def test_shapes_after_removing_half_a_layer(self):
        state = build_model(preset("mini-plain"), 0)
        g = build_dependency_graph(state.spec)
        mask = mask_from_removed(g, [g.group_of("conv0", f).index for f in range(4)])
        _, new = structural_prune(state, mask, g)
        assert new.params["conv0"]["weight"].shape == (4, 1, 3, 3)
        assert new.params["conv1"]["weight"].shape == (16, 4, 3, 3)

    @pytest.mark.parametrize("name", ["mini-plain", "mini-res"])
    def test_matches_pseudo_prune_on_random_masks(self, name, rng):
        state = build_model(preset(name), 1)
        g = build_dependency_graph(state.spec)
        for _ in range(10):
            mask = random_valid_mask(g, rng)
            x = rng.normal(size=(16, 1, 16, 16))
            _, rebuilt = structural_prune(state, mask, g)
            np.testing.assert_allclose(forward(rebuilt, x), forward(pseudo_prune(state, mask, g), x), atol=1e-6, rtol=0)
            assert count_flops(rebuilt.spec).total == count_flops(state.spec, mask, g).total

    def test_mini_res_one_coupled_group(self, rng):
        state = build_model(preset("mini-res"), 3)
        g = build_dependency_graph(state.spec)
        mask = mask_from_removed(g, [g.group_of("res2.proj", 7).index])
        spec2, rebuilt = structural_prune(state, mask, g)
        assert rebuilt.params["res2.proj"]["weight"].shape[0] == 15
        assert rebuilt.params["res2.conv2"]["weight"].shape[0] == 15
        assert rebuilt.params["head"]["weight"].shape == (2, 15)
        x = rng.normal(size=(16, 1, 16, 16))
        pseudo = pseudo_prune(state, mask, g)
        a = run(spec2, as_tensors(rebuilt), x).logits.data
        b = run(state.spec, as_tensors(pseudo), x).logits.data
        np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


class TestFlops:
    def test_conv_formula(self):
        spec = ModelSpec((Conv(8, 3, 1, 1), GlobalAvgPool(), SoftmaxHead(2)), (3, 16, 16))
        report = count_flops(spec)
        assert report.per_layer["conv0"] == 55_296 == conv_macs(3, 3, 8, 16, 16)
        assert report.total == sum(report.per_layer.values())

    @pytest.mark.parametrize("name", ["mini-plain", "mini-res"])
    def test_matches_independent_count(self, name):
        spec = preset(name)
        assert count_flops(spec).total == spec_macs(spec)

    def test_half_filters_halve_conv_macs(self):
        spec = ModelSpec((Conv(8, 3, 1, 1), GlobalAvgPool(), SoftmaxHead(2)), (1, 16, 16))
        g = build_dependency_graph(spec)
        mask = mask_from_removed(g, [0, 2, 4, 6])
        assert count_flops(spec, mask, g).per_layer["conv0"] * 2 == count_flops(spec).per_layer["conv0"]

    def test_large_scale_ratio(self):
        assert speedup(1508.5e6, 107.1e6) == pytest.approx(14.085, abs=1e-3)

    def test_identical_reports(self):
        r = count_flops(preset("mini-plain"))
        assert speedup(r, r) == 1.0

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            speedup(10.0, 0.0)

    def test_monotone_in_removals(self, rng):
        spec = preset("mini-res")
        g = build_dependency_graph(spec)
        base = count_flops(spec)
        removed, last = [], 1.0
        order = [grp.index for grp in g.groups if grp.prunable]
        rng.shuffle(order)
        for gi in order:
            mask = mask_from_removed(g, removed + [gi])
            if min(np.count_nonzero(m) for m in mask.values()) < 1:
                continue  # would empty a layer
            removed.append(gi)
            s = speedup(base, count_flops(spec, mask, g))
            assert s >= last
            last = s
