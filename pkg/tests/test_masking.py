"""Tests for patchification, mask plans and mask statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mvmim import tensor as T
from mvmim.errors import ConfigError, DimensionError
from mvmim.masking import (REFERENCE, MaskConfig, MaskPlan, PatchGrid, apply_mask, mask_statistics, patchify,
                           round_half_up, sample_block_mask, sample_mask_plan, unpatchify)

GRID_196 = PatchGrid(224, 224, 16)
GRID_64 = PatchGrid(64, 64, 8)


def only(kind, **kw):
    mix = {"random": 0.0, "rectangle": 0.0, "ellipse": 0.0}
    mix[kind] = 1.0
    return MaskConfig(strategy_mix=mix, **kw)


def components(mask_row, grid):
    _, n = ndimage.label(mask_row.reshape(grid.grid_h, grid.grid_w), structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    return n


class TestPatchGrid:
    def test_counts(self):
        g = PatchGrid(16, 16, 8)
        assert (g.grid_h, g.grid_w, g.n_patches, g.patch_dim) == (2, 2, 4, 192)

    def test_non_divisible(self):
        with pytest.raises(ConfigError):
            PatchGrid(30, 32, 8)

    def test_index_bijection(self):
        g = PatchGrid(24, 40, 8)
        seen = {g.index(*g.row_col(j)) for j in range(g.n_patches)}
        assert seen == set(range(g.n_patches))
        assert g.index(1, 2) == 1 * g.grid_w + 2

    def test_centers(self):
        c = GRID_64.centers()
        assert c[0].tolist() == [3.5, 3.5]
        assert c[GRID_64.index(2, 5)].tolist() == [5 * 8 + 3.5, 2 * 8 + 3.5]


class TestPatchify:
    def test_shape(self):
        assert patchify(np.zeros((16, 16, 3)), 8).shape == (4, 192)

    def test_constant_image_rows_identical(self):
        p = patchify(np.full((16, 16, 3), 0.3), 8)
        assert np.all(p == p[0])

    def test_round_trip_exact(self):
        img = np.random.default_rng(0).random((32, 32, 3))
        assert np.array_equal(unpatchify(patchify(img, 8), PatchGrid(32, 32, 8)), img)

    def test_row_major_rgb_order(self):
        img = np.random.default_rng(1).random((16, 16, 3))
        p = patchify(img, 8)
        np.testing.assert_array_equal(p[1], img[0:8, 8:16].reshape(-1))

    def test_non_divisible_rejected(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((10, 16, 3)), 8)


class TestSampleMaskPlan:
    def test_random_count_196(self):
        plan = sample_mask_plan(only("random", n_reference=0), 3, GRID_196, np.random.default_rng(0))
        assert plan.masked.sum(axis=1).tolist() == [176, 176, 176]

    def test_round_half_up(self):
        assert round_half_up(0.5) == 1 and round_half_up(2.5) == 3 and round_half_up(176.4) == 176

    def test_zero_ratio_identity(self):
        plan = sample_mask_plan(only("random", random_ratio=0.0, n_reference=0), 2, GRID_64, np.random.default_rng(0))
        assert not plan.masked.any()
        tokens = T.as_tensor(np.random.default_rng(2).normal(size=(2, 64, 8)))
        assert np.array_equal(apply_mask(tokens, plan, np.ones(8)).data, tokens.data)

    def test_reference_views_unmasked(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            plan = sample_mask_plan(MaskConfig(n_reference=2), 5, GRID_64, rng)
            assert len(plan.reference_views) == 2
            for v in plan.reference_views:
                assert not plan.masked[v].any() and plan.strategy_used[v] == REFERENCE

    def test_n_reference_must_be_below_views(self):
        with pytest.raises(ConfigError):
            sample_mask_plan(MaskConfig(n_reference=2), 2, GRID_64, np.random.default_rng(0))

    def test_single_view_without_reference(self):
        plan = sample_mask_plan(MaskConfig(n_reference=0), 1, GRID_64, np.random.default_rng(0))
        assert plan.masked.shape == (1, 64) and plan.masked.any()

    def test_bad_mix_rejected(self):
        with pytest.raises(ConfigError):
            MaskConfig(strategy_mix={"random": 0.7, "ellipse": 0.2}).validate()
        with pytest.raises(ConfigError):
            MaskConfig(random_ratio=1.5).validate()

    def test_deterministic(self):
        a = sample_mask_plan(MaskConfig(), 6, GRID_64, np.random.default_rng(99))
        b = sample_mask_plan(MaskConfig(), 6, GRID_64, np.random.default_rng(99))
        assert np.array_equal(a.masked, b.masked) and a.reference_views == b.reference_views
        assert a.strategy_used == b.strategy_used

    @pytest.mark.parametrize("kind", ["rectangle", "ellipse"])
    def test_block_masks_connected_and_in_band(self, kind):
        rng = np.random.default_rng(7)
        for _ in range(300):
            m, used = sample_block_mask(kind, 0.75, GRID_64, rng)
            assert used == kind
            assert abs(m.mean() - 0.75) <= 0.05 + 1e-12
            assert components(m, GRID_64) == 1

    def test_rectangle_is_axis_aligned_box(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            m, _ = sample_block_mask("rectangle", 0.75, GRID_64, rng)
            rows, cols = np.nonzero(m.reshape(8, 8))
            assert m.sum() == (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)

    def test_impossible_band_falls_back_to_random(self):
        tiny = PatchGrid(8, 16, 8)  # 1 x 2 patches: 0.75 is unreachable within 0.05
        m, used = sample_block_mask("rectangle", 0.75, tiny, np.random.default_rng(0), max_attempts=5)
        assert m is None and used == "random"
        plan = sample_mask_plan(only("rectangle", n_reference=0), 1, tiny, np.random.default_rng(0))
        assert plan.strategy_used == ["random"]

    def test_json_round_trip(self):
        plan = sample_mask_plan(MaskConfig(), 4, GRID_64, np.random.default_rng(5))
        back = MaskPlan.from_json(plan.to_json(), 64)
        assert np.array_equal(back.masked, plan.masked) and back.reference_views == plan.reference_views

    def test_permute(self):
        plan = sample_mask_plan(MaskConfig(), 4, GRID_64, np.random.default_rng(5))
        perm = [2, 0, 3, 1]
        p2 = plan.permute(perm)
        for new, old in enumerate(perm):
            assert np.array_equal(p2.masked[new], plan.masked[old])
        assert {perm[v] for v in p2.reference_views} == set(plan.reference_views)

    @settings(max_examples=40, deadline=None)
    @given(V=st.integers(1, 6), n_ref=st.integers(0, 5), seed=st.integers(0, 2**32 - 1),
           ratio=st.floats(0.0, 1.0))
    def test_plan_invariants(self, V, n_ref, seed, ratio):
        n_ref = min(n_ref, V - 1)
        cfg = MaskConfig(random_ratio=ratio, n_reference=n_ref)
        plan = sample_mask_plan(cfg, V, GRID_64, np.random.default_rng(seed))
        assert len(plan.reference_views) == n_ref
        for v, kind in enumerate(plan.strategy_used):
            if kind == REFERENCE:
                assert not plan.masked[v].any()
            elif kind == "random":
                assert plan.masked[v].sum() == round_half_up(ratio * 64)
            else:
                assert components(plan.masked[v], GRID_64) == 1


class TestExchangeability:
    def test_view_position_does_not_bias_masking(self):
        # realized non-reference fraction per view index should agree across positions
        rng = np.random.default_rng(21)
        sums = np.zeros(4)
        counts = np.zeros(4)
        for _ in range(3000):
            plan = sample_mask_plan(MaskConfig(), 4, GRID_64, rng)
            for v in range(4):
                if v not in plan.reference_views:
                    sums[v] += plan.masked[v].mean()
                    counts[v] += 1
        means = sums / counts
        assert np.ptp(means) < 0.01
        assert np.ptp(counts / 3000) < 0.05


class TestApplyMask:
    def test_all_masked_rows_equal_token(self):
        plan = MaskPlan(np.ones((1, 4), dtype=bool), frozenset(), ["random"])
        tok = np.arange(3.0)
        out = apply_mask(np.zeros((1, 4, 3)), plan, tok).data
        assert np.all(out == tok)

    def test_mask_token_grad_sums_masked_positions(self):
        rng = np.random.default_rng(4)
        tokens = T.parameter(rng.normal(size=(2, 6, 3)))
        token = T.parameter(rng.normal(size=3))
        plan = MaskPlan(rng.random((2, 6)) > 0.5, frozenset(), ["random", "random"])
        w = rng.normal(size=(2, 6, 3))
        T.backward(T.tsum(T.square(apply_mask(tokens, plan, token)) * w))
        full = 2 * apply_mask(tokens.data, plan, token.data).data * w
        np.testing.assert_allclose(token.grad, full[plan.masked].sum(axis=0), rtol=1e-12)
        err = T.finite_difference_check(lambda: T.tsum(T.square(apply_mask(tokens, plan, token)) * w),
                                        [tokens, token], max_coords=None)
        assert err < 1e-8

    def test_shape_mismatch(self):
        plan = MaskPlan(np.zeros((2, 4), dtype=bool), frozenset(), ["random"] * 2)
        with pytest.raises(DimensionError):
            apply_mask(np.zeros((2, 5, 3)), plan, np.zeros(3))


class TestMaskStatistics:
    def test_random_exact(self):
        rng = np.random.default_rng(0)
        plans = [sample_mask_plan(only("random", n_reference=0), 2, GRID_196, rng) for _ in range(200)]
        st_ = mask_statistics(plans, GRID_196)["random"]
        assert st_.mean_ratio == 176 / 196 and st_.std_ratio == 0.0

    def test_rectangles_all_single_component(self):
        rng = np.random.default_rng(1)
        plans = [sample_mask_plan(only("rectangle", n_reference=0), 2, GRID_64, rng) for _ in range(300)]
        st_ = mask_statistics(plans, GRID_64)["rectangle"]
        assert st_.single_component == st_.count == 600

    def test_reference_violation_counted(self):
        plan = MaskPlan(np.ones((2, 64), dtype=bool), frozenset({0}), [REFERENCE, "random"])
        assert mask_statistics([plan], GRID_64)["reference_violations"] == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mask_statistics([], GRID_64)
