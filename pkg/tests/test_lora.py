import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_layer, random_set
from src.errors import InventoryMismatchError, MaskValidationError, MatrixValidationError
from src.linalg import numerical_rank
from src.lora import (
    AdapterRole, AdapterSet, LoraLayer, MaskPair, apply_output_mask, apply_rank_mask, binarize,
    delta_weight, fold_output_masks, fold_rank_masks, mask_rank, merged_delta, merged_output_delta,
    naive_merge,
)


@st.composite
def layer_pairs(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    d_out, d_in = draw(st.integers(1, 10)), draw(st.integers(1, 10))
    r_c, r_s = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    rng = np.random.default_rng(seed)
    content = LoraLayer("layer", rng.standard_normal((d_out, r_c)), rng.standard_normal((r_c, d_in)),
                        alpha=float(rng.uniform(0.5, 8.0)))
    style = LoraLayer("layer", rng.standard_normal((d_out, r_s)), rng.standard_normal((r_s, d_in)))
    masks = MaskPair(content=rng.uniform(0.0, 1.0, r_c), style=rng.uniform(0.0, 1.0, r_s))
    return content, style, masks


class TestLoraLayer:
    def test_alpha_defaults_to_rank(self, rng):
        layer = random_layer(rng, rank=4)
        assert layer.alpha == 4.0
        assert layer.scale == 1.0

    def test_rank_mismatch(self, rng):
        with pytest.raises(MatrixValidationError, match="rank"):
            LoraLayer("x", rng.standard_normal((4, 2)), rng.standard_normal((3, 4)))

    def test_non_positive_alpha(self, rng):
        with pytest.raises(MatrixValidationError, match="alpha"):
            random_layer(rng, alpha=0.0)

    def test_arrays_are_copied_and_frozen(self, rng):
        a = rng.standard_normal((4, 2))
        layer = LoraLayer("x", a, rng.standard_normal((2, 3)))
        a[0, 0] = 99.0
        assert layer.a[0, 0] != 99.0
        with pytest.raises(ValueError):
            layer.a[0, 0] = 1.0


class TestDeltaWeight:
    def test_identity(self):
        layer = LoraLayer("x", np.eye(2), np.eye(2), alpha=2.0)
        np.testing.assert_array_equal(delta_weight(layer), np.eye(2))

    def test_hand_multiplication(self):
        layer = LoraLayer("x", [[1.0], [0.0]], [[2.0, 3.0]], alpha=1.0)
        np.testing.assert_array_equal(delta_weight(layer), [[2.0, 3.0], [0.0, 0.0]])

    def test_triple_loop_oracle(self, rng):
        layer = random_layer(rng, d_out=5, d_in=4, rank=3, alpha=1.5)
        expected = np.zeros((5, 4))
        for i in range(5):
            for j in range(4):
                for k in range(3):
                    expected[i, j] += layer.a[i, k] * layer.b[k, j]
        np.testing.assert_allclose(delta_weight(layer), 0.5 * expected, atol=1e-12)


class TestMasks:
    def test_identity_mask_is_bit_exact(self, rng):
        layer = random_layer(rng)
        np.testing.assert_array_equal(apply_rank_mask(layer, np.ones(layer.rank)), delta_weight(layer))

    def test_zero_mask(self, rng):
        layer = random_layer(rng)
        np.testing.assert_array_equal(apply_rank_mask(layer, np.zeros(layer.rank)), np.zeros((8, 6)))

    def test_one_hot_is_outer_product(self, rng):
        layer = random_layer(rng, alpha=2.0)
        for k in range(layer.rank):
            e_k = np.eye(layer.rank)[k]
            expected = layer.scale * np.outer(layer.a[:, k], layer.b[k, :])
            np.testing.assert_allclose(apply_rank_mask(layer, e_k), expected, atol=1e-12)

    def test_rank_mask_length(self, rng):
        with pytest.raises(MaskValidationError, match="length"):
            apply_rank_mask(random_layer(rng, rank=3), np.ones(4))

    def test_mask_range(self, rng):
        with pytest.raises(MaskValidationError, match=r"\[0, 1\]"):
            apply_rank_mask(random_layer(rng, rank=3), [0.5, 1.5, 0.0])

    def test_output_mask_rows(self, rng):
        layer = random_layer(rng, d_out=8)
        m = np.r_[np.ones(4), np.zeros(4)]
        out = apply_output_mask(layer, m)
        np.testing.assert_array_equal(out[:4], delta_weight(layer)[:4])
        np.testing.assert_array_equal(out[4:], 0.0)

    def test_output_mask_extremes(self, rng):
        layer = random_layer(rng)
        np.testing.assert_array_equal(apply_output_mask(layer, np.ones(8)), delta_weight(layer))
        np.testing.assert_array_equal(apply_output_mask(layer, np.zeros(8)), 0.0)

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1))
    def test_linear_in_the_mask(self, seed):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng, rank=int(rng.integers(1, 6)), alpha=float(rng.uniform(0.5, 4.0)))
        m1, m2 = rng.uniform(0.0, 0.5, layer.rank), rng.uniform(0.0, 0.5, layer.rank)
        np.testing.assert_allclose(
            apply_rank_mask(layer, m1 + m2), apply_rank_mask(layer, m1) + apply_rank_mask(layer, m2), atol=1e-12,
        )

    def test_rank_bounded_by_active_entries(self, rng):
        for _ in range(50):
            layer = random_layer(rng, d_out=10, d_in=9, rank=6)
            m = rng.uniform(0.0, 1.0, 6) * (rng.uniform(size=6) > 0.5)
            assert numerical_rank(apply_rank_mask(layer, m)) <= mask_rank(m, 0.0)


class TestMergedDelta:
    def test_content_only(self, rng):
        c, s = random_layer(rng), random_layer(rng)
        out = merged_delta(c, s, MaskPair(np.ones(3), np.zeros(3)))
        np.testing.assert_allclose(out, delta_weight(c), atol=1e-12)

    def test_both_on_is_sum(self, rng):
        c, s = random_layer(rng), random_layer(rng)
        out = merged_delta(c, s, MaskPair(np.ones(3), np.ones(3)))
        np.testing.assert_allclose(out, delta_weight(c) + delta_weight(s), atol=1e-12)

    def test_shape_mismatch_names_layer(self, rng):
        c = random_layer(rng, name="unet.mid_block.x", d_out=8)
        s = random_layer(rng, name="unet.mid_block.x", d_out=7)
        with pytest.raises(MatrixValidationError, match="unet.mid_block.x"):
            merged_delta(c, s, MaskPair(np.ones(3), np.ones(3)))

    @settings(max_examples=500, deadline=None)
    @given(layer_pairs())
    def test_fold_equivalence(self, pair):
        content, style, masks = pair
        folded = fold_rank_masks(content, style, masks)
        assert folded.rank == content.rank + style.rank
        np.testing.assert_allclose(delta_weight(folded), merged_delta(content, style, masks), atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(layer_pairs())
    def test_masked_sum_oracle(self, pair):
        content, style, masks = pair
        expected = (content.scale * content.a @ np.diag(masks.content) @ content.b
                    + style.scale * style.a @ np.diag(masks.style) @ style.b)
        np.testing.assert_allclose(merged_delta(content, style, masks), expected, atol=1e-9)

    def test_output_fold_equivalence(self, rng):
        c, s = random_layer(rng, rank=3), random_layer(rng, rank=2)
        masks = MaskPair(rng.uniform(size=8), rng.uniform(size=8))
        folded = fold_output_masks(c, s, masks)
        np.testing.assert_allclose(delta_weight(folded), merged_output_delta(c, s, masks), atol=1e-9)


class TestNaiveMerge:
    def test_first_weight_only(self, rng):
        a, b = random_set(rng, ["l0", "l1"]), random_set(rng, ["l0", "l1"])
        merged = naive_merge([a, b], [1.0, 0.0])
        assert merged.role == AdapterRole.MERGED
        for name in ["l0", "l1"]:
            np.testing.assert_allclose(delta_weight(merged.layers[name]), delta_weight(a.layers[name]), atol=1e-12)

    def test_halves_of_identical_sets(self, rng):
        a = random_set(rng, ["l0"])
        merged = naive_merge([a, a], [0.5, 0.5])
        np.testing.assert_allclose(delta_weight(merged.layers["l0"]), delta_weight(a.layers["l0"]), atol=1e-12)

    def test_three_way_mean(self, rng):
        sets = [random_set(rng, ["l0", "l1"]) for _ in range(3)]
        merged = naive_merge(sets, [1 / 3] * 3)
        for name in ["l0", "l1"]:
            mean = sum(delta_weight(s.layers[name]) for s in sets) / 3
            np.testing.assert_allclose(delta_weight(merged.layers[name]), mean, atol=1e-12)

    def test_inventory_mismatch_lists_layers(self, rng):
        a, b = random_set(rng, ["l0", "l1"]), random_set(rng, ["l0", "l2"])
        with pytest.raises(InventoryMismatchError, match=r"missing \[l1\].*unexpected \[l2\]"):
            naive_merge([a, b], [0.5, 0.5])

    def test_weight_count(self, rng):
        with pytest.raises(InventoryMismatchError):
            naive_merge([random_set(rng, ["l0"])], [0.5, 0.5])


class TestAdapterSet:
    def test_duplicate_names(self, rng):
        with pytest.raises(MatrixValidationError, match="duplicate"):
            AdapterSet.from_layers([random_layer(rng, "l0"), random_layer(rng, "l0")])

    def test_stray_mergers(self, rng):
        with pytest.raises(InventoryMismatchError, match="ghost"):
            AdapterSet(layers={"l0": random_layer(rng, "l0")}, masks={"ghost": MaskPair(np.ones(1), np.ones(1))})


class TestBinarize:
    def test_rank_example(self):
        assert mask_rank([0.9, 0.01, 0.5], 0.05) == 2

    def test_zeros(self):
        assert mask_rank(np.zeros(16)) == 0

    def test_independent_count(self, rng):
        m = rng.uniform(0.0, 1.0, 64)
        assert mask_rank(m, 0.5) == int(np.sum(m > 0.5))
        np.testing.assert_array_equal(binarize(m, 0.5), (m > 0.5).astype(float))

    def test_threshold_range(self):
        with pytest.raises(MaskValidationError):
            binarize([0.5], 1.0)
