import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fratmae.masking import MaskingPlan, apply_mask, masked_count, sample_masking_plan
from fratmae.patches import patchify
from fratmae.volume import Modality


def test_default_count():
    plan = sample_masking_plan(480, 0.5, np.random.default_rng(0))
    assert int((plan.token_mask == 0).sum()) == 240


def test_modality_is_fair_coin():
    rng = np.random.default_rng(2024)
    pet = sum(sample_masking_plan(16, 0.5, rng).masked_modality is Modality.PET for _ in range(10_000))
    assert 0.47 <= pet / 10_000 <= 0.53


def test_deterministic_given_seed():
    a = sample_masking_plan(480, 0.5, np.random.default_rng(9))
    b = sample_masking_plan(480, 0.5, np.random.default_rng(9))
    assert a.masked_modality is b.masked_modality
    np.testing.assert_array_equal(a.token_mask, b.token_mask)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 600), st.floats(0.01, 0.99), st.integers(0, 2**31 - 1))
def test_plan_invariants(T, ratio, seed):
    plan = sample_masking_plan(T, ratio, np.random.default_rng(seed))
    assert int((plan.token_mask == 0).sum()) == int(np.floor(ratio * T)) == masked_count(T, ratio)
    assert np.all(plan.mask_for(plan.unmasked_modality) == 1)
    assert plan.masked_modality is not plan.unmasked_modality
    idx = plan.visible_index()
    assert np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(idx, np.flatnonzero(plan.token_mask == 1))


def test_batched_plan_shares_modality_and_count():
    plan = sample_masking_plan(64, 0.5, np.random.default_rng(1), batch_size=5)
    assert plan.token_mask.shape == (5, 64)
    assert np.all((plan.token_mask == 0).sum(1) == 32)
    assert plan.visible_index().shape == (5, 32)
    assert len({row.tobytes() for row in plan.token_mask}) > 1


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
def test_bad_ratio(ratio):
    with pytest.raises(ValueError):
        sample_masking_plan(10, ratio, np.random.default_rng(0))


def test_bad_token_count():
    with pytest.raises(ValueError):
        sample_masking_plan(0, 0.5, np.random.default_rng(0))


class TestApplyMask:
    @pytest.fixture
    def grid(self):
        x = np.random.default_rng(0).random((32, 160, 192)).astype(np.float32)
        return patchify(x, (8, 16, 16))

    def test_unmasked_modality_identity(self, grid):
        rng = np.random.default_rng(1)
        plan = MaskingPlan(Modality.PET, sample_masking_plan(480, 0.5, rng).token_mask)
        tokens, index = apply_mask(grid, plan, Modality.CT)
        assert tokens.shape[0] == 480
        np.testing.assert_array_equal(tokens, grid.tokens)
        np.testing.assert_array_equal(index, np.arange(480))

    def test_masked_modality_visible_subset(self, grid):
        plan = MaskingPlan(Modality.PET, sample_masking_plan(480, 0.5, np.random.default_rng(2)).token_mask)
        tokens, index = apply_mask(grid, plan, Modality.PET)
        assert tokens.shape[0] == 240
        # independent cross-check: walk the mask
        expected = [i for i in range(480) if plan.token_mask[i] == 1]
        assert index.tolist() == expected
        for row, i in zip(tokens, expected):
            np.testing.assert_array_equal(row, grid.tokens[i])

    def test_all_ones_mask_is_identity(self, grid):
        plan = MaskingPlan(Modality.CT, np.ones(480, np.uint8))
        tokens, index = apply_mask(grid, plan, Modality.CT)
        np.testing.assert_array_equal(tokens, grid.tokens)
        np.testing.assert_array_equal(index, np.arange(480))

    def test_length_mismatch(self, grid):
        with pytest.raises(ValueError):
            apply_mask(grid, MaskingPlan(Modality.CT, np.ones(479, np.uint8)), Modality.CT)
