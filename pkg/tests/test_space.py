import numpy as np
import pytest

from prunesearch import space as sp
from prunesearch.vit import ToyViTConfig


def toy_space(seed=0):
    return sp.build_space(ToyViTConfig(), rng=np.random.default_rng(seed))


def test_build_space_default_grids():
    space = toy_space()
    by = {s.sid: s for s in space.submodules}
    assert space.M == 7
    qkv = by["qkv0"]
    assert qkv.widths_live == [8, 12, 16, 20, 24, 28, 32]  # lo 1/4, step 1/8 of 32
    assert qkv.d_live == 7 and qkv.w_live == 32
    heads = by["heads0"]
    assert heads.widths_live == [1, 3, 4]  # stride-2 grid closed with the full count
    pe = by["patch_embed"]
    assert pe.d_live == 17 and pe.widths_live[0] == 16 and pe.widths_live[-1] == 32
    mlp = by["mlp0"]
    assert mlp.widths_live == [16, 24, 32, 40, 48, 56, 64]


def test_build_space_deterministic():
    a, b = toy_space(3), toy_space(3)
    for sa, sb in zip(a.submodules, b.submodules):
        assert np.array_equal(sa.alpha.data, sb.alpha.data)
        assert np.array_equal(sa.importance.data, sb.importance.data)


def test_non_divisible_widths_rejected():
    cfg = ToyViTConfig(image_size=32, patch_size=4, embed_dim=30, heads=5, head_dim=6,
                       mlp_dim=60, classes=4)
    with pytest.raises(sp.ConfigurationError) as err:
        sp.build_space(cfg, rng=np.random.default_rng(0))
    assert "patch_embed" in str(err.value)


def test_prune_steps_empty_noop():
    space = toy_space()
    state = space.by_sid("mlp0")
    before = list(state.widths_live)
    removed = sp.prune_steps(state, [])
    assert removed.size == 0 and state.widths_live == before


def test_prune_steps_refuses_to_empty():
    space = toy_space()
    state = space.by_sid("heads0")
    with pytest.raises(ValueError, match="empty"):
        sp.prune_steps(state, [0, 1, 2])


def test_prune_bottom_step_keeps_units():
    # dropping a narrow candidate raises the floor; no unit leaves
    space = toy_space()
    state = space.by_sid("mlp0")
    removed = sp.prune_steps(state, [0])
    assert removed.size == 0
    assert state.widths_live == [24, 32, 40, 48, 56, 64]
    assert state.w_live == 64 and state.d_live == 6


def test_prune_top_steps_drops_lowest_ranked_units():
    space = toy_space(5)
    state = space.by_sid("mlp0")
    logits = state.importance.data.copy()
    removed = sp.prune_steps(state, [5, 6])  # ceiling 64 -> 48
    assert state.d_live == 5 and state.w_live == 48
    assert removed.size == 16
    worst16 = np.sort(np.argsort(-logits, kind="stable")[-16:])
    assert np.array_equal(removed, worst16)
    assert np.all(np.diff(state.live_unit_ids) > 0)


def test_prune_two_top_steps_qkv_drops_eight():
    space = toy_space()
    state = space.by_sid("qkv0")
    removed = sp.prune_steps(state, [5, 6])
    assert removed.size == 8  # two steps of four channels each
    assert state.w_live == 24


def test_qkv_removal_even_across_heads():
    space = toy_space(9)
    state = space.by_sid("qkv0")
    head_dim = 8
    removed = sp.prune_steps(state, [6])
    heads_hit = np.bincount(removed // head_dim, minlength=4)
    assert np.array_equal(heads_hit, [1, 1, 1, 1])
    live_per_head = np.bincount(state.live_unit_ids // head_dim, minlength=4)
    assert np.array_equal(live_per_head, [7, 7, 7, 7])


def test_head_grid_removal_uses_its_own_gaps():
    space = toy_space()
    state = space.by_sid("heads0")
    removed = sp.prune_steps(state, [2])  # widths {1,3,4} -> {1,3}
    assert removed.size == 1 and state.w_live == 3


def test_replay_with_recorded_units():
    a, b = toy_space(4), toy_space(4)
    sa, sb = a.by_sid("mlp1"), b.by_sid("mlp1")
    sa.importance.data[:] = np.random.default_rng(0).normal(size=sa.w_live)
    removed = sp.prune_steps(sa, [4, 5, 6])
    sp.prune_steps(sb, [4, 5, 6], removed_unit_ids=removed)
    assert np.array_equal(sa.live_unit_ids, sb.live_unit_ids)
    assert sa.widths_live == sb.widths_live


def test_total_live_units_single_source():
    space = toy_space()
    assert space.total_live_units() == 32 + 2 * (32 + 4 + 64)
    sp.prune_steps(space.by_sid("mlp0"), [6])
    assert space.total_live_units() == 32 + 2 * (32 + 4 + 64) - 8


def test_kept_units_for_width_per_head():
    space = toy_space(11)
    state = space.by_sid("qkv0")
    kept = sp.kept_units_for_width(state, 16)  # 4 channels per head
    per_head = np.bincount(kept // 8, minlength=4)
    assert np.array_equal(per_head, [4, 4, 4, 4])
    logits = state.importance.data
    for h in range(4):
        ids = state.live_unit_ids[state.live_unit_ids // 8 == h]
        best = ids[np.argsort(-logits[state.live_unit_ids // 8 == h], kind="stable")[:4]]
        assert set(kept[kept // 8 == h]) == set(best)


def test_export_shape():
    space = toy_space()
    doc = sp.export_architecture(space)
    assert len(doc["submodules"]) == 7
    sub = doc["submodules"][0]
    assert set(sub) == {"kind", "layer", "kept_units", "kept_steps", "full_width"}
