import numpy as np
import pytest

from prunesearch import engine as E
from prunesearch import scores as sc
from prunesearch import space as sp
from prunesearch.vit import ToyViTConfig


def toy_space(seed=0):
    return sp.build_space(ToyViTConfig(), rng=np.random.default_rng(seed))


def test_lambda_schedule_endpoints():
    sched = sc.LambdaSchedule(total_steps=200)
    assert sched.value(0) == 1.0
    assert sched.value(200) == 0.0
    assert sched.value(300) == 0.0
    # affine in between
    ts = np.arange(0, 201)
    vals = np.array([sched.value(t) for t in ts])
    assert np.allclose(np.diff(vals), -1.0 / 200)


def test_rank_permutation_basic():
    assert list(sc.rank_permutation([0.2, 0.9, 0.5])) == [1, 2, 0]


def test_rank_permutation_stable_ties():
    assert list(sc.rank_permutation([0.5, 0.5, 0.5])) == [0, 1, 2]


def test_rank_permutation_matches_sort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = rng.normal(size=30)
        perm = sc.rank_permutation(s)
        oracle = sorted(range(30), key=lambda i: (-s[i], i))
        assert list(perm) == oracle


def test_rank_permutation_positive_scaling_invariant():
    rng = np.random.default_rng(2)
    s = rng.uniform(0.1, 0.9, size=25)
    assert np.array_equal(sc.rank_permutation(s), sc.rank_permutation(3.7 * s))


def test_importance_scores_sigmoid():
    space = toy_space()
    state = space.by_sid("mlp0")
    state.importance.data[:] = 0.0
    assert np.allclose(sc.importance_scores(state).data, 0.5)
    state.importance.data[:] = 30.0
    assert np.abs(sc.importance_scores(state).data - 1.0).max() < 1e-12
    rng = np.random.default_rng(0)
    z = rng.normal(size=state.w_live)
    state.importance.data[:] = z
    assert np.allclose(sc.importance_scores(state).data, 1 / (1 + np.exp(-z)))


def staircase_oracle(widths, w_live, p):
    """Direct enumeration: keep probability of rank j is the mass of
    candidates at least j wide."""
    V = np.zeros(w_live)
    for j in range(1, w_live + 1):
        V[j - 1] = sum(pk for w, pk in zip(widths, p) if w >= j)
    return V


def synthetic_state(widths, w):
    spec = sp.SubmoduleSpec(kind=sp.KIND_MLP, layer_index=0, full_width=w,
                            ratio_lo=widths[0] / w, ratio_hi=1.0,
                            step_ratio=(widths[1] - widths[0]) / w if len(widths) > 1 else 1.0,
                            widths=tuple(widths))
    return sp.SubmoduleState(spec=spec, alpha=E.parameter(np.zeros(len(widths)), name="a"),
                             importance=E.parameter(np.zeros(w), name="i"),
                             live_unit_ids=np.arange(w), widths_live=list(widths))


def test_sparsity_staircase_uniform_example():
    # D = 4 candidates spaced 8 units apart, uniform p
    state = synthetic_state([8, 16, 24, 32], 32)
    V = sc.sparsity_scores(state).data
    expect = np.repeat([1.0, 0.75, 0.5, 0.25], 8)
    assert np.allclose(V, expect, atol=1e-12)


def test_sparsity_singleton_is_one():
    space = toy_space()
    state = space.by_sid("heads0")
    sp.prune_steps(state, [0, 1])  # only the full width survives
    assert state.d_live == 1
    assert np.allclose(sc.sparsity_scores(state).data, 1.0)


def test_sparsity_matches_enumeration_random():
    rng = np.random.default_rng(3)
    space = toy_space(3)
    for state in space.submodules:
        state.alpha.data[:] = rng.normal(scale=1.5, size=state.d_live)
        p = np.exp(state.alpha.data - state.alpha.data.max())
        p /= p.sum()
        V = sc.sparsity_scores(state).data
        assert np.allclose(V, staircase_oracle(state.widths_live, state.w_live, p), atol=1e-12)


def test_sparsity_sum_identity():
    # sum of unit keep-probabilities equals the expected width
    rng = np.random.default_rng(4)
    space = toy_space(4)
    for state in space.submodules:
        state.alpha.data[:] = rng.normal(scale=2.0, size=state.d_live)
        p = np.exp(state.alpha.data - state.alpha.data.max())
        p /= p.sum()
        V = sc.sparsity_scores(state).data
        assert abs(V.sum() - np.dot(state.widths_live, p)) < 1e-9


def test_blend_endpoints_and_midpoint():
    S = E.constant([0.8, 0.3])
    V = E.constant([0.6, 1.0])
    assert np.allclose(sc.blend(S, V, 1.0).data, S.data)
    assert np.allclose(sc.blend(S, V, 0.0).data, V.data)
    assert np.allclose(sc.blend(S, V, 0.5).data, [0.7, 0.65])


def test_blend_affine_in_lambda():
    rng = np.random.default_rng(5)
    S = E.constant(rng.uniform(0.1, 0.9, size=12))
    V = E.constant(rng.uniform(0.0, 1.0, size=12))
    m0 = sc.blend(S, V, 0.0).data
    m1 = sc.blend(S, V, 1.0).data
    mh = sc.blend(S, V, 0.5).data
    assert np.allclose(mh, (m0 + m1) / 2.0, rtol=1e-15, atol=0)


def test_blend_length_mismatch():
    with pytest.raises(E.ShapeError):
        sc.blend(E.constant([0.5]), E.constant([0.5, 0.5]), 0.5)


def test_snapshot_monotone_coupling():
    # higher importance never receives a smaller sparsity slot
    rng = np.random.default_rng(6)
    space = toy_space(6)
    for state in space.submodules:
        state.alpha.data[:] = rng.normal(scale=1.0, size=state.d_live)
        state.importance.data[:] = rng.normal(size=state.w_live)
        snap = sc.snapshot_bimask(state, 0.0)  # m = V
        S = sc.importance_scores(state).data
        V_unit = snap.values.data
        order = np.argsort(-S, kind="stable")
        assert np.all(np.diff(V_unit[order]) <= 1e-12)


def test_snapshot_mask_in_open_interval():
    rng = np.random.default_rng(7)
    space = toy_space(7)
    for state in space.submodules:
        state.importance.data[:] = rng.normal(size=state.w_live)
        snap = sc.snapshot_bimask(state, 0.5)
        assert np.all(snap.values.data > 0) and np.all(snap.values.data <= 1.0)


def test_mask_gradient_reaches_alpha():
    # d m / d alpha is nonzero for a unit outside the always-kept floor
    space = toy_space(8)
    state = space.by_sid("mlp0")
    snap = sc.snapshot_bimask(state, 0.5)
    weights = np.zeros(state.w_live)
    weights[-1] = 1.0  # bottom-ranked slot, not in the floor
    E.tsum(E.mul(snap.values, E.constant(weights))).backward()
    assert np.abs(state.alpha.grad).max() > 1e-6

    err = E.gradient_check(
        lambda: E.tsum(E.mul(sc.snapshot_bimask(state, 0.5).values, E.constant(weights))),
        state.alpha)
    assert err < 1e-5
