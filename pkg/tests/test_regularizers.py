import math

import numpy as np
import pytest

from prunesearch import engine as E
from prunesearch import regularizers as rg


def test_entropy_one_hot_zero():
    assert abs(rg.entropy(E.constant([1.0, 0.0, 0.0, 0.0])).item()) < 1e-9


def test_entropy_uniform_maximum():
    assert abs(rg.entropy(E.constant([0.25] * 4)).item() - math.log(4)) < 1e-9
    assert abs(rg.entropy(E.constant([0.5, 0.5])).item() - math.log(2)) < 1e-9


def test_entropy_rejects_negative():
    with pytest.raises(ValueError, match="negative"):
        rg.entropy(E.constant([1.1, -0.1]))


def test_entropy_rejects_off_simplex():
    with pytest.raises(ValueError, match="simplex"):
        rg.entropy(E.constant([0.7, 0.7]))


def test_entropy_permutation_invariant():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6))
    vals = {round(rg.entropy(E.constant(rng.permutation(p))).item(), 12) for _ in range(10)}
    assert len(vals) == 1


def test_entropy_gradient_matches_analytic():
    # dH/dp_k = -(log p_k + 1) at interior points
    rng = np.random.default_rng(1)
    p0 = rng.dirichlet(np.ones(5)) * 0.8 + 0.04
    p = E.parameter(p0)
    rg.entropy(p).backward()
    assert np.abs(p.grad - (-(np.log(p0) + 1))).max() < 1e-5


def test_variance_target():
    assert rg.VarianceTarget(4).sigma_target == 3 / 16
    assert rg.VarianceTarget(1).sigma_target == 0.0


def test_variance_term_one_hot_large_negative():
    psi = rg.variance_term(E.constant([1.0, 0.0, 0.0, 0.0]), 4).item()
    # omega clamps at 0.999: tan(pi/2 - 0.999*pi)
    expect = math.tan(math.pi / 2 - 0.999 * math.pi)
    assert abs(psi - expect) < 1e-9
    assert psi < -300


def test_variance_term_uniform_large_positive():
    psi = rg.variance_term(E.constant([0.25] * 4), 4).item()
    expect = math.tan(math.pi / 2 - 0.001 * math.pi)
    assert abs(psi - expect) < 1e-9
    assert psi > 300


def test_variance_term_midpoint_zero():
    # find p with omega = 1/2 for D=2: sigma = (a-.5)^2 = sigma_t/2 = 1/8
    a = 0.5 + math.sqrt(1 / 8)
    psi = rg.variance_term(E.constant([a, 1 - a]), 2).item()
    assert abs(psi) < 1e-9


def test_variance_term_decided_contributes_zero():
    assert rg.variance_term(E.constant([1.0]), 1).item() == 0.0


def test_variance_term_monotone_in_omega():
    # strictly decreasing over the clamp interior
    omegas = np.linspace(0.002, 0.998, 100)
    vals = [math.tan(math.pi / 2 - math.pi * w) for w in omegas]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    # and through the tensor path for distributions of growing variance
    psis = []
    for a in np.linspace(0.5, 0.98, 25):
        psis.append(rg.variance_term(E.constant([a, 1 - a]), 2).item())
    assert all(a >= b for a, b in zip(psis, psis[1:]))


def test_variance_identity_examples():
    assert rg.variance_identity_check(np.array([1.0, 0, 0, 0])) < 1e-15
    p = np.full(4, 0.25)
    d = 4
    sigma = np.sum((p - 1 / d) ** 2) / d
    assert abs(((d - 1) / d ** 2 - sigma) - 0.1875) < 1e-15
    assert abs((1 - np.sum(p ** 2)) / d - 0.1875) < 1e-15
    assert rg.variance_identity_check(p) < 1e-15


def test_variance_identity_random():
    rng = np.random.default_rng(2)
    worst = max(rg.variance_identity_check(rng.dirichlet(np.ones(rng.integers(2, 20))))
                for _ in range(1000))
    assert worst < 1e-12


def test_importance_penalty():
    ts = [E.constant(np.full(10, 0.5))]
    assert rg.importance_penalty(ts).item() == 5.0
    assert rg.importance_penalty([]).item() == 0.0
    rng = np.random.default_rng(3)
    vals = [rng.uniform(0.01, 0.99, size=7), rng.uniform(0.01, 0.99, size=3)]
    got = rg.importance_penalty([E.constant(v) for v in vals]).item()
    assert abs(got - sum(v.sum() for v in vals)) < 1e-12


def test_budget_penalty():
    assert rg.budget_penalty(E.constant(0.2), 0.2).item() == 0.0
    assert abs(rg.budget_penalty(E.constant(0.30), 0.20).item() - 0.10) < 1e-15
    assert abs(rg.budget_penalty(E.constant(0.10), 0.25).item() - 0.15) < 1e-15


def _toy_space(seed=0):
    from prunesearch import space as sp
    from prunesearch.vit import ToyViTConfig
    return sp.build_space(ToyViTConfig(), rng=np.random.default_rng(seed))


def test_total_mask_loss_zero_weights():
    from prunesearch import cost as cm
    from prunesearch.vit import ToyViTConfig
    space = _toy_space()
    coeffs = cm.calibrate(ToyViTConfig())
    g = cm.g_of_v(space, coeffs)
    loss, _ = rg.total_mask_loss(space, rg.RegularizerWeights(0, 0, 0, 0.2), 0.5, g)
    assert loss.item() == 0.0


def test_total_mask_loss_decided_submodule():
    # single decided site, mu2 = 0: only the importance term remains
    from prunesearch import space as sp
    from prunesearch import scores as sc

    space = _toy_space()
    state = space.by_sid("heads0")
    sp.prune_steps(state, [0, 1])
    space.submodules = [state]
    weights = rg.RegularizerWeights(mu1=0.5, mu2=0.0, mu3=2e-5)
    loss, parts = rg.total_mask_loss(space, weights, 0.5, E.constant(1.0))
    S = sc.importance_scores(state).data.sum()
    assert abs(parts["entropy"]) < 1e-9          # singleton softmax
    assert parts["variance"] == 0.0
    assert abs(loss.item() - 2e-5 * S) < 1e-12


def test_total_mask_loss_matches_sum_of_parts():
    from prunesearch import cost as cm
    from prunesearch import scores as sc
    from prunesearch.vit import ToyViTConfig

    rng = np.random.default_rng(4)
    space = _toy_space(4)
    for s in space.submodules:
        s.alpha.data[:] = rng.normal(scale=1.0, size=s.d_live)
    coeffs = cm.calibrate(ToyViTConfig())
    g = cm.g_of_v(space, coeffs)
    weights = rg.RegularizerWeights()
    loss, parts = rg.total_mask_loss(space, weights, 0.37, g)

    h = sum(rg.entropy(s.p()).item() for s in space.submodules)
    psi = sum(rg.variance_term(s.p(), s.d_live).item() for s in space.submodules)
    imp = sum(sc.importance_scores(s).data.sum() for s in space.submodules)
    budget = abs(g.item() - 0.37)
    want = weights.mu1 * (h + psi) + weights.mu2 * budget + weights.mu3 * imp
    assert abs(loss.item() - want) < 1e-9 * max(1.0, abs(want))


def test_total_mask_loss_invariant_to_relabeling():
    from prunesearch import cost as cm
    from prunesearch.vit import ToyViTConfig
    space = _toy_space(5)
    coeffs = cm.calibrate(ToyViTConfig())
    g = cm.g_of_v(space, coeffs)
    base, _ = rg.total_mask_loss(space, rg.RegularizerWeights(), 0.5, g)
    space.submodules = list(reversed(space.submodules))
    flipped, _ = rg.total_mask_loss(space, rg.RegularizerWeights(), 0.5, g)
    assert abs(base.item() - flipped.item()) < 1e-12


def test_entropy_descent_drives_one_hot():
    # gradient descent on a single site with only the one-hot terms active
    from prunesearch import space as sp
    space = _toy_space(6)
    state = space.by_sid("mlp0")
    rng = np.random.default_rng(6)
    state.alpha.data[:] = rng.normal(0, 0.05, size=state.d_live)

    entropies = []
    for _ in range(3000):
        p = state.p()
        loss = E.add(rg.entropy(p), rg.variance_term(p, state.d_live))
        state.alpha.zero_grad()
        loss.backward()
        entropies.append(rg.entropy(state.p()).item())
        state.alpha.data -= 0.05 * state.alpha.grad
    p_final = np.exp(state.alpha.data - state.alpha.data.max())
    p_final /= p_final.sum()
    assert p_final.max() > 0.99
    tail = entropies[len(entropies) // 2:]
    assert all(a >= b - 1e-9 for a, b in zip(tail, tail[1:]))


def test_theorem_suite_clean():
    report = rg.theorem_suite(n_samples=1000, d_range=(2, 4, 8, 16), seed=0)
    assert report["violations"] == []
    assert report["distributions_checked"] == 4 * 1000 + 2 + 4 + 8 + 16


def test_theorem_suite_rejects_small_samples():
    with pytest.raises(ValueError):
        rg.theorem_suite(n_samples=10)
