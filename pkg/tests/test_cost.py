import numpy as np
import pytest

from prunesearch import cost as cm
from prunesearch import engine as E
from prunesearch import pruner as pr
from prunesearch import space as sp
from prunesearch.vit import ToyViTConfig


CFG = ToyViTConfig()


def toy_space(seed=0):
    return sp.build_space(CFG, rng=np.random.default_rng(seed))


def test_calibration_full_identity():
    coeffs = cm.calibrate(CFG)
    fw = cm.full_widths(CFG)
    assert coeffs.polynomial(fw.embed, [h * d for h, d in zip(fw.heads, fw.head_channels)],
                             fw.mlp) == coeffs.full_flops


def test_calibration_error_reports_setting():
    coeffs = cm.calibrate(CFG)  # sanity: normal calibration passes
    assert coeffs.full_flops > 0
    bad = ToyViTConfig()
    real_count = cm.count_macs
    try:
        cm.count_macs = lambda *a, **k: real_count(*a, **k) + 1
        with pytest.raises(cm.CalibrationError):
            cm.calibrate(bad)
    finally:
        cm.count_macs = real_count


def test_expected_width_uniform_example():
    # uniform p over widths {8,16,24,32}: expected 20, also the V staircase sum
    from tests.test_scores import synthetic_state
    state = synthetic_state([8, 16, 24, 32], 32)
    assert abs(cm.expected_width(state).item() - 20.0) < 1e-12
    assert abs(8 * (1 + 0.75 + 0.5 + 0.25) - 20.0) < 1e-15


def test_expected_width_one_hot_endpoints():
    space = toy_space()
    state = space.by_sid("mlp0")
    state.alpha.data[:] = 0.0
    state.alpha.data[-1] = 40.0
    assert abs(cm.expected_width(state).item() - 64.0) < 1e-9
    state.alpha.data[:] = 0.0
    state.alpha.data[0] = 40.0
    assert abs(cm.expected_width(state).item() - 16.0) < 1e-9


def test_g_full_keep_is_one():
    # decided-at-full space evaluates to exactly 1.0
    space = toy_space()
    coeffs = cm.calibrate(CFG)
    for state in space.submodules:
        sp.prune_steps(state, list(range(state.d_live - 1)))  # keep only the top
        assert state.d_live == 1
    assert cm.g_of_v(space, coeffs).item() == 1.0


def test_g_monotone_in_each_width():
    rng = np.random.default_rng(1)
    space = toy_space(1)
    coeffs = cm.calibrate(CFG)
    for s in space.submodules:
        s.alpha.data[:] = rng.normal(scale=0.5, size=s.d_live)
    base = cm.g_of_v(space, coeffs).item()
    for s in space.submodules:
        old = s.alpha.data.copy()
        s.alpha.data[-1] += 0.5  # shift mass toward the widest candidate
        assert cm.g_of_v(space, coeffs).item() >= base - 1e-12
        s.alpha.data[:] = old


def test_g_gradient_matches_finite_differences():
    space = toy_space(2)
    coeffs = cm.calibrate(CFG)
    rng = np.random.default_rng(2)
    for s in space.submodules:
        s.alpha.data[:] = rng.normal(scale=0.7, size=s.d_live)
    err = E.gradient_check(lambda: cm.g_of_v(space, coeffs),
                           [s.alpha for s in space.submodules])
    assert err < 1e-5


def _random_one_hot_space(rng):
    space = toy_space(int(rng.integers(1 << 30)))
    for state in space.submodules:
        state.importance.data[:] = rng.normal(size=state.w_live)
        winner = int(rng.integers(state.d_live))
        losers = [k for k in range(state.d_live) if k != winner]
        if losers:
            sp.prune_steps(state, losers)
        assert state.d_live == 1
    return space


def test_vertex_consistency_50_random_one_hot():
    # at every one-hot configuration the smooth cost equals the exact count
    rng = np.random.default_rng(3)
    coeffs = cm.calibrate(CFG)
    for _ in range(50):
        space = _random_one_hot_space(rng)
        g = cm.g_of_v(space, coeffs).item()
        export = sp.export_architecture(space)
        flops, _ = cm.discrete_cost(export, CFG)
        assert round(g * coeffs.full_flops, 6) == flops


def test_discrete_cost_unpruned_matches_full():
    coeffs = cm.calibrate(CFG)
    space = toy_space()
    export = sp.export_architecture(space)
    flops, params = cm.discrete_cost(export, CFG)
    assert flops == coeffs.full_flops
    assert params == coeffs.full_params


def test_discrete_cost_mlp_halved():
    coeffs = cm.calibrate(CFG)
    space = toy_space()
    export = sp.export_architecture(space)
    full_flops, _ = cm.discrete_cost(export, CFG)
    for sub in export["submodules"]:
        if sub["kind"] == "mlp":
            sub["kept_units"] = sub["kept_units"][:32]
    half_flops, _ = cm.discrete_cost(export, CFG)
    n = CFG.tokens
    assert full_flops - half_flops == 2 * (2 * n * CFG.embed_dim * 32)


def test_discrete_cost_deterministic():
    space = toy_space()
    export = sp.export_architecture(space)
    assert cm.discrete_cost(export, CFG) == cm.discrete_cost(export, CFG)


def test_cost_report_fields():
    coeffs = cm.calibrate(CFG)
    export = sp.export_architecture(toy_space())
    report = cm.cost_report(export, CFG, coeffs)
    assert set(report) == {"flops", "params", "flops_fraction", "params_fraction"}
    assert report["flops_fraction"] == 1.0 and report["params_fraction"] == 1.0


def test_minimal_architecture_matches_counter():
    # every submodule at its floor width
    coeffs = cm.calibrate(CFG)
    space = toy_space()
    for state in space.submodules:
        sp.prune_steps(state, list(range(1, state.d_live)))
        assert state.widths_live == [state.spec.widths[0]]
    g = cm.g_of_v(space, coeffs).item()
    flops, _ = cm.discrete_cost(sp.export_architecture(space), CFG)
    assert round(g * coeffs.full_flops, 6) == flops
