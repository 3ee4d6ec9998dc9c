"""Gradient-fidelity sweep: every primitive plus the named composite paths.

Each check compares backward() against central differences at random
interior points of the primitive's smooth domain. The full-objective check
runs on a small two-layer state prepared so that every submodule's
normalized variance sits inside the tangent activation's well-conditioned
band and importance logits are well separated (sorting is treated as a
constant during backward, so near-ties would make finite differences see a
permutation jump the analytic gradient intentionally ignores).
"""

import time

import numpy as np

from . import engine as E
from . import cost as cm
from . import regularizers as rg
from . import scores as sc
from . import space as sp
from . import vit

TOLERANCE = 1e-4


def _scalarizer(rng, shape):
    """Fixed random weights collapsing an op output to a scalar."""
    w = E.constant(rng.normal(size=shape))
    return lambda out: E.tsum(E.mul(out, w))


def _primitive_checks(rng):
    """(name, builder) pairs; builder returns (f, params)."""

    def unary(op, lo, hi, shape=(3, 4), out_shape=None):
        def build():
            x = E.parameter(rng.uniform(lo, hi, size=shape))
            down = _scalarizer(rng, out_shape or shape)
            return (lambda: down(op(x))), [x]
        return build

    def binary(op, lo_a, hi_a, lo_b, hi_b, shape=(3, 4)):
        def build():
            a = E.parameter(rng.uniform(lo_a, hi_a, size=shape))
            b = E.parameter(rng.uniform(lo_b, hi_b, size=shape))
            down = _scalarizer(rng, shape)
            return (lambda: down(op(a, b))), [a, b]
        return build

    def matmul_2d():
        a = E.parameter(rng.normal(size=(3, 4)))
        b = E.parameter(rng.normal(size=(4, 2)))
        down = _scalarizer(rng, (3, 2))
        return (lambda: down(E.matmul(a, b))), [a, b]

    def matmul_batched():
        a = E.parameter(rng.normal(size=(2, 3, 4)))
        b = E.parameter(rng.normal(size=(4, 2)))
        down = _scalarizer(rng, (2, 3, 2))
        return (lambda: down(E.matmul(a, b))), [a, b]

    def softmax_check():
        x = E.parameter(rng.normal(size=(3, 5)))
        down = _scalarizer(rng, (3, 5))
        return (lambda: down(E.softmax(x, axis=-1))), [x]

    def layer_norm_check():
        x = E.parameter(rng.normal(size=(2, 3, 6)))
        g = E.parameter(rng.uniform(0.5, 1.5, size=(6,)))
        b = E.parameter(rng.normal(size=(6,)))
        down = _scalarizer(rng, (2, 3, 6))
        return (lambda: down(E.layer_norm(x, g, b))), [x, g, b]

    def where_check():
        cond = rng.uniform(size=(3, 4)) > 0.5
        a = E.parameter(rng.normal(size=(3, 4)))
        b = E.parameter(rng.normal(size=(3, 4)))
        down = _scalarizer(rng, (3, 4))
        return (lambda: down(E.where(cond, a, b))), [a, b]

    def take_check():
        x = E.parameter(rng.normal(size=(6,)))
        idx = rng.integers(0, 6, size=8)
        down = _scalarizer(rng, (8,))
        return (lambda: down(E.take(x, idx))), [x]

    def gather_check():
        x = E.parameter(rng.normal(size=(2, 5, 3)))
        idx = np.stack([rng.choice(5, size=2, replace=False) for _ in range(2)])
        down = _scalarizer(rng, (2, 2, 3))
        return (lambda: down(E.gather_rows(x, idx))), [x]

    def cross_entropy_check():
        x = E.parameter(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 3, size=4)
        return (lambda: E.cross_entropy(x, labels)), [x]

    def sum_axis():
        x = E.parameter(rng.normal(size=(3, 4)))
        down = _scalarizer(rng, (3,))
        return (lambda: down(E.tsum(x, axis=1))), [x]

    def mean_axis():
        x = E.parameter(rng.normal(size=(3, 4)))
        down = _scalarizer(rng, (4,))
        return (lambda: down(E.tmean(x, axis=0))), [x]

    def reshape_check():
        x = E.parameter(rng.normal(size=(3, 4)))
        down = _scalarizer(rng, (2, 6))
        return (lambda: down(E.reshape(x, (2, 6)))), [x]

    def transpose_check():
        x = E.parameter(rng.normal(size=(2, 3, 4)))
        down = _scalarizer(rng, (3, 4, 2))
        return (lambda: down(E.transpose(x, (1, 2, 0)))), [x]

    return [
        ("add", binary(E.add, -2, 2, -2, 2)),
        ("sub", binary(E.sub, -2, 2, -2, 2)),
        ("mul", binary(E.mul, -2, 2, -2, 2)),
        ("div", binary(E.div, -2, 2, 0.5, 2.0)),
        ("neg", unary(E.neg, -2, 2)),
        ("exp", unary(E.texp, -2, 2)),
        ("log", unary(E.tlog, 0.1, 3.0)),
        ("tan", unary(E.ttan, -1.0, 1.0)),
        ("tanh", unary(E.ttanh, -2, 2)),
        ("sigmoid", unary(E.sigmoid, -4, 4)),
        ("abs", unary(E.tabs, 0.1, 2.0)),
        ("pow", unary(lambda x: E.powf(x, 1.7), 0.2, 2.0)),
        ("clip", unary(lambda x: E.clip(x, -10.0, 10.0), -2, 2)),
        ("gelu", unary(E.gelu, -3, 3)),
        ("matmul", matmul_2d),
        ("matmul_batched", matmul_batched),
        ("sum", sum_axis),
        ("mean", mean_axis),
        ("reshape", reshape_check),
        ("transpose", transpose_check),
        ("softmax", softmax_check),
        ("layer_norm", layer_norm_check),
        ("where", where_check),
        ("take", take_check),
        ("gather_rows", gather_check),
        ("cross_entropy", cross_entropy_check),
    ]


def interior_alpha(d, rng, omega_target=0.4):
    """Logits whose softmax has normalized variance omega_target (D >= 2)."""
    if d < 2:
        return np.zeros(d)
    target = (d - 1) / d ** 2 * omega_target

    def sigma(b):
        p = np.exp(np.array([b] + [0.0] * (d - 1)))
        p /= p.sum()
        return np.sum((p - 1.0 / d) ** 2) / d

    lo, hi = 0.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if sigma(mid) < target:
            lo = mid
        else:
            hi = mid
    alpha = np.array([hi] + [0.0] * (d - 1))
    return alpha + rng.normal(0.0, 1e-3, size=d)


def tiny_state(seed=11):
    """Two-layer toy state with interior omegas and well-spread importances."""
    cfg = vit.ToyViTConfig(image_size=8, patch_size=4, channels=1, embed_dim=8,
                           depth=2, heads=2, head_dim=4, mlp_dim=16, classes=2)
    spc = sp.SpaceConfig(qkv=sp.GridTriple(0.25, 1.0, 0.25),
                         mlp=sp.GridTriple(0.25, 1.0, 0.25),
                         patch_embed=sp.GridTriple(0.5, 1.0, 0.125))
    rng = np.random.default_rng(seed)
    space = sp.build_space(cfg, spc, rng=rng)
    for state in space.submodules:
        state.alpha.data[:] = interior_alpha(state.d_live, rng)
        spread = np.linspace(-1.5, 1.5, state.w_live)
        state.importance.data[:] = rng.permutation(spread)
    model = vit.Supernet(cfg, rng)
    return cfg, space, model, rng


def named_checks(rng):
    checks = []

    def entropy_term():
        p0 = rng.dirichlet(np.ones(6)) * 0.8 + 0.2 / 6  # interior simplex point
        p = E.parameter(p0)
        return (lambda: E.neg(E.tsum(E.mul(p, E.tlog(p))))), [p]

    checks.append(("entropy_term", entropy_term, 1e-5))

    def psi_of_omega():
        w = E.parameter([rng.uniform(0.1, 0.9)])
        f = lambda: E.tsum(E.ttan(E.sub(E.constant(np.pi / 2.0),
                                        E.mul(w, E.constant(np.pi)))))
        return f, [w]

    checks.append(("psi_interior_omega", psi_of_omega, TOLERANCE))

    def v_of_alpha():
        _, space, _, _ = tiny_state(seed=int(rng.integers(1 << 30)))
        state = space.submodules[1]
        weights = E.constant(rng.normal(size=(state.w_live,)))
        f = lambda: E.tsum(E.mul(sc.sparsity_scores(state), weights))
        return f, [state.alpha]

    checks.append(("sparsity_of_alpha", v_of_alpha, TOLERANCE))

    def g_of_alpha():
        cfg, space, _, _ = tiny_state(seed=int(rng.integers(1 << 30)))
        coeffs = cm.calibrate(cfg)
        f = lambda: cm.g_of_v(space, coeffs)
        return f, [s.alpha for s in space.submodules]

    checks.append(("cost_of_alpha", g_of_alpha, TOLERANCE))
    return checks


def full_objective_check(seed=11, h=1e-5):
    """Max relative gradient error of the combined training objective."""
    cfg, space, model, rng = tiny_state(seed)
    coeffs = cm.calibrate(cfg)
    weights = rg.RegularizerWeights()
    x = rng.normal(size=(2, 1, cfg.image_size, cfg.image_size))
    labels = rng.integers(0, cfg.classes, size=2)
    mask_pos = np.zeros((2, cfg.tokens), dtype=bool)
    mask_pos[:, 1] = True

    def objective():
        masks = sc.snapshot_all(space, 0.6)
        out = model.forward(x, masks, space, mask_pos)
        task = E.cross_entropy(out.logits, labels)
        g = cm.g_of_v(space, coeffs)
        l_m, _ = rg.total_mask_loss(space, weights, 0.5, g)
        l_rec = vit.reconstruct_loss(out, x, cfg.patch_size)
        return E.add(E.add(task, l_m), l_rec)

    params = list(model.params.values()) + \
        [t for s in space.submodules for t in (s.alpha, s.importance)]
    # disagreements under |f|*eps/h are central-difference roundoff, not signal
    return E.gradient_check(objective, params, h=h, atol=1e-8)


def run_suite(points_per_primitive=100, seed=17):
    """Full gradient-fidelity report; all checks must come in under 1e-4."""
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    checks = []

    for name, builder in _primitive_checks(rng):
        worst = 0.0
        for _ in range(points_per_primitive):
            f, params = builder()
            worst = max(worst, E.gradient_check(f, params))
        checks.append({"name": name, "max_rel_err": worst, "tolerance": TOLERANCE,
                       "pass": worst < TOLERANCE})

    for name, builder, tol in named_checks(rng):
        f, params = builder()
        err = E.gradient_check(f, params)
        checks.append({"name": name, "max_rel_err": err, "tolerance": tol,
                       "pass": err < tol})

    err = full_objective_check()
    checks.append({"name": "full_objective", "max_rel_err": err,
                   "tolerance": TOLERANCE, "pass": err < TOLERANCE})

    return {
        "checks": checks,
        "all_pass": all(c["pass"] for c in checks),
        "points_per_primitive": points_per_primitive,
        "seed": seed,
        "elapsed_s": time.perf_counter() - started,
    }
