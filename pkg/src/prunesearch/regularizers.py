"""Mask regularization: the adaptive one-hot loss and its theorem oracles.

The architecture distribution of each submodule is pushed toward a one-hot
vector by two complementary terms: its entropy H(p) and a tangent-activated
normalized variance Psi. Any one-hot vector has H = 0 and variance exactly
(D-1)/D^2 regardless of the hot index, so neither term fixes which
candidate wins — the budget penalty and the task loss decide that. An l1
penalty on importance scores drives unimportant units toward zero.

theorem_suite verifies, by direct evaluation over random simplex points and
all one-hot vectors, that zero entropy, maximal variance, and one-hotness
coincide, that both quantities stay inside their bounds, and that the
variance-vs-l2-norm identity holds to near machine precision.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import engine as E

OMEGA_CLAMP = 1e-3  # keeps tan(pi/2 - pi*omega) away from its poles


@dataclass
class RegularizerWeights:
    mu1: float = 0.5     # entropy + variance term
    mu2: float = 100.0   # budget penalty
    mu3: float = 2e-5    # importance l1
    eta: float = 0.2     # pruning trigger scale


@dataclass
class VarianceTarget:
    d_live: int

    @property
    def sigma_target(self):
        if self.d_live <= 1:
            return 0.0
        return (self.d_live - 1) / self.d_live ** 2


def entropy(p):
    """-sum p*log p over a simplex tensor (0*log 0 := 0 via the EPS floor)."""
    data = p.data if isinstance(p, E.Tensor) else np.asarray(p, dtype=np.float64)
    if np.any(data < -1e-9):
        raise ValueError(f"entropy: negative entries beyond tolerance (min {data.min()})")
    if abs(float(data.sum()) - 1.0) > 1e-9:
        raise ValueError(f"entropy: input off the simplex (sum {data.sum()})")
    p = E.constant(p)
    return E.neg(E.tsum(E.mul(p, E.tlog(p))))


def variance_term(p, d_live):
    """Tangent-activated normalized variance Psi of a live distribution.

    sigma is the population variance of p around 1/D; omega = sigma/sigma_t
    clamped into [1e-3, 1-1e-3]; the result is tan(pi/2 - pi*omega). A
    decided submodule (D_live = 1) has no choice left and contributes 0.
    """
    if d_live <= 1:
        return E.constant(0.0)
    target = VarianceTarget(d_live).sigma_target
    p = E.constant(p)
    dev = E.sub(p, E.constant(1.0 / d_live))
    sigma = E.tmean(E.mul(dev, dev))
    omega = E.clip(E.mul(sigma, E.constant(1.0 / target)), OMEGA_CLAMP, 1.0 - OMEGA_CLAMP)
    return E.ttan(E.sub(E.constant(math.pi / 2.0), E.mul(omega, E.constant(math.pi))))


def variance_identity_check(p):
    """Residual of ((D-1)/D^2 - sigma) == (1 - sum p^2)/D; must be ~0."""
    p = np.asarray(p, dtype=np.float64)
    d = p.size
    sigma = np.sum((p - 1.0 / d) ** 2) / d
    left = (d - 1) / d ** 2 - sigma
    right = (1.0 - np.sum(p ** 2)) / d
    return abs(left - right)


def importance_penalty(score_tensors):
    """Sum of all live importance scores (l1 norm, since scores are positive)."""
    total = E.constant(0.0)
    for s in score_tensors:
        total = E.add(total, E.tsum(s))
    return total


def budget_penalty(g, tau):
    """|g - tau| with subgradient 0 at the root; both are FLOPs fractions."""
    return E.tabs(E.sub(E.constant(g), E.constant(tau)))


def total_mask_loss(space, weights, tau, g, p_map=None):
    """mu1 * sum_i [H(p_i) + Psi(p_i)] + mu2*|g - tau| + mu3*||S||_1.

    Returns the scalar loss tensor plus a dict of per-component floats for
    the search log.
    """
    from . import scores as sc

    p_map = p_map or {}
    h_total = E.constant(0.0)
    psi_total = E.constant(0.0)
    for state in space.submodules:
        p = p_map.get(state.sid) or state.p()
        h_total = E.add(h_total, entropy(p))
        psi_total = E.add(psi_total, variance_term(p, state.d_live))
    imp = importance_penalty([sc.importance_scores(s) for s in space.submodules])
    budget = budget_penalty(g, tau)

    loss = E.add(
        E.add(E.mul(E.add(h_total, psi_total), E.constant(weights.mu1)),
              E.mul(budget, E.constant(weights.mu2))),
        E.mul(imp, E.constant(weights.mu3)),
    )
    parts = {
        "entropy": h_total.item(),
        "variance": psi_total.item(),
        "budget_penalty": budget.item(),
        "importance_penalty": imp.item(),
    }
    return loss, parts


# -- theorem oracles (pure numpy, independent of the engine) ------------------

def _entropy_exact(p):
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _variance_exact(p):
    d = p.size
    return float(np.sum((p - 1.0 / d) ** 2) / d)


def theorem_suite(n_samples=1000, d_range=(2, 4, 8, 16), seed=0):
    """Check the one-hot equivalences over random and vertex distributions.

    Per distribution p of dimension D:
      (a) H(p) < 1e-6  <=>  max(p) > 1 - 1e-4  <=>  |sigma - (D-1)/D^2| < 1e-8
      (b) 0 <= H <= log D and 0 <= sigma <= (D-1)/D^2
      (c) |((D-1)/D^2 - sigma) - (1 - sum p^2)/D| < 1e-12
    Violations are report entries, not exceptions.
    """
    if n_samples < 1000:
        raise ValueError("theorem_suite needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    violations = []
    checked = 0
    for d in d_range:
        target = (d - 1) / d ** 2
        points = [np.eye(d)[k] for k in range(d)]
        points.extend(rng.dirichlet(np.ones(d), size=n_samples))
        for idx, p in enumerate(points):
            h = _entropy_exact(p)
            sigma = _variance_exact(p)
            near_zero_h = h < 1e-6
            near_vertex = float(p.max()) > 1.0 - 1e-4
            max_var = abs(sigma - target) < 1e-8
            if not (near_zero_h == near_vertex == max_var):
                violations.append({"d": d, "index": idx, "check": "equivalence",
                                   "entropy": h, "max_p": float(p.max()), "sigma": sigma})
            if not (-1e-12 <= h <= math.log(d) + 1e-12):
                violations.append({"d": d, "index": idx, "check": "entropy_bounds", "entropy": h})
            if not (-1e-15 <= sigma <= target + 1e-12):
                violations.append({"d": d, "index": idx, "check": "variance_bounds", "sigma": sigma})
            residual = variance_identity_check(p)
            if residual >= 1e-12:
                violations.append({"d": d, "index": idx, "check": "identity", "residual": residual})
            checked += 1
    return {
        "samples_per_d": n_samples,
        "dims": list(d_range),
        "seed": seed,
        "distributions_checked": checked,
        "violations": violations,
        "elapsed_s": time.perf_counter() - started,
    }
