"""Prunability scores: importance, sparsity, and their time-blended mask.

Importance S is the sigmoid of per-unit logits. Sparsity V turns the
architecture distribution p into per-unit keep probabilities: the unit at
descending-importance rank j is kept by every candidate whose width reaches
rank j, so V(j) is the tail sum of p over those candidates (a staircase
that is 1 on the always-kept floor). The mask blends the two,
m = lambda*S + (1-lambda)*V, with lambda falling linearly from 1 to 0.
"""

from dataclasses import dataclass

import numpy as np

from . import engine as E


@dataclass
class LambdaSchedule:
    total_steps: int
    current_step: int = 0

    def value(self, t=None):
        t = self.current_step if t is None else t
        return min(1.0, max(0.0, 1.0 - t / self.total_steps))


@dataclass
class BiMaskSnapshot:
    sid: str
    values: E.Tensor          # m per unit, original (live) unit order
    permutation: np.ndarray   # descending-importance order used for V assignment


def rank_permutation(scores):
    """Stable descending sort; ties resolved by ascending position."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("rank_permutation: non-finite scores")
    return np.argsort(-scores, kind="stable")


def importance_scores(state):
    return E.sigmoid(state.importance)


def staircase_matrix(widths_live, w_live):
    """0/1 matrix A with A[j, k] = 1 iff candidate k keeps rank j+1."""
    ranks = np.arange(1, w_live + 1)[:, None]
    widths = np.asarray(widths_live)[None, :]
    return (widths >= ranks).astype(np.float64)


def sparsity_scores(state, p=None):
    """Keep probabilities by descending-importance rank (length W_live)."""
    p = state.p() if p is None else p
    A = E.constant(staircase_matrix(state.widths_live, state.w_live))
    return E.reshape(E.matmul(A, E.reshape(p, (state.d_live, 1))), (state.w_live,))


def blend(S, V, lam):
    """m = lam*S + (1-lam)*V elementwise; V must already be in unit order."""
    if S.shape != V.shape:
        raise E.ShapeError("blend", S.shape, V.shape)
    return E.add(E.mul(S, E.constant(lam)), E.mul(V, E.constant(1.0 - lam)))


def snapshot_bimask(state, lam, p=None):
    """Assemble the blended mask for one submodule.

    V is assigned to units in descending importance order (rank-r unit gets
    the r-th staircase slot); the permutation is a constant during backward.
    """
    S = importance_scores(state)
    perm = rank_permutation(S.data)
    rank_of_unit = np.empty_like(perm)
    rank_of_unit[perm] = np.arange(perm.size)
    V_by_rank = sparsity_scores(state, p=p)
    V_unit = E.take(V_by_rank, rank_of_unit)
    return BiMaskSnapshot(sid=state.sid, values=blend(S, V_unit, lam), permutation=perm)


def snapshot_all(space, lam, p_map=None):
    """Masks for every submodule, keyed by submodule id."""
    p_map = p_map or {}
    return {state.sid: snapshot_bimask(state, lam, p=p_map.get(state.sid))
            for state in space.submodules}
