"""Triggered step pruning and search-finish detection.

Every prune_interval iterations (after warmup), each undecided submodule is
checked: candidates whose probability has fallen to eta times the uniform
level 1/D_live are removed, except that the top-probability candidate is
always protected. The variance target follows D_live automatically, so the
one-hot regularizer re-adapts after every event.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import space as sp


@dataclass
class PruneEvent:
    step: int
    submodule_id: str
    removed_steps: list
    removed_unit_ids: list
    p_before: list
    p_min: float
    threshold: float
    reason: str = "trigger"

    def to_record(self):
        d = asdict(self)
        d["type"] = "prune_event"
        return d


@dataclass
class PruneSchedule:
    interval: int
    eta: float = 0.2
    warmup_iters: int = 0
    finish_flag: bool = False

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("prune interval must be positive")

    def due(self, t):
        return (not self.finish_flag) and t >= self.warmup_iters and t % self.interval == 0


def _softmax(x):
    z = np.exp(x - x.max())
    return z / z.sum()


def maybe_prune(space, schedule, t, on_shrink=None):
    """Remove dead candidates from every submodule; returns the events.

    on_shrink(state, kept_step_indices, kept_unit_mask) lets the caller
    shrink optimizer moments alongside the parameters.
    """
    events = []
    for state in space.submodules:
        if state.d_live < 2:
            continue
        p = _softmax(state.alpha.data)
        threshold = schedule.eta / state.d_live
        dying = [k for k in range(state.d_live) if p[k] <= threshold]
        protected = int(np.argmax(p))
        dying = [k for k in dying if k != protected]
        if not dying:
            continue
        event = _remove(state, dying, p, threshold, t, "trigger", on_shrink)
        events.append(event)
    return events


def finalize(space, t, on_shrink=None):
    """Collapse every undecided submodule onto its argmax candidate."""
    events = []
    for state in space.submodules:
        if state.d_live < 2:
            continue
        p = _softmax(state.alpha.data)
        winner = int(np.argmax(p))
        losers = [k for k in range(state.d_live) if k != winner]
        events.append(_remove(state, losers, p, float(p[losers].max() if losers else 0.0),
                              t, "finalize", on_shrink))
    return events


def _remove(state, steps, p, threshold, t, reason, on_shrink):
    keep_steps = [k for k in range(state.d_live) if k not in steps]
    old_ids = state.live_unit_ids.copy()
    removed_units = sp.prune_steps(state, steps)
    kept_mask = ~np.isin(old_ids, removed_units)
    if on_shrink is not None:
        on_shrink(state, keep_steps, kept_mask)
    p_after = _softmax(state.alpha.data)
    assert abs(p_after.sum() - 1.0) < 1e-12
    return PruneEvent(
        step=t, submodule_id=state.sid,
        removed_steps=[int(k) for k in steps],
        removed_unit_ids=[int(u) for u in removed_units],
        p_before=[float(v) for v in p],
        p_min=float(p.min()), threshold=float(threshold), reason=reason,
    )


def finish_check(space, g_fraction, tau, tolerance=0.05, onehot_tol=1e-3):
    """True once the budget is met and every submodule is decided or one-hot."""
    if g_fraction > tau * (1.0 + tolerance):
        return False
    for state in space.submodules:
        if state.decided:
            continue
        p = _softmax(state.alpha.data)
        if p.max() < 1.0 - onehot_tol:
            return False
    return True


def replay(space, events):
    """Re-apply a logged event stream to a fresh space (determinism check)."""
    for ev in events:
        state = space.by_sid(ev["submodule_id"])
        sp.prune_steps(state, ev["removed_steps"], removed_unit_ids=ev["removed_unit_ids"])
    return space
