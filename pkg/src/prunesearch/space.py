"""Prunable submodules of the toy supernet and their candidate width grids.

Each prunable site (joint Q-K-V channels per layer, head count per layer,
MLP hidden channels per layer, one global patch-embedding channel group)
gets a grid of candidate kept-unit counts. Architecture logits alpha live
over the grid; importance logits live over the individual units.

Width bookkeeping on step removal: surviving candidates keep their absolute
widths. Units are physically removed only when the maximum surviving width
drops, and the removed units are the lowest-importance-ranked live ones
(per head for the joint Q-K-V group, so per-head channel counts stay equal).
"""

from dataclasses import dataclass, field

import numpy as np

from . import engine as E

KIND_QKV = "qkv"
KIND_HEADS = "heads"
KIND_MLP = "mlp"
KIND_PATCH_EMBED = "patch_embed"


class ConfigurationError(Exception):
    pass


@dataclass
class GridTriple:
    """(lowest ratio, highest ratio, step ratio) for one submodule kind."""
    lo: float
    hi: float
    step: float


@dataclass
class SpaceConfig:
    qkv: GridTriple = field(default_factory=lambda: GridTriple(0.25, 1.0, 0.125))
    mlp: GridTriple = field(default_factory=lambda: GridTriple(0.25, 1.0, 0.125))
    patch_embed: GridTriple = field(default_factory=lambda: GridTriple(0.5, 1.0, 1.0 / 32.0))
    head_lo: int = 1
    head_step: int = 2


@dataclass
class SubmoduleSpec:
    kind: str
    layer_index: int  # -1 for the global patch-embedding group
    full_width: int
    ratio_lo: float
    ratio_hi: float
    step_ratio: float
    widths: tuple  # ascending candidate kept-unit counts; widths[-1] == full_width
    group_count: int = 1  # >1: units are removed evenly across this many groups (heads)

    @property
    def step_units(self):
        return int(round(self.full_width * self.step_ratio))

    @property
    def sid(self):
        if self.layer_index < 0:
            return self.kind
        return f"{self.kind}{self.layer_index}"


@dataclass
class SubmoduleState:
    spec: SubmoduleSpec
    alpha: E.Tensor          # architecture logits, length D_live
    importance: E.Tensor     # importance logits, length W_live
    live_unit_ids: np.ndarray
    widths_live: list        # surviving candidate kept-counts, ascending
    pruned: bool = False

    @property
    def d_live(self):
        return len(self.widths_live)

    @property
    def w_live(self):
        return int(self.live_unit_ids.size)

    @property
    def decided(self):
        return self.d_live == 1

    @property
    def sid(self):
        return self.spec.sid

    def p(self):
        """Normalized architecture distribution over the live grid."""
        return E.softmax(self.alpha, axis=0)


@dataclass
class SearchSpace:
    submodules: list

    @property
    def M(self):
        return len(self.submodules)

    def by_sid(self, sid):
        for s in self.submodules:
            if s.sid == sid:
                return s
        raise KeyError(sid)

    def total_live_units(self):
        return sum(s.w_live for s in self.submodules)


def _channel_widths(full_width, triple, site):
    lo_units = full_width * triple.lo
    step_units = full_width * triple.step
    problems = []
    if abs(step_units - round(step_units)) > 1e-9 or round(step_units) < 1:
        problems.append(f"{site}: full width {full_width} * step {triple.step} is not a positive integer")
    if abs(lo_units - round(lo_units)) > 1e-9:
        problems.append(f"{site}: full width {full_width} * lo {triple.lo} is not an integer")
    if problems:
        return None, problems
    lo_units, step_units = int(round(lo_units)), int(round(step_units))
    count = (triple.hi - triple.lo) / triple.step + 1
    if abs(count - round(count)) > 1e-9:
        return None, [f"{site}: (hi - lo)/step + 1 = {count} is not an integer"]
    widths = tuple(range(lo_units, full_width + 1, step_units))
    return widths, []


def _head_widths(num_heads, lo, step):
    widths = list(range(lo, num_heads + 1, step))
    if widths[-1] != num_heads:  # the unpruned net must be in its own space
        widths.append(num_heads)
    return tuple(widths)


def build_space(model_config, space_config=None, rng=None, init_std_alpha=0.02,
                init_std_importance=0.1):
    """One SubmoduleState per prunable site of the toy transformer.

    Logits are drawn from zero-mean normals with the supplied generator so
    two builds from the same seed are identical. The alpha spread is kept
    small enough that the initial normalized variance starts inside the
    tangent activation's clamped flat zone: the budget term then picks the
    target candidate before the one-hot terms start sharpening it.
    """
    sc = space_config or SpaceConfig()
    rng = rng or np.random.default_rng(0)
    qkv_full = model_config.heads * model_config.head_dim
    problems = []

    specs = []
    pe_widths, errs = _channel_widths(model_config.embed_dim, sc.patch_embed, "patch_embed")
    problems += errs
    if pe_widths:
        specs.append(SubmoduleSpec(KIND_PATCH_EMBED, -1, model_config.embed_dim,
                                   sc.patch_embed.lo, sc.patch_embed.hi, sc.patch_embed.step,
                                   pe_widths))
    for layer in range(model_config.depth):
        qkv_widths, errs = _channel_widths(qkv_full, sc.qkv, f"qkv{layer}")
        problems += errs
        if qkv_widths:
            per_head = model_config.head_dim * sc.qkv.step
            if abs(per_head - round(per_head)) > 1e-9 or round(per_head) < 1:
                problems.append(f"qkv{layer}: head_dim {model_config.head_dim} * step {sc.qkv.step} "
                                "is not a positive integer (per-head removal granularity)")
            else:
                specs.append(SubmoduleSpec(KIND_QKV, layer, qkv_full,
                                           sc.qkv.lo, sc.qkv.hi, sc.qkv.step,
                                           qkv_widths, group_count=model_config.heads))
        head_widths = _head_widths(model_config.heads, sc.head_lo, sc.head_step)
        specs.append(SubmoduleSpec(KIND_HEADS, layer, model_config.heads,
                                   sc.head_lo / model_config.heads, 1.0,
                                   sc.head_step / model_config.heads, head_widths))
        mlp_widths, errs = _channel_widths(model_config.mlp_dim, sc.mlp, f"mlp{layer}")
        problems += errs
        if mlp_widths:
            specs.append(SubmoduleSpec(KIND_MLP, layer, model_config.mlp_dim,
                                       sc.mlp.lo, sc.mlp.hi, sc.mlp.step, mlp_widths))
    if problems:
        raise ConfigurationError("; ".join(problems))

    states = []
    for spec in specs:
        alpha = E.parameter(rng.normal(0.0, init_std_alpha, size=len(spec.widths)),
                            name=f"alpha.{spec.sid}")
        imp = E.parameter(rng.normal(0.0, init_std_importance, size=spec.full_width),
                          name=f"imp.{spec.sid}")
        states.append(SubmoduleState(spec=spec, alpha=alpha, importance=imp,
                                     live_unit_ids=np.arange(spec.full_width),
                                     widths_live=list(spec.widths)))
    return SearchSpace(submodules=states)


def _lowest_ranked(logits, unit_ids, n):
    """Ids of the n lowest-importance units; ties broken by ascending id."""
    order = np.argsort(-logits, kind="stable")  # descending importance
    return unit_ids[order[len(order) - n:]]


def select_units_to_remove(state, n_drop):
    """Pick which live units go when the width ceiling drops by n_drop.

    The joint Q-K-V group removes evenly across heads (each head sheds its
    own lowest-importance channels) so per-head counts stay equal; other
    kinds remove the globally lowest-importance units.
    """
    if n_drop == 0:
        return np.array([], dtype=np.int64)
    logits = state.importance.data
    ids = state.live_unit_ids
    if state.spec.group_count > 1:
        heads = state.spec.group_count
        per_head = n_drop // heads
        head_dim = state.spec.full_width // heads
        removed = []
        for h in range(heads):
            in_head = ids // head_dim == h
            removed.append(_lowest_ranked(logits[in_head], ids[in_head], per_head))
        return np.sort(np.concatenate(removed))
    return np.sort(_lowest_ranked(logits, ids, n_drop))


def prune_steps(state, steps_to_remove, removed_unit_ids=None):
    """Delete candidate steps (and the units beyond the new width ceiling).

    steps_to_remove indexes the current live grid. Returns the ids of the
    physically removed units. Passing removed_unit_ids replays a logged
    event instead of re-deriving the removal set from importance ranks.
    """
    steps = sorted(set(int(s) for s in steps_to_remove))
    if not steps:
        return np.array([], dtype=np.int64)
    for s in steps:
        if s < 0 or s >= state.d_live:
            raise ValueError(f"{state.sid}: step {s} is not live (D_live={state.d_live})")
    if len(steps) >= state.d_live:
        raise ValueError(f"{state.sid}: removing {len(steps)} steps would empty the submodule")

    keep = [k for k in range(state.d_live) if k not in steps]
    new_widths = [state.widths_live[k] for k in keep]
    n_drop = state.widths_live[-1] - new_widths[-1]

    if removed_unit_ids is None:
        removed = select_units_to_remove(state, n_drop)
    else:
        removed = np.sort(np.asarray(removed_unit_ids, dtype=np.int64))
        if removed.size != n_drop:
            raise ValueError(f"{state.sid}: replayed removal has {removed.size} units, expected {n_drop}")

    state.widths_live = new_widths
    state.alpha = E.parameter(state.alpha.data[keep], name=state.alpha.name)
    if removed.size:
        keep_mask = ~np.isin(state.live_unit_ids, removed)
        state.importance = E.parameter(state.importance.data[keep_mask], name=state.importance.name)
        state.live_unit_ids = state.live_unit_ids[keep_mask]
        state.pruned = True
    return removed


def kept_units_for_width(state, width):
    """The width highest-importance live units (per head for Q-K-V groups)."""
    logits = state.importance.data
    ids = state.live_unit_ids
    if state.spec.group_count > 1:
        heads = state.spec.group_count
        head_dim = state.spec.full_width // heads
        per_head = width // heads
        kept = []
        for h in range(heads):
            in_head = ids // head_dim == h
            order = np.argsort(-logits[in_head], kind="stable")
            kept.append(ids[in_head][order[:per_head]])
        return np.sort(np.concatenate(kept))
    order = np.argsort(-logits, kind="stable")
    return np.sort(ids[order[:width]])


def export_architecture(space):
    """JSON-ready description of the (finished) architecture."""
    subs = []
    for s in space.submodules:
        subs.append({
            "kind": s.spec.kind,
            "layer": s.spec.layer_index,
            "kept_units": [int(u) for u in s.live_unit_ids],
            "kept_steps": [int(w) for w in s.widths_live],
            "full_width": s.spec.full_width,
        })
    return {"submodules": subs}
