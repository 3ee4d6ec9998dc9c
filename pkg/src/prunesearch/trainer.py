"""Search, retraining, evaluation, and the two-stage threshold baseline.

The search loop jointly optimizes supernet weights, importance logits, and
architecture logits on one objective: task cross-entropy + mask
regularization + masked-patch reconstruction. Weights use one adaptive
optimizer, the score group a second one with beta1 = 0.5. The blend
coefficient and masking ratio advance linearly each iteration; every
prune_interval iterations (post warmup) dead candidates are removed. Once
the budget is met and every distribution is one-hot, the remaining
candidates are collapsed, masks harden, and training continues on the
task (plus reconstruction, by default) until the epoch budget runs out.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from . import cost as cm
from . import masking as mk
from . import pruner as pr
from . import regularizers as rg
from . import scores as sc
from . import space as sp
from . import vit

STATUS_OK = "ok"
STATUS_BUDGET_MISS = "budget-miss"
STATUS_DIVERGED = "diverged"

EXIT_CODES = {STATUS_OK: 0, STATUS_BUDGET_MISS: 2, STATUS_DIVERGED: 3}


@dataclass
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int = -1           # -1: a fifth of the epoch budget
    batch_size: int = 16
    lr_main: float = 1e-3
    lr_score: float = 1e-3
    beta1_score: float = 0.5
    weight_decay: float = 0.0
    tau: float = 0.5
    mu1: float = 0.5
    mu2: float = 100.0
    mu3: float = 2e-5
    eta: float = 0.2
    prune_interval: int = -1          # -1: a third of an epoch
    finish_tolerance: float = 0.05
    onehot_tol: float = 1e-3
    seed: int = 0
    lambda_fixed: float = -1.0        # >= 0 pins the blend coefficient (ablations)
    gamma_start: float = 0.01
    gamma_end: float = 0.25
    retrain_epochs: int = 15
    keep_rec_after_finish: bool = True

    def resolved_warmup(self):
        return self.warmup_epochs if self.warmup_epochs >= 0 else max(1, round(0.2 * self.epochs))

    def reg_weights(self):
        return rg.RegularizerWeights(mu1=self.mu1, mu2=self.mu2, mu3=self.mu3, eta=self.eta)


class Adam:
    """Adaptive-moment optimizer over named tensors; moments survive pruning
    by shrinking alongside their parameter."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def replace(self, name, tensor, keep_idx):
        self.params[name] = tensor
        self.m[name] = self.m[name][keep_idx]
        self.v[name] = self.v[name][keep_idx]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1; m += (1 - self.beta1) * g
            v *= self.beta2; v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class SearchResult:
    status: str
    log_lines: list                   # serialized JSON strings, in order
    export: dict
    weights: dict                     # materialized pruned-model weights
    kept: dict
    final_g: float
    metrics: dict
    model_config: object
    space: object = None
    supernet: object = None

    @property
    def exit_code(self):
        return EXIT_CODES[self.status]


def _record(line_list, record):
    line_list.append(json.dumps(record, sort_keys=True))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    full = n // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(full)]


def _epoch_snapshot(space, lam, t, epoch):
    subs = {}
    for state in space.submodules:
        snap = sc.snapshot_bimask(state, lam)
        S = sc.importance_scores(state).data
        V_rank = sc.sparsity_scores(state).data
        perm = snap.permutation
        subs[state.sid] = {
            "S_by_rank": [float(x) for x in S[perm]],
            "V_by_rank": [float(x) for x in V_rank],
            "m_by_rank": [float(x) for x in snap.values.data[perm]],
            "p": [float(x) for x in pr._softmax(state.alpha.data)],
            "widths_live": [int(w) for w in state.widths_live],
            "live_units": [int(u) for u in state.live_unit_ids],
        }
    return {"type": "snapshot", "t": t, "epoch": epoch, "submodules": subs}


def search(config, model_config, data, space_config=None):
    """Run the one-stage prunability search; see the module docstring."""
    rng = np.random.default_rng(config.seed)
    space = sp.build_space(model_config, space_config, rng=rng)
    model = vit.Supernet(model_config, rng)
    coeffs = cm.calibrate(model_config)
    weights = config.reg_weights()

    n_train = data.train_x.shape[0]
    iters_per_epoch = max(1, n_train // config.batch_size)
    total_iters = config.epochs * iters_per_epoch
    warmup_iters = config.resolved_warmup() * iters_per_epoch
    interval = config.prune_interval if config.prune_interval > 0 \
        else max(1, -(-iters_per_epoch // 3))

    lam_sched = sc.LambdaSchedule(total_steps=total_iters)
    gamma_sched = mk.MaskingSchedule(config.gamma_start, config.gamma_end,
                                     total_steps=total_iters, rng_seed=config.seed)
    schedule = pr.PruneSchedule(interval=interval, eta=config.eta, warmup_iters=warmup_iters)

    opt_w = Adam({n: t for n, t in model.params.items()}, lr=config.lr_main,
                 weight_decay=config.weight_decay)
    score_params = {}
    for s in space.submodules:
        score_params[s.alpha.name] = s.alpha
        score_params[s.importance.name] = s.importance
    opt_s = Adam(score_params, lr=config.lr_score, beta1=config.beta1_score)

    def on_shrink(state, keep_steps, kept_mask):
        opt_s.replace(state.alpha.name, state.alpha, np.asarray(keep_steps, dtype=np.int64))
        opt_s.replace(state.importance.name, state.importance, kept_mask)

    lines = []
    finished = False
    finish_t = None
    running_min_g = np.inf
    last_good = {n: t.data.copy() for n, t in model.params.items()}
    tokens = model_config.tokens
    status = STATUS_BUDGET_MISS

    t = 0
    for epoch in range(config.epochs):
        for idx in _batches(n_train, config.batch_size, rng):
            t += 1
            batch_x = data.train_x[idx]
            batch_y = data.train_y[idx]
            lam = 0.0 if finished else (
                config.lambda_fixed if config.lambda_fixed >= 0 else lam_sched.value(t))
            if finished:
                gamma_t = config.gamma_end if config.keep_rec_after_finish else 0.0
            else:
                gamma_t = mk.gamma(gamma_sched, t)
            mask_pos = mk.sample_batch_masks(len(idx), tokens, gamma_t, rng)

            try:
                p_map = {s.sid: s.p() for s in space.submodules}
                masks = sc.snapshot_all(space, lam, p_map)
                out = model.forward(batch_x, masks, space, mask_pos)
                task = E.cross_entropy(out.logits, batch_y)
                g = cm.g_of_v(space, coeffs, p_map)
                l_m, parts = rg.total_mask_loss(space, weights, config.tau, g, p_map)
                l_rec = vit.reconstruct_loss(out, batch_x, model_config.patch_size)
                total = E.add(E.add(task, l_m), l_rec)
                opt_w.zero_grad()
                opt_s.zero_grad()
                total.backward()
            except E.NonFiniteError:
                _record(lines, {"type": "abort", "t": t, "reason": "non-finite loss"})
                model_weights = last_good
                for name, tensor in model.params.items():
                    tensor.data = model_weights[name]
                return _finalize_run(STATUS_DIVERGED, config, model_config, data, model,
                                     space, coeffs, lines, finished, t)
            opt_w.step()
            opt_s.step()

            g_value = g.item()
            running_min_g = min(running_min_g, g_value)
            _record(lines, {
                "type": "iter", "t": t, "epoch": epoch,
                "loss_task": task.item(), "loss_m": l_m.item(), "loss_rec": l_rec.item(),
                "loss_total": total.item(), "g": g_value, "lambda": lam, "gamma": gamma_t,
                **parts,
            })

            if schedule.due(t):
                events = pr.maybe_prune(space, schedule, t, on_shrink=on_shrink)
                for ev in events:
                    _record(lines, ev.to_record())
                g_now = cm.g_of_v(space, coeffs).item()
                if not finished and pr.finish_check(space, g_now, config.tau,
                                                    config.finish_tolerance, config.onehot_tol):
                    for ev in pr.finalize(space, t, on_shrink=on_shrink):
                        _record(lines, ev.to_record())
                    finished = True
                    finish_t = t
                    schedule.finish_flag = True
                    status = STATUS_OK
                    _record(lines, {"type": "finish", "t": t,
                                    "g": cm.g_of_v(space, coeffs).item()})
        _record(lines, _epoch_snapshot(space, 0.0 if finished else lam_sched.value(t), t, epoch))
        last_good = {n: tensor.data.copy() for n, tensor in model.params.items()}

    return _finalize_run(status, config, model_config, data, model, space, coeffs,
                         lines, finished, finish_t if finished else t)


def _finalize_run(status, config, model_config, data, model, space, coeffs, lines,
                  finished, t):
    if not finished:  # harden anyway so the export is a concrete architecture
        for ev in pr.finalize(space, t):
            _record(lines, ev.to_record())
    export = sp.export_architecture(space)
    pruned = vit.materialize(model, space)
    metrics = evaluate(pruned, data)
    final_g = cm.g_of_v(space, coeffs).item()
    metrics["g_fraction"] = final_g
    metrics["tau"] = config.tau
    metrics["status"] = status
    metrics["cost"] = cm.cost_report(export, model_config, coeffs)
    _record(lines, {"type": "result", "t": t, "status": status, "g": final_g,
                    "accuracy": metrics["accuracy"]})
    weights = {name: tensor.data for name, tensor in pruned.params.items()}
    return SearchResult(status=status, log_lines=lines, export=export, weights=weights,
                        kept={k: [int(u) for u in v] for k, v in pruned.kept.items()},
                        final_g=final_g, metrics=metrics, model_config=model_config,
                        space=space, supernet=model)


def evaluate(model, data, batch_size=256):
    """Deterministic held-out evaluation of a pruned model."""
    n = data.eval_x.shape[0]
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        xb = data.eval_x[start:start + batch_size]
        yb = data.eval_y[start:start + batch_size]
        logits = model.forward(xb)
        loss_sum += E.cross_entropy(logits, yb).item() * len(yb)
        correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return {"accuracy": correct / n, "loss": loss_sum / n, "n_eval": int(n)}


def retrain(config, model, data):
    """Supervised fine-tuning of a materialized model (no masks, no extras)."""
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(dict(model.params), lr=config.lr_main, weight_decay=config.weight_decay)
    before = evaluate(model, data)
    n_train = data.train_x.shape[0]
    history = []
    for epoch in range(config.retrain_epochs):
        for idx in _batches(n_train, config.batch_size, rng):
            loss = E.cross_entropy(model.forward(data.train_x[idx]), data.train_y[idx])
            if not np.isfinite(loss.data):
                return {"status": STATUS_DIVERGED, "before": before, "history": history}
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(evaluate(model, data)["accuracy"])
    after = evaluate(model, data)
    return {"status": STATUS_OK, "before": before, "after": after, "history": history}


def baseline_threshold_prune(config, model_config, data, space_config=None):
    """Two-stage comparison scheme: learn importance scores first, then pick
    one global threshold whose grid-rounded architecture meets the budget."""
    stage1 = TrainConfig(**{**config.__dict__})
    stage1.mu1 = 0.0
    stage1.mu2 = 0.0
    stage1.lambda_fixed = 1.0          # masks carry importance only
    stage1.gamma_start = 0.0
    stage1.gamma_end = 0.0
    stage1.finish_tolerance = -1.0     # finish_check can never fire below tau*(1-...)
    stage1.prune_interval = 10 ** 9    # no trigger events

    rng = np.random.default_rng(stage1.seed)
    space = sp.build_space(model_config, space_config, rng=rng)
    model = vit.Supernet(model_config, rng)
    coeffs = cm.calibrate(model_config)

    opt_w = Adam(dict(model.params), lr=stage1.lr_main, weight_decay=stage1.weight_decay)
    score_params = {}
    for s in space.submodules:
        score_params[s.importance.name] = s.importance
    opt_s = Adam(score_params, lr=stage1.lr_score, beta1=stage1.beta1_score)

    n_train = data.train_x.shape[0]
    for epoch in range(stage1.epochs):
        for idx in _batches(n_train, stage1.batch_size, rng):
            masks = sc.snapshot_all(space, 1.0)
            out = model.forward(data.train_x[idx], masks, space)
            task = E.cross_entropy(out.logits, data.train_y[idx])
            penalty = E.mul(rg.importance_penalty(
                [sc.importance_scores(s) for s in space.submodules]), E.constant(stage1.mu3))
            loss = E.add(task, penalty)
            opt_w.zero_grad()
            opt_s.zero_grad()
            loss.backward()
            opt_w.step()
            opt_s.step()

    kept_widths, warning = threshold_architecture(space, model_config, coeffs, config.tau)
    kept = {}
    for state in space.submodules:
        kept[state.sid] = sp.kept_units_for_width(state, kept_widths[state.sid])
    pruned = vit.PrunedModel.from_supernet(model, kept)
    export = {"submodules": [{
        "kind": s.spec.kind, "layer": s.spec.layer_index,
        "kept_units": [int(u) for u in kept[s.sid]],
        "kept_steps": [int(kept_widths[s.sid])],
        "full_width": s.spec.full_width,
    } for s in space.submodules]}
    metrics = evaluate(pruned, data)
    metrics["cost"] = cm.cost_report(export, model_config, coeffs)
    metrics["warning"] = warning
    weights = {name: tensor.data for name, tensor in pruned.params.items()}
    return SearchResult(status=STATUS_OK, log_lines=[], export=export, weights=weights,
                        kept={k: [int(u) for u in v] for k, v in kept.items()},
                        final_g=metrics["cost"]["flops_fraction"], metrics=metrics,
                        model_config=model_config, space=space, supernet=model)


def threshold_architecture(space, model_config, coeffs, tau):
    """Binary-search a global importance threshold; kept counts snap down to
    the candidate grid. Returns ({sid: width}, warning_or_None)."""
    def widths_at(theta):
        out = {}
        for state in space.submodules:
            S = 1.0 / (1.0 + np.exp(-state.importance.data))
            kept_count = int((S >= theta).sum())
            grid = [w for w in state.widths_live if w <= kept_count]
            out[state.sid] = grid[-1] if grid else state.widths_live[0]
        return out

    def fraction(widths):
        export = {"submodules": [{
            "kind": s.spec.kind, "layer": s.spec.layer_index,
            "kept_units": list(range(widths[s.sid])), "kept_steps": [widths[s.sid]],
            "full_width": s.spec.full_width} for s in space.submodules]}
        flops, _ = cm.discrete_cost(export, model_config)
        return flops / coeffs.full_flops

    lo, hi = 0.0, 1.0
    if fraction(widths_at(1.0)) > tau:
        return widths_at(1.0), f"budget {tau} unreachable within the grid; exporting the floor"
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if fraction(widths_at(mid)) <= tau:
            hi = mid
        else:
            lo = mid
    return widths_at(hi), None
