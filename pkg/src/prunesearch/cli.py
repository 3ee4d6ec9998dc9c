"""Command-line surface: search, retrain, eval, baseline, theorems,
gradcheck, plotdata, gendata.

Exit statuses: 0 success, 1 invalid config or bad input, 2 budget miss,
3 divergence. OFB_THREADS caps BLAS parallelism (default 1, which also
makes runs bitwise reproducible)."""

import argparse
import csv
import json
import os
import sys
from pathlib import Path


def _cap_threads():
    n = os.environ.get("OFB_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


_cap_threads()  # before numpy loads its thread pools

import numpy as np  # noqa: E402


def _load_config(args, tau_override=None):
    from . import config as C
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["trainer.seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        overrides["trainer.tau"] = args.tau
    return C.parse_config(args.config, overrides)


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg):
    from . import config as C
    from . import data as D
    if cfg["data.path"]:
        return D.load_dataset(Path(cfg["data.path"]))
    return D.generate(C.data_spec(cfg))


def _write_search_artifacts(out, cfg, result):
    from . import config as C
    from .vit import save_checkpoint
    C.write_resolved(cfg, out / "resolved_config.cfg")
    (out / "searchlog.jsonl").write_text("\n".join(result.log_lines) + "\n")
    (out / "architecture.json").write_text(json.dumps(result.export, indent=1, sort_keys=True))
    save_checkpoint(result.weights, out / "checkpoint.bin", out / "checkpoint.manifest.json",
                    extra={"kept": result.kept, "status": result.status})
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=1, sort_keys=True))


def cmd_search(args):
    from . import config as C
    from . import trainer as T
    cfg = _load_config(args)
    out = _outdir(args)
    data = _dataset(cfg)
    result = T.search(C.train_config(cfg), C.model_config(cfg), data, C.space_config(cfg))
    _write_search_artifacts(out, cfg, result)
    print(f"search: status={result.status} g={result.final_g:.4f} "
          f"tau={cfg['trainer.tau']} accuracy={result.metrics['accuracy']:.4f}")
    return result.exit_code


def cmd_baseline(args):
    from . import config as C
    from . import trainer as T
    cfg = _load_config(args)
    out = _outdir(args)
    data = _dataset(cfg)
    result = T.baseline_threshold_prune(C.train_config(cfg), C.model_config(cfg),
                                        data, C.space_config(cfg))
    _write_search_artifacts(out, cfg, result)
    if result.metrics.get("warning"):
        print(f"baseline: warning: {result.metrics['warning']}", file=sys.stderr)
    print(f"baseline: flops_fraction={result.metrics['cost']['flops_fraction']:.4f} "
          f"accuracy={result.metrics['accuracy']:.4f}")
    return result.exit_code


def _load_pruned(run_dir, cfg, checkpoint="checkpoint"):
    from . import config as C
    from .vit import PrunedModel, load_checkpoint
    run_dir = Path(run_dir)
    weights, extra = load_checkpoint(run_dir / f"{checkpoint}.bin",
                                     run_dir / f"{checkpoint}.manifest.json")
    kept = {sid: np.asarray(ids, dtype=np.int64) for sid, ids in extra["kept"].items()}
    return PrunedModel.from_weights(C.model_config(cfg), kept, weights)


def cmd_retrain(args):
    from . import config as C
    from . import trainer as T
    from .vit import save_checkpoint
    cfg = _load_config(args)
    out = _outdir(args)
    data = _dataset(cfg)
    model = _load_pruned(args.run, cfg, args.checkpoint)
    report = T.retrain(C.train_config(cfg), model, data)
    C.write_resolved(cfg, out / "resolved_config.cfg")
    if report["status"] != T.STATUS_OK:
        (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        print("retrain: diverged", file=sys.stderr)
        return 3
    weights = {name: t.data for name, t in model.params.items()}
    kept = {sid: [int(u) for u in ids] for sid, ids in model.kept.items()}
    save_checkpoint(weights, out / "retrained.bin", out / "retrained.manifest.json",
                    extra={"kept": kept, "status": "retrained"})
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"retrain: before={report['before']['accuracy']:.4f} "
          f"after={report['after']['accuracy']:.4f}")
    return 0


def cmd_eval(args):
    from . import config as C
    from . import trainer as T
    cfg = _load_config(args)
    out = _outdir(args)
    data = _dataset(cfg)
    model = _load_pruned(args.run, cfg, args.checkpoint)
    metrics = T.evaluate(model, data)
    C.write_resolved(cfg, out / "resolved_config.cfg")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    print(f"eval: accuracy={metrics['accuracy']:.4f} loss={metrics['loss']:.4f}")
    return 0


def cmd_theorems(args):
    from . import regularizers as rg
    dims = tuple(int(d) for d in args.dims.split(","))
    report = rg.theorem_suite(n_samples=args.samples, d_range=dims, seed=args.seed or 0)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        out = _outdir(args)
        (out / "theorems.json").write_text(text)
    print(f"theorems: {report['distributions_checked']} distributions, "
          f"{len(report['violations'])} violations, {report['elapsed_s']:.2f}s")
    return 0 if not report["violations"] else 1


def cmd_gradcheck(args):
    from . import diagnostics as dg
    report = dg.run_suite(points_per_primitive=args.points, seed=args.seed or 17)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        out = _outdir(args)
        (out / "gradcheck.json").write_text(text)
    for c in report["checks"]:
        print(f"gradcheck: {c['name']:22s} max_rel_err={c['max_rel_err']:.3e} "
              f"{'pass' if c['pass'] else 'FAIL'}")
    return 0 if report["all_pass"] else 1


def cmd_gendata(args):
    from . import config as C
    from . import data as D
    cfg = _load_config(args)
    out = _outdir(args)
    ds = D.generate(C.data_spec(cfg))
    D.save_dataset(ds, out)
    print(f"gendata: wrote {ds.spec.n_train}+{ds.spec.n_eval} images to {out}")
    return 0


def cmd_plotdata(args):
    out = _outdir(args)
    records = []
    truncated = False
    with open(args.log) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                truncated = True
                break
    if truncated:
        print("plotdata: warning: log truncated, emitting partial output", file=sys.stderr)

    iters = [r for r in records if r.get("type") == "iter"]
    snaps = [r for r in records if r.get("type") == "snapshot"]

    curve_fields = ["t", "epoch", "loss_task", "loss_m", "loss_rec", "loss_total",
                    "g", "lambda", "gamma", "entropy", "variance",
                    "budget_penalty", "importance_penalty"]
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(curve_fields)
        for r in iters:
            w.writerow([r.get(k, "") for k in curve_fields])

    full_widths = {}
    for snap in snaps:
        for sid, sub in snap["submodules"].items():
            full_widths.setdefault(sid, max(sub["widths_live"][-1], len(sub["S_by_rank"])))
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "submodule_id", "unit_rank", "S", "V", "m"])
        for snap in snaps:
            for sid, sub in snap["submodules"].items():
                n_live = len(sub["S_by_rank"])
                for rank in range(1, full_widths[sid] + 1):
                    if rank <= n_live:
                        w.writerow([snap["epoch"], sid, rank,
                                    repr(sub["S_by_rank"][rank - 1]),
                                    repr(sub["V_by_rank"][rank - 1]),
                                    repr(sub["m_by_rank"][rank - 1])])
                    else:
                        w.writerow([snap["epoch"], sid, rank, "", "", ""])

    with open(out / "kept_dims.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["submodule_id", "kept_units", "full_width"])
        if snaps:
            last = snaps[-1]
            for sid, sub in last["submodules"].items():
                w.writerow([sid, len(sub["live_units"]), full_widths[sid]])
    print(f"plotdata: wrote curves/trajectories/kept_dims to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="prunesearch",
                                     description="One-stage prunability search on a toy ViT")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override trainer.seed")
        p.add_argument("--tau", type=float, default=None, help="override trainer.tau")

    p = sub.add_parser("search", help="run the one-stage search")
    common(p)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("baseline", help="two-stage global-threshold baseline")
    common(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("retrain", help="fine-tune a pruned model")
    common(p)
    p.add_argument("--run", required=True, help="directory with search artifacts")
    p.add_argument("--checkpoint", default="checkpoint", help="checkpoint basename")
    p.set_defaults(fn=cmd_retrain)

    p = sub.add_parser("eval", help="evaluate a pruned checkpoint")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", default="checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("theorems", help="one-hot equivalence + identity suite")
    common(p, out_required=False)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--dims", default="2,4,8,16")
    p.set_defaults(fn=cmd_theorems)

    p = sub.add_parser("gradcheck", help="finite-difference gradient sweep")
    common(p, out_required=False)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("plotdata", help="emit CSVs from a search log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plotdata)

    p = sub.add_parser("gendata", help="write a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gendata)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # config and input errors exit 1 with a message
        from . import config as C
        from . import space as sp
        from . import data as D
        if isinstance(exc, (C.ConfigError, sp.ConfigurationError, ValueError, FileNotFoundError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
