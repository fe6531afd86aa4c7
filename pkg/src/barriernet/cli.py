"""Command-line entry point: generate, train, eval, gradcheck, rollout.

Exit codes: 0 success, 1 internal or numerical failure, 2 user or config error.
"""
import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diffqp, systems, train
from .net import Mlp, load_checkpoint, save_checkpoint
from .systems import ScenarioConfig

log = logging.getLogger("barriernet")


class UserError(Exception):
    """Bad arguments, missing files or invalid configs (exit code 2)."""


def load_scenario(name_or_path) -> ScenarioConfig:
    """A built-in scenario name or a path to a scenario JSON file."""
    path = Path(name_or_path)
    shipped = systems.CONFIG_DIR / f"{name_or_path}.json"
    if name_or_path in systems.SCENARIOS or (shipped.exists() and not path.exists()):
        return systems.default_config(name_or_path)
    if not path.exists():
        raise UserError(f"scenario file not found: {path}")
    try:
        return ScenarioConfig.load(path)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UserError(f"invalid scenario config {path}: {exc}") from exc


def parse_sweep(text):
    """``R=6,7,8,9`` -> ``[{"R": 6.0}, ...]``."""
    if not text:
        return [{}]
    out = []
    for part in text.split(";"):
        key, _, vals = part.partition("=")
        if not vals:
            raise UserError(f"bad --sweep entry {part!r}; expected key=v1,v2,...")
        out.extend({key.strip(): float(v)} for v in vals.split(","))
    return out


def worker_count():
    env = os.environ.get("BARRIERNET_THREADS")
    if not env:
        return 1
    try:
        return max(1, min(int(env), os.cpu_count() or 1))
    except ValueError:
        raise UserError(f"BARRIERNET_THREADS must be an integer, got {env!r}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# Subcommands ------------------------------------------------------------------


def cmd_generate(args):
    cfg = load_scenario(args.scenario)
    if args.count < 0:
        raise UserError("--count must be non-negative")
    out = Path(args.out)
    try:
        ds = train.generate_dataset(cfg, args.count, seed=args.seed)
    except RuntimeError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return 2
    ds.save(out)
    print(f"wrote {len(ds)} trajectories to {out}")
    return 0


def _train_config(args):
    base = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"train config not found: {path}")
        base = json.loads(path.read_text())
    if args.epochs is not None:
        base["epochs"] = args.epochs
    if args.seed is not None:
        base["seed"] = args.seed
    try:
        return train.TrainConfig(**base)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid train config: {exc}") from exc


def cmd_train(args):
    data = Path(args.data)
    if not (data / "manifest.json").exists():
        raise UserError(f"dataset manifest not found: {data / 'manifest.json'}")
    ds = train.Dataset.load(data)
    if len(ds) == 0:
        raise UserError(f"dataset {data} is empty")
    cfg = _train_config(args)
    kind = args.model
    if kind not in train.MODEL_KINDS:
        raise UserError(f"--model must be one of {train.MODEL_KINDS}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, resume = None, None
    if args.resume:
        path = Path(args.resume)
        if not path.exists():
            raise UserError(f"checkpoint not found: {path}")
        model, extra = load_checkpoint(path)
        kind = extra.get("kind", kind)
        resume = {"optimizer": extra["optimizer"], "epoch": extra["epoch"], "curve": extra.get("curve", [])}
    res = train.train(kind, ds, cfg, model=model, resume=resume)
    last = res.curve[-1][0] if res.curve else (resume["epoch"] if resume else 0)
    save_checkpoint(out / "model.json", res.model, kind=kind, epoch=last, optimizer=res.optimizer.state(),
                    curve=[list(c) for c in res.curve], train_config=cfg.to_dict(), scenario=ds.config.to_dict())
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tl, vl in res.curve:
            w.writerow([e, format(tl, ".17g"), format(vl, ".17g")])
    _write_json(out / "config.json", {"kind": kind, "train": cfg.to_dict(), "scenario": ds.config.to_dict(),
                                      "data": str(data)})
    _write_json(out / "summary.json", {"kind": kind, "initial_loss": list(res.initial_loss),
                                       "final": list(res.curve[-1]) if res.curve else None,
                                       "infeasible_samples": res.infeasible_samples})
    print(f"trained {kind} for {len(res.curve) - (len(resume['curve']) if resume else 0)} epochs; "
          f"checkpoint {out / 'model.json'}")
    return 0


def _load_models(paths):
    models = {}
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise UserError(f"checkpoint not found: {path}")
        model, extra = load_checkpoint(path)
        models[extra.get("kind", "barriernet")] = model
    if "fc" in models and "dfb" not in models:
        models["dfb"] = models["fc"]
    return models


def _eval_job(job):
    kind, model_dict, cfg_dict, pert, ep_tuple = job
    cfg = ScenarioConfig.from_dict(cfg_dict).replace(**pert)
    scenario = systems.make_scenario(cfg)
    model = Mlp.from_dict(model_dict) if model_dict else None
    x0, dest, seed = ep_tuple
    ep = systems.Episode(np.array(x0), None if dest is None else np.array(dest), seed)
    metrics, tr = train.rollout_metrics(kind, model, scenario, ep)
    return metrics, tr


def _summary(runs):
    vals = lambda k: [r[k] for r in runs if r.get(k) is not None and np.isfinite(r[k])]  # noqa: E731
    out = {
        "rollouts": len(runs),
        "min_b": min((r["min_b"] for r in runs), default=float("inf")),
        "unsafe_rollouts": sum(r["min_b"] < 0 for r in runs),
        "infeasible_rollouts": sum(bool(r["infeasible"]) for r in runs),
        "mean_control_mse": float(np.mean(vals("control_mse"))) if vals("control_mse") else None,
        "mean_solve_us": float(np.mean(vals("mean_solve_us"))) if vals("mean_solve_us") else None,
    }
    if any("dest_error" in r for r in runs):
        out["mean_dest_error"] = float(np.mean(vals("dest_error")))
    if any("min_gap_ratio" in r for r in runs):
        out["min_gap_ratio"] = min(r["min_gap_ratio"] for r in runs)
    return out


def cmd_eval(args):
    cfg = load_scenario(args.scenario)
    models = _load_models(args.model or [])
    kinds = [k.strip() for k in args.models.split(",")] if args.models else sorted(models)
    for k in kinds:
        if k != "expert" and k not in models:
            raise UserError(f"no checkpoint supplied for model kind {k!r}")
    perts = parse_sweep(args.sweep)
    episodes = train.sample_episodes(cfg, args.count, args.seed)
    ep_tuples = [(ep.x0.tolist(), None if ep.destination is None else ep.destination.tolist(), ep.seed) for ep in episodes]
    jobs = []
    for kind in kinds:
        md = models[kind].to_dict() if kind in models else None
        for pert in perts:
            for et in ep_tuples:
                jobs.append((kind, md, cfg.to_dict(), pert, et))
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_eval_job, jobs))
    else:
        results = [_eval_job(j) for j in jobs]
    out = Path(args.out)
    tdir = out / "trajectories"
    tdir.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for job, (m, tr) in zip(jobs, results):
        kind, _, _, pert, _ = job
        tag = ",".join(f"{k}={v:g}" for k, v in sorted(pert.items())) or "base"
        runs = metrics.setdefault(kind, {}).setdefault(tag, [])
        if tr is not None:
            tr.to_csv(tdir / f"{kind}_{tag.replace('=', '').replace(',', '_')}_{len(runs):03d}.csv")
        runs.append(m)
    doc = {"scenario": cfg.scenario, "seed": args.seed, "count": args.count, "models": {}}
    for kind in sorted(metrics):
        doc["models"][kind] = {tag: {"summary": _summary(runs), "runs": runs} for tag, runs in sorted(metrics[kind].items())}
    _write_json(out / "metrics.json", doc)
    for kind in sorted(metrics):
        for tag, entry in sorted(doc["models"][kind].items()):
            s = entry["summary"]
            print(f"model={kind} {tag} min_b={s['min_b']:.6g} unsafe={s['unsafe_rollouts']} "
                  f"infeasible={s['infeasible_rollouts']} mse={s['mean_control_mse']} solve_us={s['mean_solve_us']}")
    return 0


def cmd_gradcheck(args):
    summary = diffqp.sweep_grad_check(args.count, args.seed)
    cfg = load_scenario(args.scenario) if args.scenario else systems.default_config("merging")
    scenario = systems.make_scenario(cfg)
    ds = train.generate_dataset(cfg, 2, seed=args.seed)
    Z, X, U, _ = ds.samples(stride=max(1, len(ds.trajectories[0]) // 40))
    tcfg = train.TrainConfig(hidden=(16, 16), seed=args.seed)
    model = train.new_model("barriernet", scenario, Z.shape[1], tcfg)
    model.set_normalization(Z)
    err, skipped = train.end_to_end_grad_error("barriernet", model, scenario, Z, X, U, seed=args.seed)
    summary["end_to_end"] = {"scenario": cfg.scenario, "max_rel_error": err, "skipped": skipped}
    ok = summary["pass_rate"] == 1.0 and summary["checked"] == args.count and err <= 1e-4
    summary["verdict"] = "pass" if ok else "fail"
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if ok else 1


def cmd_rollout(args):
    cfg = load_scenario(args.scenario)
    scenario = systems.make_scenario(cfg)
    ep = train.sample_episodes(cfg, 1, args.seed)[0]
    if args.model:
        models = _load_models([args.model])
        kind = args.kind or next(iter(models))
        model = models[kind]
    else:
        kind, model = "expert", None
    metrics, tr = train.rollout_metrics(kind, model, scenario, ep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if tr is not None:
        tr.to_csv(out / f"rollout_{kind}.csv")
    _write_json(out / f"rollout_{kind}.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 1 if metrics.get("error") and not metrics.get("infeasible") else 0


# Parser -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="barriernet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log info-level events")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="roll out the expert and write a dataset")
    g.add_argument("--scenario", required=True, help="scenario name or JSON path")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True, help="dataset directory written by generate")
    t.add_argument("--model", default="barriernet", help="barriernet, fc or dfb")
    t.add_argument("--config", help="train config JSON (TrainConfig fields)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints in closed loop")
    e.add_argument("--scenario", required=True)
    e.add_argument("--model", action="append", help="checkpoint path; repeat for several")
    e.add_argument("--models", help="comma-separated kinds to evaluate (barriernet,dfb,fc,expert)")
    e.add_argument("--sweep", help="config overrides, e.g. R=6,7,8,9")
    e.add_argument("--count", type=int, default=50)
    e.add_argument("--seed", type=int, default=11)
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the layer gradients")
    c.add_argument("--count", type=int, default=500)
    c.add_argument("--seed", type=int, default=7)
    c.add_argument("--scenario", help="scenario for the end-to-end check (default merging)")
    c.add_argument("--out", help="write the JSON report here")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("rollout", help="single closed-loop rollout to CSV")
    r.add_argument("--scenario", required=True)
    r.add_argument("--model", help="checkpoint path (expert when omitted)")
    r.add_argument("--kind", help="model kind to use from the checkpoint (e.g. dfb for an fc checkpoint)")
    r.add_argument("--seed", type=int, default=11)
    r.add_argument("--out", default="rollout")
    r.set_defaults(func=cmd_rollout)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (train.TrainingDivergedError, systems.NonFiniteStateError, diffqp.QpInfeasibleError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
