"""Command-line entry point: one subcommand per pipeline stage.

Every command accepts ``--config`` (INI file, section ``[pipeline]``) plus
flag overrides, stamps its result with the config hash and seed, and with
``--json`` prints a single JSON object.  Failures exit with status 1 and a JSON
error object.  ``ENAP_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import abstraction, control, core, envs, history, metrics, mining
from .config import PipelineConfig, stage_seed

log = logging.getLogger("enap")


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(seed=args.seed, tau_sim=args.tau_sim, eps_err=args.eps_err, em_iters=args.k,
                              encoder=args.encoder)


def _feature_encoder(args, ds: core.Dataset, cfg: PipelineConfig) -> abstraction.EncoderParams:
    path = getattr(args, "feature_encoder", None)
    if path:
        with open(path, encoding="utf-8") as fh:
            return abstraction.EncoderParams.from_dict(json.load(fh))
    return control.make_feature_encoder(ds, cfg.feature_encoder)


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _annotated(ds: core.Dataset, cfg: PipelineConfig, enc: abstraction.EncoderParams):
    if ds.annotated:
        return ds, None
    feats = abstraction.encode_dataset(enc, ds)
    cb, _ = abstraction.discover_alphabet(feats, cfg.min_cluster_size or None, cfg.min_samples or None,
                                          cfg.refine_kmeans, stage_seed(cfg.seed, "kmeans"), cfg.cluster_selection)
    return abstraction.annotate_dataset(ds, cb, enc), cb


def _history(args, ds: core.Dataset, cfg: PipelineConfig, n_symbols: int) -> history.HistoryEncoder:
    if getattr(args, "history", None):
        return history.load_history_encoder(args.history)
    return history.train_history_encoder(ds, control.history_config(cfg), n_symbols=n_symbols)


# ---------------------------------------------------------------------------
# subcommands


def cmd_demo(args, cfg):
    if args.env == "frozenlake":
        ds = envs.gridworld_demos() if args.n is None else envs.gridworld_demo_set(args.n, cfg.seed)
    else:
        ds = envs.multiphase2d_demos(args.n or 200, stage_seed(cfg.seed, "demos"), args.mode, args.noise)
    core.write_trajectories(ds, args.out)
    return {"out": args.out, "trajectories": len(ds), "steps": ds.n_steps}


def cmd_abstract(args, cfg):
    ds = core.read_trajectories(args.data)
    enc = _feature_encoder(args, ds, cfg)
    feats = abstraction.encode_dataset(enc, ds)
    cb, labels = abstraction.discover_alphabet(feats, cfg.min_cluster_size or None, cfg.min_samples or None,
                                               cfg.refine_kmeans, stage_seed(cfg.seed, "kmeans"),
                                               cfg.cluster_selection)
    ads = abstraction.annotate_dataset(ds, cb, enc)
    core.write_trajectories(ads, args.out)
    if args.codebook:
        abstraction.save_codebook(cb, args.codebook)
    if args.encoder_out:
        _write_json(enc.to_dict(), args.encoder_out)
    return {"out": args.out, "symbols": len(cb), "counts": np.bincount(labels, minlength=len(cb)).tolist()}


def cmd_train_encoder(args, cfg):
    ds = core.read_trajectories(args.data)
    n_sym = int(ds.max_symbol()) + 1
    enc = history.train_history_encoder(ds, control.history_config(cfg), n_symbols=n_sym)
    history.save_history_encoder(enc, args.out)
    rep = history.saturation_report(enc, ds)
    out = {"out": args.out, "mode": enc.mode, "saturation": rep.to_dict(),
           "final_loss": enc.loss_curve[-1] if enc.loss_curve else None}
    if rep.kappa_max is not None:
        out["suggested_tau_sim"] = 1.0 - rep.kappa_max
    return out


def cmd_mine(args, cfg):
    ds = core.read_trajectories(args.data)
    ds, cb = _annotated(ds, cfg, _feature_encoder(args, ds, cfg))
    if cb is not None and args.codebook:
        abstraction.save_codebook(cb, args.codebook)
    n_sym = int(ds.max_symbol()) + 1 if cb is None else len(cb)
    henc = _history(args, ds, cfg, n_sym)
    res = mining.mine(ds, henc, control.mine_config(cfg), alphabet_size=n_sym)
    core.save_pmm(res.pmm, args.out)
    if args.diagnostics:
        with open(args.diagnostics, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(res.diagnostics_jsonl())
    if args.unpruned:
        core.save_pmm(res.unpruned, args.unpruned)
    return {"out": args.out, "states": res.pmm.n_states, "edges": len(res.pmm.edges),
            "unpruned_states": res.unpruned.n_states, "rounds": res.rounds}


def cmd_prune(args, cfg):
    pmm = core.load_pmm(args.pmm)
    verifier = None
    if args.data:
        ds = core.read_trajectories(args.data)
        verifier = lambda m: mining.traces_all(m, ds, cfg.eps_err)  # noqa: E731
    pruned = mining.renumber(mining.stable_phase_prune(pmm, verifier))
    core.save_pmm(pruned, args.out)
    return {"out": args.out, "states_before": pmm.n_states, "states_after": pruned.n_states}


def cmd_train_residual(args, cfg):
    ds = core.read_trajectories(args.data)
    res = control.em_train(ds, _feature_encoder(args, ds, cfg), cfg.em_iters, cfg)
    control.save_bundle(res.bundle, args.out)
    return {"out": args.out, "iterations": res.iterations}


def _make_env(name: str):
    return envs.GridWorld() if name == "frozenlake" else envs.MultiPhase2D()


def _episode(job):
    bundle_dir, env_name, max_steps, seed = job
    bundle = control.load_bundle(bundle_dir)
    env = _make_env(env_name)
    return control.run_episode(env, bundle, max_steps, seed=seed).to_dict()


def cmd_rollout(args, cfg):
    env = _make_env(args.env)
    max_steps = args.max_steps if args.max_steps is not None else getattr(env, "max_steps", 100)
    base = stage_seed(cfg.seed, "rollout")
    jobs = [(args.bundle, args.env, max_steps, base + i) for i in range(args.episodes)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            traces = list(ex.map(_episode, jobs))
    else:
        bundle = control.load_bundle(args.bundle)
        traces = [control.run_episode(env, bundle, max_steps, seed=j[3]).to_dict() for j in jobs]
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            for t in traces:
                fh.write(json.dumps(t) + "\n")
    return {"episodes": len(traces), "success_rate": metrics.success_rate(traces),
            "fallbacks": int(sum(t["fallbacks"] for t in traces))}


def cmd_metrics(args, cfg):
    ds = core.read_trajectories(args.data)
    if args.bundle:
        # the bundle's machine speaks its own alphabet, so relabel the data with it
        b = control.load_bundle(args.bundle)
        pmm, enc = b.pmm, b.encoder
        ds = abstraction.annotate_dataset(ds, b.codebook, enc)
    elif args.pmm:
        pmm = core.load_pmm(args.pmm)
        enc = _feature_encoder(args, ds, cfg)
    else:
        raise ValueError("metrics needs --pmm or --bundle")
    rollouts = None
    if args.rollouts:
        with open(args.rollouts, encoding="utf-8") as fh:
            rollouts = [json.loads(line) for line in fh if line.strip()]
    rep = metrics.structural_metrics(pmm, rollouts, ds, enc, cfg.eps_err)
    if args.out:
        _write_json(rep.to_dict(), args.out)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(rep.to_csv())
    return rep.to_dict()


def cmd_export_dot(args, cfg):
    dot = core.pmm_to_dot(core.load_pmm(args.pmm))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dot)
        return {"out": args.out}
    sys.stdout.write(dot)
    return None


def validate_path(path) -> tuple[str, list[str]]:
    """Detect the artifact kind at ``path`` and list its problems."""
    if os.path.isdir(path):
        b = control.load_bundle(path)
        return "bundle", [str(v) for v in core.pmm_validate(b.pmm)]
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("["):
        PipelineConfig.from_ini(text)
        return "config", []
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        ds = core.read_trajectories(path)
        return "trajectories", [] if len(ds) else ["empty dataset"]
    if "states" in obj and "edges" in obj:
        return "pmm", [str(v) for v in core.pmm_validate(core.pmm_from_dict(obj))]
    if "centroids" in obj:
        cb = abstraction.Codebook.from_dict(obj)
        return "codebook", [] if len(cb) else ["codebook has no centroids"]
    if obj.get("format") == "nnkit_v1":
        return obj.get("kind", "checkpoint"), []
    if "steps" in obj:
        core.read_trajectories(path)
        return "trajectories", []
    return "unknown", ["unrecognised artifact"]


def cmd_validate(args, cfg):
    kind, problems = validate_path(args.artifact)
    return {"artifact": args.artifact, "kind": kind, "violations": problems, "valid": not problems}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file with a [pipeline] section")
    common.add_argument("--seed", type=int)
    common.add_argument("--tau-sim", type=float)
    common.add_argument("--eps-err", type=float)
    common.add_argument("--k", type=int, help="EM iterations")
    common.add_argument("--encoder", choices=["exact", "exact-history", "random-rnn", "trained-rnn"],
                        help="history encoder mode")
    common.add_argument("--json", action="store_true", help="print a JSON result object")

    p = argparse.ArgumentParser(prog="enap", description="Mine state machines from demonstrations and control with them.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("demo", parents=[common], help="write scripted demonstrations as JSONL")
    s.add_argument("env", choices=["frozenlake", "multiphase2d"])
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--mode", choices=["bimodal", "single-goal"], default="bimodal")
    s.add_argument("--noise", type=float, default=0.01)
    s.set_defaults(func=cmd_demo)

    s = sub.add_parser("abstract", parents=[common], help="discover symbols and annotate a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--codebook")
    s.add_argument("--feature-encoder", help="feature encoder checkpoint (default from config)")
    s.add_argument("--encoder-out", help="where to save the feature encoder")
    s.set_defaults(func=cmd_abstract)

    s = sub.add_parser("train-encoder", parents=[common], help="train the history encoder on annotated data")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_encoder)

    s = sub.add_parser("mine", parents=[common], help="mine a machine (annotates first if needed)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--history", help="history encoder checkpoint; otherwise built from --encoder")
    s.add_argument("--feature-encoder")
    s.add_argument("--codebook", help="save the codebook when the data had to be annotated")
    s.add_argument("--diagnostics", help="per-round JSONL diagnostics")
    s.add_argument("--unpruned", help="also save the machine before pruning")
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("prune", parents=[common], help="merge stable phases of a saved machine")
    s.add_argument("pmm")
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="annotated data whose traces the pruning must preserve")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("train-residual", parents=[common], help="run the EM training loop and save a policy bundle")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="bundle directory")
    s.add_argument("--feature-encoder")
    s.set_defaults(func=cmd_train_residual)

    s = sub.add_parser("rollout", parents=[common], help="evaluate a policy bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--env", choices=["frozenlake", "multiphase2d"], default="multiphase2d")
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="episode traces as JSONL")
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("metrics", parents=[common], help="structural metrics of a machine")
    s.add_argument("--pmm")
    s.add_argument("--bundle", help="policy bundle; its codebook relabels --data")
    s.add_argument("--data", required=True, help="annotated dataset (any dataset with --bundle)")
    s.add_argument("--rollouts", help="JSONL traces from rollout")
    s.add_argument("--feature-encoder")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("export-dot", parents=[common], help="Graphviz DOT of a machine")
    s.add_argument("pmm")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_dot)

    s = sub.add_parser("validate", parents=[common], help="check an artifact for well-formedness")
    s.add_argument("artifact")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ENAP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        result = args.func(args, cfg)
    except (core.EnapError, ValueError, KeyError, OSError, RuntimeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stdout if args.json else sys.stderr)
        return 1
    if result is None:
        return 0
    result = {"command": args.command, "config_hash": cfg.config_hash(), "seed": cfg.seed, **result}
    if args.json:
        print(json.dumps(result, default=float))
    else:
        for k, v in result.items():
            print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
