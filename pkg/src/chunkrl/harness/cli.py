"""Command-line entry point: ``chunkrl <subcommand> --config run.json``.

Exit codes: 0 on success, 2 on configuration or usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from ..mdp import ScaleSet, save_dataset
from ..oracle import build_oracle_tables, empirical_chunk_probs, MetaPolicySpec, evaluate_meta_policy
from ..envs import markov_behavior_table
from .ablation import AXES, rows_to_csv, run_ablation, summarize
from .config import ConfigError, RunConfig, load
from .pipeline import dataset_for, final_eval, finetune, load_agent, save_agent, train_offline
from .plots import emit_plot
from .theory import run_suite

log = logging.getLogger("chunkrl")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)
    return path


def _trace_csv(trace, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in trace:
        w.writerow([json.dumps(list(v)) if isinstance(v, tuple) else v for v in row])
    return buf.getvalue()


def _eval_json(res) -> str:
    return json.dumps(
        {"success_rate": res.success_rate, "mean_return": res.mean_return, "mean_kstar": res.mean_kstar,
         "k_freq": {str(k): v for k, v in res.k_freq.items()}},
        indent=1, sort_keys=True,
    ) + "\n"


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(rc: RunConfig, args) -> int:
    data = dataset_for(rc)
    path = rc.output_dir / "dataset.jsonl"
    save_dataset(data, path)
    log.info("%d episodes, %d transitions -> %s", len(data), data.n_transitions, path)
    return 0


def _oracle_chunk_probs(rc: RunConfig, env, scales: ScaleSet):
    if rc.behavior.persistence == 0.0 and rc.data_path is None:
        return {"behavior": markov_behavior_table(env, rc.behavior)}, "exact"
    data = dataset_for(rc)
    probs = {}
    for k in scales:
        p, n = empirical_chunk_probs(data, env.n_states, env.n_actions, k)
        # States absent from the data get a uniform chunk distribution so every baseline is defined.
        p[n == 0] = 1.0 / p.shape[1]
        probs[k] = p
    return {"chunk_probs": probs}, "empirical"


def cmd_oracle(rc: RunConfig, args) -> int:
    env = rc.make_env()
    if not env.discrete:
        raise ConfigError([("/env/kind", "the oracle needs a discrete environment")])
    cfg = rc.train
    kw, source = _oracle_chunk_probs(rc, env, cfg.scales)
    tables = build_oracle_tables(env, cfg.gamma, cfg.scales, cfg.kappa, **kw)
    out = tables.to_json()
    out["behavior_source"] = source
    out["meta_policy_values"] = {
        "adaptive": evaluate_meta_policy(env, MetaPolicySpec.adaptive(tables.k_dagger), tables).tolist(),
        **{f"fixed_{k}": evaluate_meta_policy(env, MetaPolicySpec.fixed(k), tables).tolist() for k in cfg.scales},
    }
    _write(rc.output_dir / "oracle.json", json.dumps(_json_safe(out), indent=1, sort_keys=True) + "\n")
    return 0


def cmd_train_offline(rc: RunConfig, args) -> int:
    run = train_offline(rc)
    _write(rc.output_dir / "metrics.csv", run.log.to_csv())
    save_agent(run.agent, rc.output_dir / "agent", {"phase": "offline", "steps": rc.train.offline_steps})
    _write(rc.output_dir / "eval.json", _eval_json(final_eval(rc, run.agent)))
    return 0


def cmd_finetune(rc: RunConfig, args) -> int:
    run = train_offline(rc) if args.checkpoint is None else _resume(rc, args.checkpoint)
    tuned = finetune(rc, run)
    _write(rc.output_dir / "metrics.csv", tuned.log.to_csv())
    _write(rc.output_dir / "trace.csv",
           _trace_csv(tuned.online.trace, ["env_step", "state", "k_star", "region", "executed"]))
    save_agent(tuned.agent, rc.output_dir / "agent", {"phase": "online", "steps": rc.train.online_steps})
    _write(rc.output_dir / "eval.json", _eval_json(final_eval(rc, tuned.agent)))
    return 0


def _resume(rc: RunConfig, checkpoint: str):
    from ..trainer import MetricsLog, ReplayBuffer
    from .pipeline import TrainedRun

    agent = load_agent(rc.train, rc.make_env(), checkpoint)
    buffer = ReplayBuffer.from_dataset(dataset_for(rc), rc.train)
    return TrainedRun(agent, buffer, MetricsLog(rc.train.scales))


def cmd_evaluate(rc: RunConfig, args) -> int:
    cfg = rc.train if args.episodes is None else replace(rc.train, eval_episodes=args.episodes)
    agent = load_agent(cfg, rc.make_env(), args.checkpoint)
    res = final_eval(rc, agent, args.variant)
    _write(rc.output_dir / "eval.json", _eval_json(res))
    _write(rc.output_dir / "eval_trace.csv", _trace_csv(res.trace, ["episode", "state", "k_star", "region"]))
    return 0


def cmd_ablate(rc: RunConfig, args) -> int:
    rows = run_ablation(args.which, rc, tuple(range(args.seeds)))
    _write(rc.output_dir / f"ablation_{args.which}.csv", rows_to_csv(rows))
    summary = {"final_online": summarize(rows, "online"), "offline": summarize(rows, "offline")}
    _write(rc.output_dir / f"ablation_{args.which}_summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_verify_theory(rc: RunConfig, args) -> int:
    env = rc.make_env()
    if not env.discrete:
        raise ConfigError([("/env/kind", "theory checks need a discrete environment")])
    cfg = rc.train
    report = run_suite(env, cfg.scales, cfg.gamma, cfg.kappa, rc.behavior, seed=rc.seed, n_random=args.draws,
                       n_episodes=rc.n_episodes, noise_draws=args.noise_draws)
    _write(rc.output_dir / "theory.json", report.dumps() + "\n")
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: measured={c.measured:.6g} bound={c.bound:.6g}")
    return 1 if (args.strict and not report.all_passed) else 0


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_plot(rc: RunConfig, args) -> int:
    rows = _read_csv(args.input)
    if args.kind == "curve":
        svg = emit_plot(rows, "curve", metric=args.metric, title=args.title or Path(args.input).stem)
    else:
        env = rc.make_env()
        if not hasattr(env, "W"):
            raise ConfigError([("/env/kind", "k* heatmaps need a grid environment")])
        pairs = [(int(r["state"]), int(r["k_star"])) for r in rows]
        svg = emit_plot(pairs, "kstar", width=env.W, height=env.H, title=args.title or "mean k*",
                        k_max=rc.train.h)
    out = Path(args.out) if args.out else rc.output_dir / (Path(args.input).stem + f"_{args.kind}.svg")
    _write(out, svg)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "oracle": cmd_oracle,
    "train-offline": cmd_train_offline,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "verify-theory": cmd_verify_theory,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkrl", description="Adaptive chunked critics: data, training, checks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="RunConfig JSON file")
        if name == "finetune":
            p.add_argument("--checkpoint", help="start from a saved agent instead of training offline")
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--variant", help="selector override, e.g. raw_q or fixed:5")
            p.add_argument("--episodes", type=int)
        if name == "ablate":
            p.add_argument("--which", required=True, choices=AXES)
            p.add_argument("--seeds", type=int, default=4)
        if name == "verify-theory":
            p.add_argument("--draws", type=int, default=1000)
            p.add_argument("--noise-draws", type=int, default=10_000)
            p.add_argument("--strict", action="store_true", help="exit 1 if any check fails")
        if name == "plot":
            p.add_argument("--input", required=True, help="ablation CSV or selection trace CSV")
            p.add_argument("--kind", choices=("curve", "kstar"), default="curve")
            p.add_argument("--metric", default="success_rate")
            p.add_argument("--title")
            p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = load(args.config)
        rc.echo()
        return COMMANDS[args.command](rc, args)
    except ConfigError as exc:
        for pointer, msg in exc.diagnostics:
            print(f"config error at {pointer or '/'}: {msg}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if getattr(exc, "filename", None) == args.config else 1
    except Exception as exc:  # noqa: BLE001 - any pipeline failure maps to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
