"""Ablation runner: paired seeds, one row per (arm, seed, eval step)."""

from __future__ import annotations

import csv
import io
from dataclasses import replace

from ..trainer import EvalResult
from .config import RunConfig
from .pipeline import dataset_for, final_eval, finetune, train_offline

AXES = ("criterion", "adaptive", "bootstrap", "kappa", "zscore", "chunk_h", "fixed_k")
KAPPA_SWEEP = (0.5, 0.7, 0.9, 0.93, 0.95, 0.99)
H_SWEEP = (5, 10, 25)
CRITERION_ARMS = ("aqc", "raw_q", "discount_corrected", "random")
TABLE_BUDGET = 20_000_000
COLUMNS = ["axis", "arm", "seed", "step", "phase", "success_rate", "mean_return", "mean_kstar", "status"]


def _arms(which: str, rc: RunConfig) -> list[tuple[str, dict, str | None]]:
    """(arm name, TrainConfig overrides, selector used at evaluation)."""
    h = rc.train.h
    if which == "criterion":
        return [(v, {"selector": v}, v) for v in CRITERION_ARMS]
    if which == "zscore":
        return [("aqc", {"selector": "aqc"}, "aqc"), ("aqc_noz", {"selector": "aqc_noz"}, "aqc_noz")]
    if which == "adaptive":
        return [
            ("single_critic_fixed_h", {"universe": (h,), "selector": f"fixed:{h}"}, f"fixed:{h}"),
            ("multi_critic_fixed_h", {"selector": f"fixed:{h}"}, f"fixed:{h}"),
            ("multi_critic_adaptive", {"selector": "aqc"}, "aqc"),
        ]
    if which == "fixed_k":
        return [("aqc", {"selector": "aqc"}, "aqc")] + [
            (f"fixed_{k}", {"selector": f"fixed:{k}"}, f"fixed:{k}") for k in rc.train.scales
        ]
    if which == "bootstrap":
        return [(f"boot_{b}", {"bootstrap": b}, None) for b in ("vh", "v1", "qh")]
    if which == "kappa":
        return [(f"kappa_{k:g}", {"kappa": k}, None) for k in KAPPA_SWEEP]
    if which == "chunk_h":
        return [(f"h_{v}", {"h": v}, None) for v in H_SWEEP]
    raise ValueError(f"unknown ablation axis {which!r}; choose from {AXES}")


def _shares_critics(which: str) -> bool:
    # Arms that differ only in the selector reuse one offline-trained agent per seed.
    return which in ("criterion", "zscore", "fixed_k")


def _feasible(rc: RunConfig, cfg) -> bool:
    env = rc.make_env()
    if not (env.discrete and cfg.tabular):
        return True
    return env.n_states * env.n_actions ** cfg.h <= TABLE_BUDGET


def _row(which, arm, seed, step, phase, res: EvalResult | None, k_scales, status="ok") -> dict:
    row = {"axis": which, "arm": arm, "seed": seed, "step": step, "phase": phase, "status": status}
    if res is not None:
        row.update(success_rate=res.success_rate, mean_return=res.mean_return, mean_kstar=res.mean_kstar)
        row.update({f"freq_k{k}": res.k_freq.get(k, 0.0) for k in k_scales})
    return row


def run_ablation(which: str, rc: RunConfig, seeds=(0, 1, 2, 3)) -> list[dict]:
    """Train every arm on identical data per seed; evaluate after offline and at online eval points."""
    arms = _arms(which, rc)
    rows = []
    for seed in seeds:
        data = dataset_for(replace(rc, seed=int(seed)))
        shared = None
        for arm, overrides, variant in arms:
            cfg = replace(rc.train, seed=int(seed), **overrides)
            if not _feasible(rc, cfg):
                rows.append(_row(which, arm, seed, cfg.offline_steps, "offline", None, (), "skipped_table_budget"))
                continue
            if _shares_critics(which):
                if shared is None:
                    shared = train_offline(rc, data, replace(cfg, selector="aqc"))
                run = shared
            else:
                run = train_offline(rc, data, cfg)
            ks = list(cfg.scales)
            rows.append(_row(which, arm, seed, cfg.offline_steps, "offline", final_eval(rc, run.agent, variant), ks))
            if cfg.online_steps > 0:
                tuned = finetune(rc, run, cfg)
                for t, res in tuned.online.evals:
                    rows.append(_row(which, arm, seed, cfg.offline_steps + t, "online", res, ks))
                if not tuned.online.evals or tuned.online.evals[-1][0] != cfg.online_steps:
                    res = final_eval(rc, tuned.agent, variant)
                    rows.append(_row(which, arm, seed, cfg.offline_steps + cfg.online_steps, "online", res, ks))
    return rows


def _cell(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else v


def rows_to_csv(rows: list[dict]) -> str:
    extra = sorted({c for r in rows for c in r if c not in COLUMNS}, key=lambda c: int(c[len("freq_k"):]))
    cols = COLUMNS + extra
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def summarize(rows: list[dict], phase: str | None = None) -> dict[str, float]:
    """Mean success per arm at each arm's last eval step."""
    last: dict[tuple, dict] = {}
    for r in rows:
        if r.get("status") != "ok" or (phase and r["phase"] != phase):
            continue
        key = (r["arm"], r["seed"])
        if key not in last or r["step"] >= last[key]["step"]:
            last[key] = r
    out: dict[str, list] = {}
    for (arm, _), r in last.items():
        out.setdefault(arm, []).append(r["success_rate"])
    return {arm: sum(v) / len(v) for arm, v in out.items()}
