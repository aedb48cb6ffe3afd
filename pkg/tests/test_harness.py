from __future__ import annotations

import csv
import io
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from chunkrl.harness.ablation import AXES, rows_to_csv, run_ablation, summarize
from chunkrl.harness.cli import main
from chunkrl.harness.config import OUTPUT_ENV_VAR, ConfigError, load, resolve
from chunkrl.harness.plots import emit_plot, kstar_grid, padded_range
from chunkrl.harness.theory import TheoryReport, grid_expectile, run_suite
from chunkrl.envs import make_env
from chunkrl.envs.behavior import BehaviorPolicySpec
from chunkrl.mdp import ScaleSet

TINY = {
    "env": {"kind": "chain", "params": {"L": 6}},
    "data": {"n_episodes": 10, "behavior": {"epsilon": 0.3}},
    "train": {"tabular": True, "batch_size": 16, "table_lr": 0.1, "offline_steps": 30, "online_steps": 20,
              "eval_interval": 10, "eval_episodes": 3, "log_interval": 10, "gamma": 0.95},
    "scales": {"universe": [1, 3], "h": 3},
}


def _write(tmp_path, doc, name="run.json"):
    doc = {**doc, "output_dir": str(tmp_path / "out")}
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def _pointers(doc):
    with pytest.raises(ConfigError) as exc:
        resolve(doc, {})
    return [p for p, _ in exc.value.diagnostics]


def test_config_errors_carry_json_pointers():
    assert _pointers({"env": {"kind": "chain"}, "bogus": 1}) == ["/bogus"]
    assert _pointers({}) == ["/env"]
    assert _pointers({"env": {}}) == ["/env/kind"]
    assert _pointers({"env": {"kind": "chain"}, "train": {"gamma": 1.5}}) == ["/train/gamma"]
    assert _pointers({"env": {"kind": "chain"}, "selector": "fixed:7"}) == ["/selector"]
    assert _pointers({"env": {"kind": "chain", "params": {"L": -2}}}) == ["/env/params"]


def test_config_layering_and_environment_override(tmp_path):
    rc = resolve({"env": {"kind": "chain"}, "train": {"width": 16}}, {})
    assert rc.train.width == 16 and rc.train.offline_steps == 20_000 and rc.train.depth == 2
    rc = resolve({"env": {"kind": "chain"}, "profile": "paper-defaults"}, {OUTPUT_ENV_VAR: str(tmp_path)})
    assert rc.train.width == 512 and rc.output_dir == tmp_path
    path = rc.echo()
    again = resolve(json.loads(path.read_text()), {})
    assert again.resolved == rc.resolved


def test_invalid_json_is_a_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load(p)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 2
    bad = _write(tmp_path, {**TINY, "bogus": 1}, "bad.json")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert "config error at /bogus" in capsys.readouterr().err
    assert main(["nonsense"]) == 2
    good = _write(tmp_path, TINY)
    assert main(["evaluate", "--config", str(good), "--checkpoint", str(tmp_path / "nope")]) == 1
    pm = _write(tmp_path, {**TINY, "env": {"kind": "pointmass"}}, "pm.json")
    assert main(["oracle", "--config", str(pm)]) == 2


def test_cli_pipeline_end_to_end(tmp_path):
    cfg = str(_write(tmp_path, TINY))
    out = tmp_path / "out"
    assert main(["gen-data", "--config", cfg]) == 0
    assert (out / "dataset.jsonl").exists() and (out / "config.json").exists()
    assert main(["oracle", "--config", cfg]) == 0
    oracle = json.loads((out / "oracle.json").read_text())
    assert oracle["behavior_source"] == "exact" and "adaptive" in oracle["meta_policy_values"]
    assert main(["train-offline", "--config", cfg]) == 0
    assert main(["finetune", "--config", cfg, "--checkpoint", str(out / "agent")]) == 0
    trace = list(csv.DictReader(io.StringIO((out / "trace.csv").read_text())))
    assert trace and set(trace[0]) == {"env_step", "state", "k_star", "region", "executed"}
    assert main(["evaluate", "--config", cfg, "--checkpoint", str(out / "agent"), "--variant", "fixed:1"]) == 0
    assert json.loads((out / "eval.json").read_text())["k_freq"] == {"1": 1.0, "3": 0.0}
    assert main(["ablate", "--config", cfg, "--which", "bootstrap", "--seeds", "2"]) == 0
    assert main(["plot", "--config", cfg, "--input", str(out / "ablation_bootstrap.csv")]) == 0
    ET.fromstring((out / "ablation_bootstrap_curve.svg").read_text())


def test_cli_csv_outputs_are_reproducible(tmp_path):
    outputs = []
    for run in ("a", "b"):
        cfg = str(_write(tmp_path, {**TINY, "output_dir": "x"}, f"{run}.json"))
        d = json.loads(open(cfg).read())
        d["output_dir"] = str(tmp_path / run)
        open(cfg, "w").write(json.dumps(d))
        assert main(["finetune", "--config", cfg]) == 0
        outputs.append({n: (tmp_path / run / n).read_bytes() for n in ("metrics.csv", "trace.csv")})
    assert outputs[0] == outputs[1]


def test_ablation_rows_and_summary():
    rc = resolve(TINY, {})
    rows = run_ablation("criterion", rc, (0,))
    arms = {r["arm"] for r in rows}
    assert arms == {"aqc", "raw_q", "discount_corrected", "random"}
    text = rows_to_csv(rows)
    header = text.splitlines()[0].split(",")
    assert header[:9] == ["axis", "arm", "seed", "step", "phase", "success_rate", "mean_return", "mean_kstar",
                          "status"]
    assert header[9:] == ["freq_k1", "freq_k3"]
    summary = summarize(rows, "online")
    assert set(summary) == arms and all(0 <= v <= 1 for v in summary.values())
    assert "fixed_k" in AXES
    with pytest.raises(ValueError):
        run_ablation("nope", rc, (0,))


def test_plots_are_deterministic_and_valid_svg():
    rows = [{"arm": a, "seed": s, "step": t, "success_rate": (t / 10 + s) / 3, "status": "ok", "phase": "online"}
            for a in ("x", "y") for s in (0, 1) for t in (0, 10, 20)]
    a = emit_plot(rows, "curve", title="demo")
    assert a == emit_plot(list(reversed(rows)), "curve", title="demo")
    root = ET.fromstring(a)
    assert root.tag.endswith("svg")
    trace = [(0, 5), (0, 3), (7, 1)]
    grid = kstar_grid(trace, 3, 3)
    assert grid[0, 0] == 4 and grid[2, 1] == 1 and np.isnan(grid[2, 2])
    ET.fromstring(emit_plot(trace, "kstar", width=3, height=3, k_max=5))
    assert padded_range([1.0, 1.0])[0] < 1.0 < padded_range([1.0, 1.0])[1]
    with pytest.raises(ValueError):
        emit_plot([], "curve")


def test_grid_expectile_matches_weighted_root():
    vals, w = np.array([0.0, 1.0, 4.0]), np.array([0.2, 0.5, 0.3])
    t = grid_expectile(vals, w, 0.9)
    fo = (w * np.where(vals < t, 0.1, 0.9) * (vals - t)).sum()
    assert abs(fo) < 1e-6


def test_theory_report_roundtrip():
    env = make_env("chain", {"L": 6})
    rep = run_suite(env, ScaleSet((1, 3)), 0.95, 0.9, BehaviorPolicySpec(epsilon=0.3), n_random=50,
                    n_episodes=20, fit_steps=200, noise_draws=200)
    assert isinstance(rep, TheoryReport)
    doc = json.loads(rep.dumps())
    names = {c["name"] for c in doc["checks"]}
    assert names == {
        "expectile_bisection_vs_grid", "selector_soundness_stated", "selector_soundness_corrected",
        "dominance_pointwise", "dominance_strict", "noise_immunity_sigma_0.05", "noise_immunity_sigma_0.1",
        *(f"bootstrap_bound_k{k}_eps{e}" for k in (1, 3) for e in (0.1, 0.5)),
        *(f"value_flow_k1_k3_eps{e}" for e in (0.1, 0.5)),
    }
    assert rep.dumps() == run_suite(env, ScaleSet((1, 3)), 0.95, 0.9, BehaviorPolicySpec(epsilon=0.3), n_random=50,
                                    n_episodes=20, fit_steps=200, noise_draws=200).dumps()
