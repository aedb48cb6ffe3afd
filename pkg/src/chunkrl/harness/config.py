"""Run configuration: JSON schema, profiles and resolution into typed objects."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from ..envs import ENV_KINDS, BehaviorPolicySpec, make_env
from ..selector import parse_variant
from ..trainer import TrainConfig

OUTPUT_ENV_VAR = "CHUNKRL_OUTPUT"

_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("h", "universe", "selector", "seed")]
_NUM = {"type": "number"}
_INT = {"type": "integer"}

_TRAIN_TYPES = {
    "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "kappa": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "n_candidates": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "table_lr": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "ema_tau": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "n_q": {"type": "integer", "minimum": 1},
    "width": {"type": "integer", "minimum": 1},
    "depth": {"type": "integer", "minimum": 1},
    "tabular": {"type": "boolean"},
    "utd": {"type": "integer", "minimum": 1},
    "flow_steps": {"type": "integer", "minimum": 1},
    "offline_steps": {"type": "integer", "minimum": 0},
    "online_steps": {"type": "integer", "minimum": 0},
    "warmup_steps": {"type": "integer", "minimum": 0},
    "mix_ratio": {"type": "number", "minimum": 0, "maximum": 1},
    "buffer_capacity": {"type": "integer", "minimum": 1},
    "stride": {"type": "integer", "minimum": 1},
    "bootstrap": {"enum": ["vh", "v1", "qh"]},
    "eval_interval": {"type": "integer", "minimum": 0},
    "eval_episodes": {"type": "integer", "minimum": 1},
    "log_interval": {"type": "integer", "minimum": 0},
}
assert set(_TRAIN_TYPES) == set(_TRAIN_KEYS), "schema out of sync with TrainConfig"

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["env"],
    "properties": {
        "env": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": sorted(ENV_KINDS)},
                "params": {"type": "object"},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_episodes": {"type": "integer", "minimum": 1},
                "path": {"type": ["string", "null"]},
                "behavior": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
                        "persistence": {"type": "number", "minimum": 0, "maximum": 1},
                        "epsilon_contact": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                        "ou_theta": {"type": "number", "minimum": 0},
                        "ou_sigma": {"type": "number", "minimum": 0},
                        "expert_gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
            },
        },
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_TYPES},
        "scales": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "universe": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "h": {"type": "integer", "minimum": 1},
            },
        },
        "selector": {"type": "string", "pattern": r"^(aqc|aqc_noz|raw_q|discount_corrected|random|fixed:[0-9]+)$"},
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "profile": {"enum": ["desk", "paper-defaults"]},
    },
}

PROFILES = {
    "desk": {"width": 64, "depth": 2, "offline_steps": 20_000, "online_steps": 5_000, "eval_interval": 1_000},
    "paper-defaults": {
        "width": 512,
        "depth": 4,
        "offline_steps": 1_000_000,
        "online_steps": 1_000_000,
        "eval_interval": 50_000,
        "batch_size": 256,
        "lr": 3e-4,
        "gamma": 0.99,
        "utd": 1,
        "ema_tau": 0.005,
        "n_q": 2,
        "flow_steps": 10,
    },
}

DEFAULTS = {
    "data": {"n_episodes": 200, "path": None, "behavior": {}},
    "train": {},
    "scales": {"universe": [1, 5, 10, 25], "h": 5},
    "selector": "aqc",
    "output_dir": "runs/default",
    "seed": 0,
    "profile": "desk",
}


class ConfigError(ValueError):
    """Validation failure; ``diagnostics`` holds ``(json_pointer, message)`` pairs."""

    def __init__(self, diagnostics: list[tuple[str, str]]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{p or '/'}: {m}" for p, m in diagnostics))


def _pointer(parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def _diagnostics(error: jsonschema.ValidationError) -> list[tuple[str, str]]:
    base = list(error.absolute_path)
    if error.validator == "required":
        missing = [k for k in error.validator_value if k not in error.instance]
        return [(_pointer(base + [k]), "required property is missing") for k in missing]
    if error.validator == "additionalProperties":
        allowed = set(error.schema.get("properties", {}))
        extra = sorted(k for k in error.instance if k not in allowed)
        return [(_pointer(base + [k]), "unknown key") for k in extra]
    return [(_pointer(base), error.message)]


def validate(doc) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    diags = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        diags += _diagnostics(err)
    if diags:
        raise ConfigError(diags)


@dataclass
class RunConfig:
    env_kind: str
    env_params: dict
    behavior: BehaviorPolicySpec
    n_episodes: int
    data_path: str | None
    train: TrainConfig
    output_dir: Path
    seed: int
    profile: str
    resolved: dict

    def make_env(self):
        return make_env(self.env_kind, self.env_params)

    def env_factory(self):
        kind, params = self.env_kind, copy.deepcopy(self.env_params)
        return lambda: make_env(kind, params)

    def with_train(self, **changes) -> "RunConfig":
        from dataclasses import replace

        doc = copy.deepcopy(self.resolved)
        for k, v in changes.items():
            if k in ("h", "universe"):
                doc["scales"][k] = list(v) if k == "universe" else v
            elif k == "selector":
                doc["selector"] = v
            elif k == "seed":
                doc["seed"] = v
            else:
                doc["train"][k] = v
        return replace(self, train=replace(self.train, **changes), resolved=doc, seed=doc["seed"])

    def echo(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "config.json"
        path.write_text(json.dumps(self.resolved, indent=1, sort_keys=True) + "\n")
        return path


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(doc: dict, environ: dict | None = None) -> RunConfig:
    """Validate ``doc``, fill defaults (profile first, explicit keys last) and build typed objects."""
    validate(doc)
    environ = os.environ if environ is None else environ
    profile = doc.get("profile", DEFAULTS["profile"])
    full = _merge(DEFAULTS, {"train": PROFILES[profile]})
    full = _merge(full, doc)
    full.setdefault("env", {}).setdefault("params", {})
    if environ.get(OUTPUT_ENV_VAR):
        full["output_dir"] = environ[OUTPUT_ENV_VAR]
    tc_defaults = {f.name: f.default for f in fields(TrainConfig)}
    train_doc = {k: full["train"].get(k, tc_defaults[k]) for k in _TRAIN_KEYS}
    full["train"] = train_doc
    diags = []
    try:
        kind, k = parse_variant(full["selector"])
    except ValueError as exc:
        diags.append(("/selector", str(exc)))
        kind, k = None, None
    h = full["scales"]["h"]
    universe = full["scales"]["universe"]
    scales = sorted({u for u in universe if u <= h} | {h})
    if kind == "fixed" and k not in scales:
        diags.append(("/selector", f"fixed scale {k} is not in the scale set {scales}"))
    try:
        env = make_env(full["env"]["kind"], full["env"]["params"])
    except (TypeError, ValueError) as exc:
        diags.append(("/env/params", str(exc)))
        env = None
    try:
        behavior = BehaviorPolicySpec(**full["data"]["behavior"])
    except (TypeError, ValueError) as exc:
        diags.append(("/data/behavior", str(exc)))
        behavior = None
    try:
        train = TrainConfig(h=h, universe=tuple(universe), selector=full["selector"], seed=full["seed"], **train_doc)
    except (TypeError, ValueError) as exc:
        diags.append(("/train", str(exc)))
        train = None
    if diags:
        raise ConfigError(diags)
    full["env"]["params"] = env.params()
    return RunConfig(
        env_kind=full["env"]["kind"],
        env_params=full["env"]["params"],
        behavior=behavior,
        n_episodes=full["data"]["n_episodes"],
        data_path=full["data"]["path"],
        train=train,
        output_dir=Path(full["output_dir"]),
        seed=full["seed"],
        profile=profile,
        resolved=full,
    )


def load(path: str | Path, environ: dict | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"invalid JSON: {exc}")]) from exc
    return resolve(doc, environ)
