"""Experiment configuration: a versioned JSON document with a fixed schema.

Unknown keys are errors at every level. Missing optional keys take the
defaults below; the normalized document (defaults filled in, keys sorted)
is what gets hashed, so two files that differ only in spelled-out defaults
share one config hash. Output path, chunk size and worker count are left
out of the hash because they never change a record.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

SCHEMA_VERSION = 1
# execution settings that cannot change any record; excluded from the hash
EXECUTION_KEYS = ("output", "chunk_size", "workers")
OUTPUT_DIR_ENV = "SEMFORGE_OUTPUT_DIR"

EXPERIMENTS = (
    "roundtrip", "forgery", "removal", "reprompt", "reprompt-plus", "averaging",
    "regeneration", "robustness", "transfer-matrix", "calibrate",
)
SCHEMES = ("gs", "tr")
FAMILIES = ("A", "B", "C")
DENOISERS = ("analytic-linear", "tiny-mlp", "zero")

MODEL_DEFAULTS = {"family": "A", "seed": 1, "kind": "analytic-linear", "steps": 50}
GS_DEFAULTS = {"k": 256, "fpr": 1e-6, "users": 100_000, "pool_size": 0}
TR_DEFAULTS = {"rings": 3, "max_radius": 3.0, "channel": 2, "strength": 1.5, "fpr": 0.01,
               "calibration_samples": 1000}
ATTACK_DEFAULTS = {
    "steps": 150, "lr": 0.01, "eval_every": 10, "stop_rule": "fixed-steps", "mask": None,
    "prompt": 5, "prompts": [5, 6, 7], "resamples": 3, "references": 1000, "strength": 1.0,
    "mode": "forge", "noise_steps": 10,
}
TOP_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "experiment": None,
    "name": None,
    "target": None,
    "proxy": None,
    "models": None,
    "scheme": "gs",
    "gs": None,
    "tr": None,
    "attack": None,
    "samples": 10,
    "perturbations": [],
    "fpr_targets": None,
    "condition": 3,
    "master_seed": 0,
    "output": "results.jsonl",
    "chunk_size": 20,
    "batch_size": 10,
    "workers": 1,
}


class ConfigError(ValueError):
    """The experiment configuration does not match the schema."""


def _merge(section: str, given, defaults: dict) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _model(section: str, spec) -> dict:
    m = _merge(section, spec, MODEL_DEFAULTS)
    if m["family"] not in FAMILIES:
        raise ConfigError(f"{section}.family must be one of {FAMILIES}")
    if m["kind"] not in DENOISERS:
        raise ConfigError(f"{section}.kind must be one of {DENOISERS}")
    if not isinstance(m["seed"], int) or m["seed"] < 0:
        raise ConfigError(f"{section}.seed must be a nonnegative integer")
    if not isinstance(m["steps"], int) or m["steps"] < 1:
        raise ConfigError(f"{section}.steps must be a positive integer")
    return m


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, normalized experiment configuration."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def experiment(self) -> str:
        return self.data["experiment"]

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def config_hash(self) -> str:
        science = {k: v for k, v in self.data.items() if k not in EXECUTION_KEYS}
        return hashlib.sha256(canonical_json(science).encode()).hexdigest()

    @property
    def experiment_id(self) -> str:
        return f"{self.name}-{self.config_hash[:12]}"

    def output_path(self) -> Path:
        path = Path(self.data["output"])
        base = os.environ.get(OUTPUT_DIR_ENV)
        if base and not path.is_absolute():
            path = Path(base) / path
        return path

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        data.update(changes)
        return validate(data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def validate(raw: dict) -> ExperimentConfig:
    """Check ``raw`` against the schema and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge("config", raw, TOP_DEFAULTS)
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']} (expected {SCHEMA_VERSION})")
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
    if cfg["scheme"] not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}")
    cfg["name"] = cfg["name"] or cfg["experiment"]
    cfg["target"] = _model("target", cfg["target"])
    cfg["proxy"] = None if cfg["proxy"] is None else _model("proxy", cfg["proxy"])
    if cfg["models"] is not None:
        if not isinstance(cfg["models"], list) or not cfg["models"]:
            raise ConfigError("models must be a nonempty list")
        cfg["models"] = [_model(f"models[{i}]", m) for i, m in enumerate(cfg["models"])]
    cfg["gs"] = _merge("gs", cfg["gs"], GS_DEFAULTS)
    cfg["tr"] = _merge("tr", cfg["tr"], TR_DEFAULTS)
    cfg["attack"] = _merge("attack", cfg["attack"], ATTACK_DEFAULTS)

    for key in ("samples", "chunk_size", "batch_size", "workers"):
        if not isinstance(cfg[key], int) or cfg[key] < 1:
            raise ConfigError(f"{key} must be a positive integer")
    if cfg["chunk_size"] % cfg["batch_size"]:
        raise ConfigError("chunk_size must be a multiple of batch_size")
    if not isinstance(cfg["master_seed"], int) or not 0 <= cfg["master_seed"] < 2**63:
        raise ConfigError("master_seed must be a nonnegative 63-bit integer")
    if cfg["condition"] is not None and not (isinstance(cfg["condition"], int) and 0 <= cfg["condition"] < 8):
        raise ConfigError("condition must be a class index 0..7 or null")
    if cfg["fpr_targets"] is None:
        cfg["fpr_targets"] = [cfg[cfg["scheme"]]["fpr"]]
    if not all(isinstance(f, (int, float)) and 0 < f < 1 for f in cfg["fpr_targets"]):
        raise ConfigError("fpr_targets must lie in (0, 1)")
    for p in cfg["perturbations"]:
        if not isinstance(p, dict) or set(p) != {"kind", "param"}:
            raise ConfigError("each perturbation needs exactly 'kind' and 'param'")
        from ..perturb_metrics import Perturbation
        try:
            Perturbation(p["kind"], p["param"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    needs_proxy = cfg["experiment"] in ("forgery", "removal", "reprompt", "reprompt-plus", "regeneration")
    if needs_proxy and cfg["proxy"] is None:
        raise ConfigError(f"{cfg['experiment']} needs a proxy model")
    if cfg["experiment"] == "transfer-matrix" and cfg["models"] is None:
        raise ConfigError("transfer-matrix needs a models list")
    if cfg["experiment"] == "calibrate" and cfg["scheme"] != "tr":
        raise ConfigError("sample-based calibration is only defined for tr; gs thresholds are analytic")
    atk = cfg["attack"]
    if atk["mode"] not in ("forge", "remove"):
        raise ConfigError("attack.mode must be 'forge' or 'remove'")
    if not atk["prompts"]:
        raise ConfigError("attack.prompts must be nonempty")
    return ExperimentConfig(cfg)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    return validate(raw)
