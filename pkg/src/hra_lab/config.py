"""Experiment configuration: one JSON document fully determines a run.

A config has five sections plus an output directory:

* ``backbone``  - layers, dim, ffn_dim, input_dim, vocab, seed (all required)
* ``adapter``   - method and seed required; size knobs default per method
* ``tasks``     - num_tasks and seed required; generator knobs defaulted
* ``optimizer`` - kind/lr, defaulted to adam at 1e-3
* ``training``  - steps, batch_size, seed required; mode defaults to
  ``multi_task``; ``online`` sub-section configures the two-stage workflow
* ``growth``    - optional knobs for the growth-curve command

Scalar keys can be overridden on the command line with ``--set a.b.c=value``
(values parsed as JSON when possible).  Validation names the offending key
for anything missing, unknown, or out of domain.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

REQUIRED_KEYS = (
    "backbone.layers", "backbone.dim", "backbone.ffn_dim", "backbone.input_dim",
    "backbone.vocab", "backbone.seed",
    "adapter.method", "adapter.seed",
    "tasks.num_tasks", "tasks.seed",
    "training.steps", "training.batch_size", "training.seed",
    "out_dir",
)

DEFAULTS = {
    "backbone": {},
    "adapter": {
        "variant": "indrnn",
        "head": "linear",
        "recurrent_dim": 8,
        "head_hidden_dim": 16,
        "bottleneck_dim": 8,
        "rank": 2,
        "lora_alpha": None,
        "placement": "sequential",
        "layer_mask": None,
        "disable_recurrence": False,
        "unshare_weights": False,
        "zero_init_head": False,
    },
    "tasks": {
        "rule": "mixed",
        "num_train": 48,
        "num_val": 12,
        "num_test": 12,
        "min_labels": 1,
        "max_labels": 3,
        "frames_per_label": 2,
        "noise": 0.05,
    },
    "optimizer": {
        "kind": "adam",
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "training": {
        "mode": "multi_task",
        "online": {
            "pretrain_tasks": 2,
            "stage1_steps": 200,
            "stage2_steps": 200,
        },
    },
    "growth": {
        "max_tasks": 128,
        "methods": ["hra", "residual", "lora", "bitfit"],
    },
}

_KNOWN = {
    "backbone": {"layers", "dim", "ffn_dim", "input_dim", "vocab", "seed"},
    "adapter": {"method", "seed", "variant", "head", "recurrent_dim",
                "head_hidden_dim", "bottleneck_dim", "rank", "lora_alpha",
                "placement", "layer_mask", "disable_recurrence",
                "unshare_weights", "zero_init_head"},
    "tasks": {"num_tasks", "seed", "rule", "num_train", "num_val", "num_test",
              "min_labels", "max_labels", "frames_per_label", "noise"},
    "optimizer": {"kind", "lr", "beta1", "beta2", "eps"},
    "training": {"mode", "steps", "batch_size", "seed", "online"},
    "growth": {"max_tasks", "methods"},
}
_KNOWN_ONLINE = {"pretrain_tasks", "stage1_steps", "stage2_steps"}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _get_path(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``key.path=value`` override; values parse as JSON or string."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set has an empty key: {assignment!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set cannot descend through scalar key {part!r}")
    node[parts[-1]] = value


def validate_config(cfg: dict) -> None:
    for dotted in REQUIRED_KEYS:
        if _get_path(cfg, dotted) is None:
            raise ConfigError(f"missing required config key: {dotted}")

    unknown_top = set(cfg) - set(_KNOWN) - {"out_dir"}
    if unknown_top:
        raise ConfigError(f"unknown config section: {sorted(unknown_top)[0]}")
    for section, known in _KNOWN.items():
        body = cfg.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(body) - known
        if unknown:
            raise ConfigError(f"unknown config key: {section}.{sorted(unknown)[0]}")
    online = cfg.get("training", {}).get("online", {})
    unknown = set(online) - _KNOWN_ONLINE
    if unknown:
        raise ConfigError(f"unknown config key: training.online.{sorted(unknown)[0]}")

    bb = cfg["backbone"]
    for key in ("layers", "dim", "ffn_dim", "input_dim", "vocab"):
        if not isinstance(bb[key], int) or bb[key] < 1:
            raise ConfigError(f"backbone.{key} must be a positive integer")

    tr = cfg["training"]
    if tr["mode"] not in ("multi_task", "online"):
        raise ConfigError("training.mode must be 'multi_task' or 'online'")
    if not isinstance(tr["steps"], int) or tr["steps"] < 0:
        raise ConfigError("training.steps must be a non-negative integer")
    if not isinstance(tr["batch_size"], int) or tr["batch_size"] < 1:
        raise ConfigError("training.batch_size must be a positive integer")
    if tr["mode"] == "online":
        pre = tr["online"]["pretrain_tasks"]
        if not isinstance(pre, int) or not 1 <= pre < cfg["tasks"]["num_tasks"]:
            raise ConfigError(
                "training.online.pretrain_tasks must leave at least one new task")

    if cfg["optimizer"]["kind"] not in ("sgd", "adam"):
        raise ConfigError("optimizer.kind must be 'sgd' or 'adam'")
    if not isinstance(cfg["out_dir"], str) or not cfg["out_dir"]:
        raise ConfigError("out_dir must be a non-empty string")

    growth = cfg["growth"]
    if not isinstance(growth["max_tasks"], int) or growth["max_tasks"] < 1:
        raise ConfigError("growth.max_tasks must be a positive integer")
    bad = [m for m in growth["methods"] if m not in ("hra", "residual", "lora", "bitfit")]
    if bad:
        raise ConfigError(f"growth.methods contains unknown method: {bad[0]}")


def load_config(path, overrides=()) -> dict:
    """Load, override, default-fill, and validate one experiment config."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for assignment in overrides:
        apply_override(raw, assignment)
    cfg = _deep_merge(DEFAULTS, raw)
    validate_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON text of a config."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"
