"""Flat key-value run configuration (YAML syntax).

Every key is listed in :data:`SCHEMA` with its type and default; ``REQUIRED``
marks keys without a default.  Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import yaml

from .errors import ConfigError

REQUIRED = object()

# key: (type, default, description)
SCHEMA: dict[str, tuple[type, object, str]] = {
    "seed": (int, REQUIRED, "master seed"),
    "output_dir": (str, REQUIRED, "directory for all outputs"),
    # data
    "data_source": (str, "synthetic", "synthetic / csv / images"),
    "data_path": (str, "", "CSV (features..., label) or FDRM image file"),
    "label_path": (str, "", "labels for image input, one integer per line"),
    "partition": (str, "dirichlet", "dirichlet / shard (csv and image input)"),
    "alpha_conc": (float, 0.3, "Dirichlet concentration"),
    "shards_per_client": (int, 2, "S for shard partitioning"),
    "shift_preset": (str, "", "'' / low / mid / high colour shift for image input"),
    "n_per_client": (int, 500, "synthetic samples per client"),
    "n_classes": (int, 4, "synthetic number of classes"),
    "n_features": (int, 2, "synthetic feature dimension"),
    "separation": (float, 6.0, "synthetic pairwise distance between client means"),
    # network
    "g_layers": (list, [16], "widths of the shared backbone"),
    "h_layers": (list, [8], "widths of the client branch"),
    "sharing": (str, "deep", "none / shallow / mid / deep"),
    "activation": (str, "relu", "relu / tanh"),
    "fixed_embedding": (bool, False, "freeze the embedding"),
    # federation
    "m": (int, REQUIRED, "number of clients"),
    "rounds": (int, REQUIRED, "communication rounds T"),
    "local_steps": (int, REQUIRED, "local steps E"),
    "lr": (float, REQUIRED, "learning rate"),
    "lam": (float, REQUIRED, "weight of the class loss"),
    "weight_decay": (float, 0.0, "L2 coefficient"),
    "momentum": (float, 0.0, "SGD momentum"),
    "schedule": (str, "constant", "constant / cosine"),
    "batch_size": (int, 0, "0 means full batch"),
    "shared_target": (bool, False, "one target head for all clients"),
    "mode": (str, "feddrm", "feddrm / fedavg_ref"),
    # outputs
    "checkpoint_every": (int, 0, "rounds between checkpoints, 0 disables"),
    "window": (int, 10, "rounds averaged in summary.json"),
    "track_drift": (bool, True, "log G_client2 and G_class2 every round"),
    # theory harness
    "theory_n": (int, 2000, "pooled sample size of the theory benchmark"),
    "theory_zero_heterogeneity": (bool, False, "every client holds the pooled data"),
    "theory_E_grid": (list, [1, 2, 4, 8], "local-step grid"),
    "theory_N_grid": (list, [500, 1000, 2000, 4000, 8000], "sample-size grid"),
    "theory_lam_grid": (list, [0.5, 0.6, 0.9, 0.99], "lam grid"),
    "theory_seeds": (int, 20, "Monte-Carlo seeds"),
}

COMMAND_REQUIRED = {
    "run": ["seed", "output_dir", "m", "rounds", "local_steps", "lr", "lam"],
    "partition": ["seed", "output_dir", "m"],
    "eval": ["seed", "output_dir", "m", "rounds", "local_steps", "lr", "lam"],
    "drift": ["seed", "output_dir", "rounds", "local_steps", "lr", "lam"],
    "theory": ["seed", "output_dir", "rounds", "lr", "lam"],
}


def _coerce(key, value, typ):
    if typ is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def load(path, command: str) -> tuple[dict, str]:
    """Parse, validate and fill defaults; returns ``(config, hash_hex)``.

    The hash covers the raw file bytes, so any edit changes it.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(raw) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of keys to values")
    return validate(data, command), hashlib.sha256(raw).hexdigest()[:16]


def validate(data: dict, command: str) -> dict:
    unknown = sorted(set(data) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    needed = set(COMMAND_REQUIRED.get(command, []))
    for key, (typ, default, _) in SCHEMA.items():
        if key in data:
            out[key] = _coerce(key, data[key], typ)
        elif key in needed or default is REQUIRED:
            if key in needed:
                raise ConfigError(f"missing required key: {key}")
        else:
            out[key] = default
    return out


def describe() -> str:
    """Markdown table of every key, used to keep the README in sync."""
    lines = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for key, (typ, default, desc) in SCHEMA.items():
        d = "required" if default is REQUIRED else repr(default)
        lines.append(f"| `{key}` | {typ.__name__} | {d} | {desc} |")
    return "\n".join(lines)
