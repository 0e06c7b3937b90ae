"""Experiment configuration: a nested key-value document with strict keys.

Configs are YAML (or JSON) files validated against a per-command schema;
unknown keys are rejected with the file line they appear on.  Defaults mirror
the hyperparameters the training modules use.  The SKETCHLAB_SEED environment
variable overrides the config's seed.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


DATASET_SCHEMA = {
    "seed": 77, "n_classes": 8, "n_instances": 8, "noise_strokes": 0,
    "height": 32, "width": 32, "path": None,
}

EMBED_SCHEMA = {
    "epochs": 30, "lr": 2e-3, "margin": 0.3, "batch": 16, "channels": 64,
    "embed_dim": 64, "grid": 4, "use_clean_strokes": False,
}

SCHEMAS = {
    "gen-data": {"seed": 0, "output_dir": "runs/gen", "dataset": DATASET_SCHEMA},
    "train-embed": {"seed": 0, "output_dir": "runs/embed",
                    "dataset": DATASET_SCHEMA, "embed": EMBED_SCHEMA},
    "train-otf": {
        "seed": 0, "output_dir": "runs/otf", "dataset": DATASET_SCHEMA,
        "embed": EMBED_SCHEMA, "encoder_checkpoint": None,
        "T": 20, "batch": 16, "epochs": 300, "lr": 2e-3,
        "reward": {"scheme": "combined", "gamma1": 1.0, "gamma2": 1e-4, "q": 5},
        "ppo": {"variant": "actor_only_clip", "epsilon": 0.2, "kl_coef": 0.01},
    },
    "train-subset": {
        "seed": 0, "output_dir": "runs/subset", "dataset": DATASET_SCHEMA,
        "embed": EMBED_SCHEMA, "encoder_checkpoint": None,
        "iterations": 200, "phases": 2, "lr": 3e-3, "hidden": 128,
        "episode_length": 5, "omega1": 1.0, "omega2": 1.0, "epsilon": 0.2,
        "c1": 0.5, "c2": 0.01, "old_refresh_every": 20, "margin": 0.2,
    },
    "train-semisup": {
        "seed": 0, "output_dir": "runs/semisup", "dataset": DATASET_SCHEMA,
        "embed": EMBED_SCHEMA, "labelled_frac": 0.25, "rounds": 10,
        "dump_pseudo": False,
        "generator": {"latent": 128, "hidden": 128, "mixtures": 20,
                      "att_dim": 32, "max_len": 100, "epochs": 30, "lr": 2e-3},
        "joint": {"k_retrieval": 5, "k_generator": 5, "batch": 8,
                  "kd_weight": 0.1, "kl_weight": 1.0, "pg_weight": 10.0,
                  "reward_r1": 1.0, "reward_r2": 1.0},
    },
    "pretrain-ssl": {
        "seed": 0, "output_dir": "runs/ssl", "dataset": DATASET_SCHEMA,
        "task": "vectorization", "epochs": 40, "lr": 2e-3, "batch": 16,
        "channels": 48, "latent": 48, "hidden": 64, "max_len": 100, "grid": 4,
    },
    "linear-eval": {
        "seed": 0, "output_dir": "runs/linear", "dataset": DATASET_SCHEMA,
        "checkpoint": None, "frac": 0.5, "epochs": 120, "lr": 5e-2,
    },
    "fscil": {
        "seed": 0, "output_dir": "runs/fscil", "dataset": DATASET_SCHEMA,
        "base_classes": 6, "ways": 5, "shots": 5, "episodes": 600,
        "queries_per_class": 15, "base_epochs": 20,
        "generator_episodes": 60, "use_consensus": True,
    },
    "oracle": {
        "seed": 0, "output_dir": "runs/oracle", "dataset": DATASET_SCHEMA,
        "embed": EMBED_SCHEMA, "encoder_checkpoint": None, "max_k": 16,
        "limit": 0,
    },
    "augment": {
        "seed": 0, "output_dir": "runs/augment", "dataset": DATASET_SCHEMA,
        "selector_checkpoint": None, "n": 8,
    },
    "eval": {
        "seed": 0, "output_dir": "runs/eval", "dataset": DATASET_SCHEMA,
        "encoder_checkpoint": None, "tag": "eval", "T": 20,
    },
    "serve": {
        "seed": 0, "model_dir": "runs/embed", "port": 8008, "topk": 5,
        "rdp_epsilon": 0.01, "dataset": DATASET_SCHEMA,
    },
}


def _check_keys(doc, schema, path, source_text):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    for key, value in doc.items():
        if key not in schema:
            line = _line_of(source_text, key)
            raise ConfigError(f"line {line}: unknown key '{path + key}'")
        if isinstance(schema[key], dict) and schema[key] and not _is_leaf(schema[key]):
            _check_keys(value or {}, schema[key], path + key + ".", source_text)


def _is_leaf(node) -> bool:
    return not isinstance(node, dict)


def _line_of(text, key) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#")[0]
        if stripped.strip().startswith(f"{key}:") or f'"{key}"' in stripped:
            return i
    return 0


def _merge(schema, doc):
    out = copy.deepcopy(schema)
    for key, value in (doc or {}).items():
        if isinstance(schema.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(schema[key], value)
        elif value is None and isinstance(schema.get(key), dict):
            pass  # an empty section keeps its defaults
        else:
            out[key] = value
    return out


def load_config(command: str, path=None, overrides: dict | None = None) -> dict:
    """Resolved config for `command`: schema defaults, file values, overrides.

    Unknown keys raise ConfigError naming the offending line; the
    SKETCHLAB_SEED environment variable takes precedence over any seed.
    """
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command '{command}'")
    schema = SCHEMAS[command]
    doc = {}
    text = ""
    if path is not None:
        text = Path(path).read_text()
        doc = (json.loads(text) if str(path).endswith(".json")
               else yaml.safe_load(text)) or {}
    _check_keys(doc, schema, "", text)
    resolved = _merge(schema, doc)
    for key, value in (overrides or {}).items():
        node = resolved
        parts = key.split(".")
        for part in parts[:-1]:
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown override key '{key}'")
        node[parts[-1]] = value
    env_seed = os.environ.get("SKETCHLAB_SEED")
    if env_seed is not None:
        resolved["seed"] = int(env_seed)
    return resolved


def write_resolved(config: dict, directory) -> Path:
    """Every run writes its resolved config beside its outputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "config.resolved.yaml"
    out.write_text(yaml.safe_dump(config, sort_keys=True))
    return out
