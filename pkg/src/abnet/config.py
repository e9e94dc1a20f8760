"""Run configuration: TOML files over built-in task defaults, plus manifests.

Every command resolves its configuration to a plain dict, hashes the part
that defines the task (dynamics, constraint, observation), and stamps a
manifest into its output directory so artifacts are reproducible.
"""

from __future__ import annotations

import copy
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(Exception):
    pass


DEFAULTS = {
    "robot2d": {
        "task": "robot2d",
        "dynamics": {
            "dt": 0.1,
            "obstacle": [0.0, 0.0],
            "radius": 1.0,
            "u1_bounds": [-3.0, 3.0],
            "u2_bounds": [-5.0, 5.0],
        },
        "sampling": {
            "start_x": [-5.0, -3.5],
            "start_y": [-2.0, 2.0],
            "start_speed": [0.5, 1.0],
            "goal_x": [3.5, 5.0],
            "goal_y": [-2.0, 2.0],
            "heading_jitter": 0.3,
        },
        "expert": {
            "p1": 1.0,
            "p2": 1.0,
            "heading_gain": 2.0,
            "speed_gain": 0.8,
            "accel_gain": 2.0,
            "cruise_speed": 1.2,
            "min_speed": 0.3,
            "avoid_gain": 2.0,
            "avoid_distance": 2.0,
            "goal_tolerance": 0.6,
            "trajectories": 100,
            "horizon": 137,
        },
        "model": {
            "hidden": [128, 32, 32],
            "penalty_hidden": [16],
        },
        "train": {
            "epochs": 8,
            "batch_size": 16,
            "lr": 0.001,
            "lambda_fused": 1.0,
            "lambda_heads": 0.5,
            "lambda_ref": 0.5,
            "val_fraction": 0.1,
            "scalable_epochs": 4,
            "extra_iters": 50,
            "penalty_merge": "average",
            "head_train_noise": 0.05,
        },
        "eval": {
            "runs": 100,
            "horizon": 137,
            "noise": 0.1,
        },
    },
    "arm2": {
        "task": "arm2",
        "dynamics": {
            "dt": 0.01,
            "l1": 1.0,
            "l2": 1.0,
            "obstacle": [0.9, 0.9],
            "radius": 0.3,
            "u1_bounds": [-10.0, 10.0],
            "u2_bounds": [-10.0, 10.0],
        },
        "sampling": {
            "reach": [0.6, 1.8],
            "angle_range": [-3.14159265, 3.14159265],
            "start_rate": [-0.2, 0.2],
            "obstacle_margin": 0.3,
        },
        "expert": {
            "p1": 1.0,
            "p2": 1.0,
            "kp": 2.6,
            "kd": 3.3,
            "avoid_gain": 6.0,
            "avoid_distance": 0.5,
            "goal_tolerance": 0.08,
            "trajectories": 1000,
            "horizon": 560,
            "horizon_jitter": 0.1,
        },
        "model": {
            "hidden": [128, 256, 128, 128, 32, 32],
            "penalty_hidden": [16],
        },
        "train": {
            "epochs": 3,
            "batch_size": 16,
            "lr": 0.001,
            "lambda_fused": 1.0,
            "lambda_heads": 0.5,
            "lambda_ref": 0.5,
            "val_fraction": 0.1,
            "scalable_epochs": 2,
            "extra_iters": 50,
            "penalty_merge": "average",
            "head_train_noise": 0.05,
        },
        "eval": {
            "runs": 100,
            "horizon": 350,
            "noise": 0.1,
        },
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(task: str | None = None, path: str | None = None) -> dict:
    """Resolve defaults for a task, optionally overridden by a TOML file."""
    overrides = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                overrides = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    task = task or overrides.get("task")
    if task not in DEFAULTS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(DEFAULTS)}")
    # deep copy so callers can freely edit their config without touching
    # the module-level defaults
    cfg = _deep_merge(copy.deepcopy(DEFAULTS[task]), overrides)
    cfg["task"] = task
    return cfg


def task_config_hash(cfg: dict) -> str:
    """Hash of the sections that define the control problem itself."""
    core = {
        "task": cfg["task"],
        "dynamics": cfg["dynamics"],
        "sampling": cfg["sampling"],
    }
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_manifest(out_dir, command: str, cfg: dict, seed: int, extra: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv,
        "config": cfg,
        "config_hash": task_config_hash(cfg),
        "seed": seed,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "python": sys.version.split()[0],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def worker_count() -> int:
    """Parallel worker cap: ABNET_THREADS bounds the CPU count."""
    cap = os.environ.get("ABNET_THREADS")
    workers = os.cpu_count() or 1
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"ABNET_THREADS must be an integer, got {cap!r}") from None
    return workers
