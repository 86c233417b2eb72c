"""Run configuration, manifests, and atomic artifact writes.

A run resolves its settings in fixed precedence: command-line flag, then
config file, then built-in default. The resolved config is hashed
canonically (sorted keys, compact separators) so identical settings always
produce the identical hash, which every artifact records. Timestamps never
enter hashed or embedded content; they live only in sidecar manifest files,
keeping rerun outputs byte-identical.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone

from . import __version__
from .errors import ValidationError

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "task": {
        "v_src": 6,
        "v_tgt": 6,
        "mapping": [1, 2, 3, 4, 5, 0],
        "skeleton_len_range": [8, 16],
        "mean_run_src": 3.0,
        "mean_run_tgt": 1.5,
        "max_len": 96,
    },
    "sampler": {
        "nfe": 16,
        "unmask_rule": "confidence",
        "temperature": 1.0,
        "schedule": "linear",
    },
    "train": {
        "schedule": "linear",
        "steps": 20000,
        "strategy": "masked_only",
        "label_smoothing": 0.01,
        "t_bins": 4,
        "smoothing_alpha": 0.1,
    },
    "adapt": {"enabled": True},
    "eval": {
        "thresholds": [0.2, 0.4],
        "hist_bins": 20,
        "hist_range": [0.5, 1.5],
    },
    "flow": {
        "sigma_min": 1e-4,
        "bins": 32,
        "n_samples": 100000,
        "euler_steps": 100,
        "transport_samples": 10000,
    },
}

_SEEDED_SECTIONS = ("task", "sampler", "train")


def load_config_file(path: str) -> dict:
    """Read a JSON config file; must be an object."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return obj


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ValidationError(f"config key {where} must be an object")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(file_config: dict | None = None, seed_flag: int | None = None) -> dict:
    """Apply precedence (flag > file > default) and propagate the run seed.

    Sections without an explicit ``seed`` in the file inherit the run seed;
    an explicit section seed in the file is kept even when --seed is given.
    """
    file_config = file_config or {}
    base = copy.deepcopy(DEFAULT_CONFIG)
    for sec in _SEEDED_SECTIONS:
        base[sec]["seed"] = None  # placeholder so _merge accepts explicit seeds
    resolved = _merge(base, file_config)
    run_seed = seed_flag if seed_flag is not None else resolved["seed"]
    if not isinstance(run_seed, int) or isinstance(run_seed, bool):
        raise ValidationError(f"seed must be an integer, got {run_seed!r}")
    resolved["seed"] = run_seed
    for sec in _SEEDED_SECTIONS:
        explicit = isinstance(file_config.get(sec), dict) and "seed" in file_config[sec]
        if not explicit:
            resolved[sec]["seed"] = run_seed
        elif not isinstance(resolved[sec]["seed"], int) or isinstance(resolved[sec]["seed"], bool):
            raise ValidationError(f"{sec}.seed must be an integer")
    return resolved


def config_hash(resolved: dict) -> str:
    """SHA-256 over the canonical JSON encoding of the resolved config."""
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """Provenance for one artifact: config hash, seed, tool version, time."""

    config_hash: str
    seed: int
    tool_version: str
    created_at: str

    @classmethod
    def create(cls, resolved: dict) -> "RunManifest":
        return cls(
            config_hash=config_hash(resolved),
            seed=resolved["seed"],
            tool_version=__version__,
            created_at=datetime.now(timezone.utc).isoformat(),
        )

    def embedded(self) -> dict:
        """Deterministic subset safe to embed inside artifacts."""
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
        }

    def to_json_obj(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "created_at": self.created_at,
        }


def manifest_path(artifact_path: str) -> str:
    return artifact_path + ".manifest.json"


def write_manifest(artifact_path: str, manifest: RunManifest) -> str:
    side = manifest_path(artifact_path)
    atomic_write_text(
        side, json.dumps(manifest.to_json_obj(), indent=2, sort_keys=True) + "\n"
    )
    return side


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file and rename, so failures leave no partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_writer(path: str, write_fn) -> None:
    """Run ``write_fn(tmp_path)`` then rename the temp file into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
