"""Versioned checkpoint container with byte-stable serialization.

A checkpoint stores the config snapshot and hash, model arrays (including
the bottleneck rows, importance vector, pruning mask, and gate parameters
when present), and any training extras (optimizer state, generator states).
Arrays are stored as numpy and pickled at a fixed protocol, which makes
save -> load -> save byte-identical.
"""

from __future__ import annotations

import os
import pickle
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

CHECKPOINT_FORMAT_VERSION = 1
_PICKLE_PROTOCOL = 4


def save_checkpoint(path, model, config, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(resolved=True),
        "config_hash": config.config_hash(),
        "variant": model.variant,
        "arch": model.spec.to_dict(),
        "state": {k: _to_plain(v) for k, v in model.state_dict().items()},
        "extra": _to_plain(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        # canonicalized payloads make pickle's identity memoization
        # deterministic, so saving the same values yields the same bytes
        pickle.dump(_canonical(payload), f, protocol=_PICKLE_PROTOCOL)
    os.replace(tmp, path)


def _canonical(obj):
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return np.ascontiguousarray(obj)
    return obj


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            payload = pickle.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (pickle.UnpicklingError, EOFError, AttributeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is corrupted or not a checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"checkpoint {path} is corrupted or not a checkpoint")
    version = payload["format_version"]
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def restore_model(payload: dict):
    """Rebuild the model a checkpoint was saved from and load its arrays."""
    from .config import ExperimentConfig
    from .models import ArchitectureSpec, build_model

    config = ExperimentConfig.from_dict(payload["config"])
    spec = ArchitectureSpec.from_dict(payload["arch"])
    model = build_model(
        spec,
        payload["variant"],
        seed=config.seed,
        gamma0=config.resolved_gamma0,
        bits_per_dim=config.bits_per_dim,
    )
    if config.prior == "gaussian" and payload["variant"] == "vfe":
        from .losses import GaussianPriorKl

        model.prior_kl = GaussianPriorKl(config.n_initial)
    state = {k: _to_tensor(v) for k, v in payload["state"].items()}
    model.load_state_dict(state)
    return model, config


def _to_plain(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy()
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        converted = [_to_plain(v) for v in obj]
        return converted if isinstance(obj, list) else tuple(converted)
    return obj


def _to_tensor(obj):
    if isinstance(obj, np.ndarray):
        return torch.from_numpy(obj.copy())
    if isinstance(obj, dict):
        return {k: _to_tensor(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        converted = [_to_tensor(v) for v in obj]
        return converted if isinstance(obj, list) else tuple(converted)
    return obj
