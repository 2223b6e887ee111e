"""Checkpoint serialization: bit-exact round trips via fixed-protocol pickle.

A checkpoint is a dict with format version, the full config echo, the step
counter, named parameter arrays, optimizer state, and the prior RNG state.
Identical content always serializes to identical bytes.
"""

from __future__ import annotations

import pickle

from .errors import CheckpointError

FORMAT_VERSION = 1
_PICKLE_PROTOCOL = 4


def checkpoint_bytes(config, step, params, optimizer, rng_state) -> bytes:
    payload = {
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "step": int(step),
        "params": params.state_dict(),
        "optimizer": optimizer.state_dict(),
        "rng_state": rng_state,
    }
    return pickle.dumps(payload, protocol=_PICKLE_PROTOCOL)


def save_checkpoint(path, config, step, params, optimizer, rng_state):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(config, step, params, optimizer, rng_state))


def load_checkpoint(path) -> dict:
    try:
        with open(path, "rb") as f:
            payload = pickle.load(f)
    except (OSError, pickle.UnpicklingError, EOFError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})")
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if payload["version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['version']} != {FORMAT_VERSION}"
        )
    return payload


STRUCTURAL_KEYS = ("L", "n_knots", "n_layers", "hidden_channels", "dilations",
                   "precision")


def _norm(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value


def check_structure(payload, config):
    """Reject checkpoints whose architecture disagrees with the config."""
    echo = payload["config"]
    for key in STRUCTURAL_KEYS:
        have, want = _norm(echo.get(key)), _norm(getattr(config, key))
        if have != want:
            raise CheckpointError(
                f"checkpoint/config mismatch for {key!r}: {have!r} vs {want!r}"
            )
