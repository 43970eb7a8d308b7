"""Deterministic checkpoint serialization shared by both models.

Checkpoints are pickled dicts of numpy arrays plus a config echo, so a
load/save round trip is byte-identical and independent of tensor-library
serialization details.
"""
from __future__ import annotations

import hashlib
import pickle
from pathlib import Path

import numpy as np
import torch

FORMAT = "unifront-checkpoint-v1"


class CheckpointError(RuntimeError):
    pass


def state_to_numpy(state_dict: dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in state_dict.items()}


def state_to_torch(state: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.as_tensor(v) for k, v in state.items()}


def _tree_to_numpy(obj):
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": obj.detach().cpu().numpy().copy()}
    if isinstance(obj, dict):
        return {k: _tree_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_tree_to_numpy(v) for v in obj)
    return obj


def _tree_to_torch(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__tensor__"}:
            return torch.as_tensor(obj["__tensor__"])
        return {k: _tree_to_torch(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_tree_to_torch(v) for v in obj)
    return obj


def optimizer_to_numpy(optimizer: torch.optim.Optimizer) -> dict:
    return _tree_to_numpy(optimizer.state_dict())


def optimizer_from_numpy(optimizer: torch.optim.Optimizer, payload: dict) -> None:
    optimizer.load_state_dict(_tree_to_torch(payload))


def _decouple(obj):
    """Rebuild a payload tree with fresh string objects.

    Pickle memoizes repeated objects by identity, so interned strings shared
    between, say, a config echo and a vocab table would serialize as memo
    references; whether sharing occurs depends on where the strings came
    from.  Forcing every (multi-char) string to be a distinct object makes
    the byte stream canonical: equal payloads always produce equal files.
    """
    if isinstance(obj, str):
        return obj.encode("utf-8").decode("utf-8")
    if isinstance(obj, dict):
        return {_decouple(k): _decouple(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_decouple(v) for v in obj)
    return obj


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    state: dict[str, np.ndarray],
    meta: dict,
    step: int = 0,
    optimizer: dict | None = None,
    extra: dict | None = None,
) -> None:
    payload = {
        "format": FORMAT,
        "kind": kind,
        "config": config,
        "state": state,
        "meta": meta,
        "step": step,
        "optimizer": optimizer,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        pickle.dump(_decouple(payload), fh, protocol=4)


def load_checkpoint(path: str | Path, kind: str | None = None) -> dict:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {payload.get('kind')!r}, expected {kind!r}"
        )
    return payload


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
