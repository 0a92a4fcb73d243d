"""Checkpoint serialization.

Stored as a pickled tree of plain Python/numpy values built in a fixed key
order, so saving the same state twice produces identical bytes and a
load-then-save round-trip is byte-stable.
"""

from __future__ import annotations

import pickle
from pathlib import Path
from typing import Any

import numpy as np
import torch

FORMAT_VERSION = 1


def _to_plain(value: Any) -> Any:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    if isinstance(value, dict):
        return {k: _to_plain(value[k]) for k in sorted(value.keys(), key=repr)}
    if isinstance(value, (list, tuple)):
        converted = [_to_plain(v) for v in value]
        return converted if isinstance(value, list) else tuple(converted)
    return value


def _to_tensors(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return torch.from_numpy(value.copy())
    if isinstance(value, dict):
        return {k: _to_tensors(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        converted = [_to_tensors(v) for v in value]
        return converted if isinstance(value, list) else tuple(converted)
    return value


def save_checkpoint(payload: dict, path: str | Path) -> None:
    data = {
        "format": FORMAT_VERSION,
        **{k: _to_plain(payload[k]) for k in sorted(payload.keys())},
    }
    Path(path).write_bytes(pickle.dumps(data, protocol=4))


def load_checkpoint(path: str | Path) -> dict:
    data = pickle.loads(Path(path).read_bytes())
    if data.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {data.get('format')!r}")
    return {k: _to_tensors(v) for k, v in data.items() if k != "format"}
