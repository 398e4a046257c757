"""Self-describing checkpoint containers: named tensors + JSON metadata.

A checkpoint is a single ``.npz`` file holding float arrays keyed by name plus
one reserved ``__meta__`` entry carrying a JSON document (hyperparameters,
geometry, seed, config hash).  Anything that can rebuild a model lives in the
metadata so checkpoints are loadable without external context.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, tensors: Mapping[str, Any], meta: dict) -> Path:
    """Write named tensors and a JSON metadata block to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, value in tensors.items():
        if name == _META_KEY:
            raise ValueError(f"tensor name {_META_KEY!r} is reserved")
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arrays[name] = np.asarray(value)
    arrays[_META_KEY] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back ``(tensors, meta)`` from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data[_META_KEY]))
        tensors = {k: data[k] for k in data.files if k != _META_KEY}
    return tensors, meta


def save_module(path: str | Path, module: torch.nn.Module, meta: dict) -> Path:
    """Persist a module's state dict alongside metadata."""
    state = {k: v for k, v in module.state_dict().items()}
    return save_checkpoint(path, state, meta)


def load_state(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Load a state dict as torch tensors plus its metadata."""
    tensors, meta = load_checkpoint(path)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    return state, meta
