from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np
import pandas as pd

from .errors import InvalidArgumentError
from .rough_lift import RoughPath
from .schemas import path_columns


def to_builtin(value: Any) -> Any:
    """Recursively turn numpy scalars and arrays into JSON-friendly builtins."""
    if isinstance(value, Mapping):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if not np.isfinite(value):
            return None if np.isnan(value) else ("inf" if value > 0 else "-inf")
        return value
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: str | Path, payload: Mapping[str, Any]) -> str:
    """Atomic write through a .tmp sibling; keys sorted so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "w", encoding="utf-8") as handle:
        json.dump(to_builtin(payload), handle, indent=2, sort_keys=True)
        handle.write("\n")
    os.replace(tmp_path, path)
    return str(path)


def read_json(path: str | Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"{path} does not hold a JSON object")
    return data


def config_hash(payload: Mapping[str, Any]) -> str:
    canonical = json.dumps(to_builtin(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_path_csv(path: str | Path, times: np.ndarray, values: np.ndarray) -> str:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    values = values.reshape(values.shape[0], -1)
    frame = pd.DataFrame(np.column_stack([times, values]), columns=path_columns(values.shape[1]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return str(path)


def rough_path_to_dict(rp: RoughPath) -> Dict[str, Any]:
    """{alpha, grid, W, WW}; WW lists the d x d blocks of pairs i <= j row-major."""
    n = rp.grid.n
    dense = rp.second.to_dense()
    rows, cols = np.triu_indices(n)
    return {
        "alpha": rp.alpha,
        "grid": rp.grid.points,
        "W": rp.first.values,
        "WW": dense[rows, cols].reshape(-1),
    }


def write_rough_path_json(path: str | Path, rp: RoughPath) -> str:
    return write_json(path, rough_path_to_dict(rp))
