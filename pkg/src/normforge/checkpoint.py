"""Versioned ``.npz`` checkpoints: config, parameters, and optional training state.

Arrays are stored under ``param/<path>``, ``adam_m/<path>`` and ``adam_v/<path>``;
everything else (config text, counters, RNG states) lives in a JSON string
under ``__meta__``. Files load without pickle.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "normforge-ckpt"
VERSION = 1


def save_checkpoint(path: str | Path, meta: Mapping[str, Any], params: Mapping[str, Any],
                    adam_m: Mapping[str, np.ndarray] | None = None,
                    adam_v: Mapping[str, np.ndarray] | None = None,
                    arrays: Mapping[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, np.ndarray] = {}
    for k, p in params.items():
        payload["param/" + k] = np.asarray(getattr(p, "data", p), dtype=np.float64)
    for prefix, group in (("adam_m/", adam_m), ("adam_v/", adam_v), ("array/", arrays)):
        for k, a in (group or {}).items():
            payload[prefix + k] = np.asarray(a)
    header = {"format": FORMAT, "version": VERSION, **meta}
    payload["__meta__"] = np.array(json.dumps(header))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **payload)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not a normforge checkpoint")
        if meta.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "array": {}}
        for key in z.files:
            if key == "__meta__":
                continue
            g, name = key.split("/", 1)
            groups[g][name] = z[key].copy()
    return {"meta": meta, "params": groups["param"], "adam_m": groups["adam_m"],
            "adam_v": groups["adam_v"], "arrays": groups["array"]}
