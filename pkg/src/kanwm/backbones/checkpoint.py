"""Parameter checkpoints: one raw little-endian float32 file per tensor plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = "kanwm-v1"
MANIFEST = "manifest.json"


def _fname(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_checkpoint(directory, arrays: Mapping[str, np.ndarray],
                    kinds: Mapping[str, str] | None = None, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        fname = _fname(name)
        arr.astype("<f4").tofile(d / fname)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "kind": (kinds or {}).get(name, _kind_of(name)),
            "file": fname,
        })
    manifest = {"version": VERSION, "tensors": entries}
    if extra:
        manifest["meta"] = extra
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return d


def _kind_of(name: str) -> str:
    return name.split("/")[0] if "/" in name else "tensor"


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    if manifest.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise ValueError(f"unsupported dtype {e['dtype']!r}")
        arr = np.fromfile(d / e["file"], dtype="<f4")
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, manifest
