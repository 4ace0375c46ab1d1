"""Named-array archive: a zip holding ``manifest.json`` plus one ``.npy`` per array.

Floating arrays are written as little-endian float64, row-major; integer arrays
as little-endian int64. The manifest records every array's shape and dtype next
to free-form metadata.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError

FORMAT = "handmim-archive/1"


def _canonical(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return np.ascontiguousarray(a, dtype="<f8")
    if a.dtype.kind in "iub":
        return np.ascontiguousarray(a, dtype="<i8")
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def save_archive(path, arrays: Dict[str, np.ndarray], meta: dict = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"format": FORMAT, "meta": meta or {}, "arrays": {}}
    # fixed timestamp keeps archives byte-stable
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            a = _canonical(arrays[name])
            manifest["arrays"][name] = {"shape": list(a.shape), "dtype": a.dtype.str}
            buf = io.BytesIO()
            np.lib.format.write_array(buf, a, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", stamp), buf.getvalue())
        zf.writestr(zipfile.ZipInfo("manifest.json", stamp), json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_archive(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for name, info in manifest["arrays"].items():
                a = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                if list(a.shape) != info["shape"]:
                    raise CheckpointError(f"array {name}: shape {a.shape} disagrees with manifest")
                arrays[name] = a
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read archive {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown archive format {manifest.get('format')!r}")
    return arrays, manifest.get("meta", {})
