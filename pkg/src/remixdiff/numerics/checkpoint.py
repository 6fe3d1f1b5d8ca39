"""Checkpoint container: one .npz file holding named arrays plus a JSON header.

Layout (documented contract):
  * key ``__meta__``: a JSON string. Always contains ``format_version`` (int).
    Callers put model/training configuration here.
  * every other key: one parameter or state array, stored at its exact dtype.
Round-trips are value-exact because .npz stores raw IEEE bytes. Writes go
through a temp file plus atomic rename.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write arrays + metadata to ``path`` atomically."""
    if _META_KEY in arrays:
        raise ValueError(f"array name '{_META_KEY}' is reserved")
    meta = dict(meta or {})
    meta.setdefault("format_version", FORMAT_VERSION)
    payload = {_META_KEY: np.asarray(json.dumps(meta))}
    payload.update(arrays)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays + metadata; raises ValueError on version mismatch."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise ValueError(f"{path}: missing metadata header, not a checkpoint")
        meta = json.loads(str(data[_META_KEY]))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(
                f"{path}: checkpoint format version {version} unsupported "
                f"(expected {FORMAT_VERSION})"
            )
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    return arrays, meta
