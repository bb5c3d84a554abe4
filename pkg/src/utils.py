import hashlib
import json
import os
import re
from pathlib import Path

import numpy as np

CACHE_DIR_ENV = "INSERT_CACHE_DIR"


def cache_dir():
    """Directory for derived caches (top-N similar-user tables)."""
    path = Path(os.environ.get(CACHE_DIR_ENV) or Path.home() / ".cache" / "insert-rec")
    path.mkdir(parents=True, exist_ok=True)
    return path


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_arrays(arrays):
    """Order-independent fingerprint of named arrays (names, dtypes, shapes and bytes)."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        value = np.asarray(arrays[name])
        digest.update(name.encode())
        if value.dtype == object:
            digest.update(json.dumps([str(v) for v in value.reshape(-1)]).encode())
        else:
            value = np.ascontiguousarray(value)
            digest.update(f"{value.dtype.str}{value.shape}".encode())
            digest.update(value.tobytes())
    return digest.hexdigest()


def hash_json(obj):
    return hashlib.sha256(json.dumps(clean_for_json(obj), sort_keys=True).encode()).hexdigest()


def clean_for_json(value):
    """Recursively replace NaN with None and numpy types with python ones."""
    if isinstance(value, dict):
        return {str(k): clean_for_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean_for_json(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean_for_json(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and np.isnan(value):
        return None
    return value


def parse_id_list(text):
    """
    Parses "a, b c;d" into ["a", "b", "c", "d"].
    Returns an empty list for blank input.
    """
    if not text:
        return []
    return [part for part in re.split(r"[,;\s]+", text.strip()) if part]
