"""
file_store.py
Atomic file persistence for parameter dumps, datasets, configs and result CSVs.
Every write goes to a temp file in the target directory and is moved into place
with os.replace(), so readers never see a half-written file.
"""

import json
import os
import tempfile


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes atomically via os.replace() on a temp file."""
    path = os.fspath(path)
    dir_name = os.path.dirname(path) or "."
    os.makedirs(dir_name, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=dir_name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text: str) -> None:
    """Write UTF-8 text atomically. Newlines are written as-is (no translation)."""
    atomic_write_bytes(path, text.encode("utf-8"))


def save_json(path, payload: dict) -> None:
    """Write a JSON document atomically, indented for human editing."""
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=False) + "\n")


def load_json(path) -> dict:
    """Read a JSON document. Errors propagate; callers decide what a bad file means."""
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
