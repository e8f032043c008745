# utils/general.py
"""General file and run-metadata helpers."""

import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from src.boottod import __version__

logger = logging.getLogger(__name__)


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(data: Any, path) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True, default=str)
    return path


def read_json(path) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def read_jsonl(path) -> list:
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def version_stamp() -> dict:
    return {
        "boottod": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def write_version_stamp(output_dir) -> Path:
    """version.json next to every command's outputs"""
    return write_json(version_stamp(), Path(output_dir) / "version.json")


def write_manifest(files: Iterable, path, extra: Optional[dict] = None) -> dict:
    """SHA-256 of each file keyed by file name"""
    manifest = dict(extra or {})
    manifest["files"] = {Path(f).name: sha256_file(f) for f in files}
    write_json(manifest, path)
    return manifest
