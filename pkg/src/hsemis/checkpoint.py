"""Checkpoint directories: one HSTN tensor per state entry plus ``manifest.json``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .hstn import atomic_write_text, read_hstn, write_hstn

MANIFEST = "manifest.json"


def _filename(name: str) -> str:
    return name.replace("/", "_") + ".hstn"


def save_checkpoint(directory, state: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> None:
    """Write every tensor, then the manifest last so a readable manifest implies a complete checkpoint."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(state)
    for name in names:
        write_hstn(directory / _filename(name), np.asarray(state[name]))
    manifest = {"kind": kind, "tensors": names, "meta": meta or {}}
    atomic_write_text(directory / MANIFEST, json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_checkpoint(directory, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise DataError(f"{directory}: not a checkpoint (no {MANIFEST})")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest: {exc}") from exc
    if kind is not None and manifest.get("kind") != kind:
        raise DataError(f"{directory}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    state = {}
    for name in manifest["tensors"]:
        tensor_path = directory / _filename(name)
        if not tensor_path.exists():
            raise DataError(f"checkpoint tensor missing: {tensor_path}")
        state[name] = read_hstn(tensor_path).astype(np.float64)
    return state, manifest.get("meta", {})
