"""Manifest file loading, validation and saving.

File format: UTF-8 JSON with top-level {"version": 1, "provenance": str,
"frames": [...]}. Box coordinates are floating-point pixels. Images are
referenced by path relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .types import DatasetManifest, ManifestError, ValidationError


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and fully validate a manifest; every invariant violation is reported."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}")
    try:
        manifest = DatasetManifest.from_json(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest {path} does not match the schema: {exc}")
    violations = manifest.violations()
    if violations:
        raise ValidationError(violations)
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Validate and write atomically (tmp file + rename in the target directory)."""
    violations = manifest.violations()
    if violations:
        raise ValidationError(violations)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(manifest.to_json(), indent=2, sort_keys=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def image_path(manifest_path: str | Path, record_image_path: str) -> Path:
    """Resolve a frame's relative image path against its manifest location."""
    return Path(manifest_path).parent / record_image_path
