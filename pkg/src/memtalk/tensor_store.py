"""Raw-blob persistence: little-endian float32 blobs plus JSON manifests.

Every on-disk artifact in the package (datasets, memory banks, model
checkpoints, blendshape bases) follows the same convention: a
``manifest.json`` describing named arrays, and one raw binary blob per
array. Blobs are validated by byte length and sha256 on read; any mismatch
raises :class:`IntegrityError` naming the offending blob.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import IntegrityError

BLOB_DTYPE = np.dtype("<f4")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    """Deterministic JSON encoding used for content hashes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_blob(path: Path, array: np.ndarray) -> dict:
    """Write ``array`` as little-endian float32; return its manifest entry."""
    data = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
    path = Path(path)
    path.write_bytes(data)
    return {
        "file": path.name,
        "shape": list(array.shape),
        "dtype": "float32",
        "nbytes": len(data),
        "sha256": sha256_bytes(data),
    }


def read_blob(directory: Path, entry: dict) -> np.ndarray:
    """Read and validate one blob described by a manifest entry."""
    path = Path(directory) / entry["file"]
    if not path.exists():
        raise IntegrityError(f"blob '{entry['file']}' is missing")
    data = path.read_bytes()
    expected = int(np.prod(entry["shape"])) * BLOB_DTYPE.itemsize
    if len(data) != expected or len(data) != entry["nbytes"]:
        raise IntegrityError(
            f"blob '{entry['file']}' has {len(data)} bytes, expected {expected}"
        )
    if sha256_bytes(data) != entry["sha256"]:
        raise IntegrityError(f"blob '{entry['file']}' fails its sha256 check")
    return np.frombuffer(data, dtype=BLOB_DTYPE).reshape(entry["shape"]).copy()


def write_manifest(directory: Path, arrays: dict, meta: dict, kind: str) -> str:
    """Write arrays + manifest into ``directory``; returns the content hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, array in arrays.items():
        entries[name] = write_blob(directory / f"{name}.f32", array)
    body = {"format": kind, "arrays": entries, "meta": meta}
    body["content_hash"] = sha256_bytes(canonical_json(body).encode())
    (directory / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return body["content_hash"]


def read_manifest(directory: Path, kind: str | None = None) -> tuple[dict, dict]:
    """Load a manifest directory; returns ``(arrays, meta)`` after validation."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise IntegrityError(f"manifest.json not found under {directory}")
    body = json.loads(manifest_path.read_text())
    stated = body.pop("content_hash", None)
    if stated != sha256_bytes(canonical_json(body).encode()):
        raise IntegrityError(f"manifest under {directory} fails its content hash")
    if kind is not None and body.get("format") != kind:
        raise IntegrityError(
            f"manifest under {directory} has format {body.get('format')!r}, expected {kind!r}"
        )
    arrays = {name: read_blob(directory, entry) for name, entry in body["arrays"].items()}
    return arrays, body["meta"]


def manifest_hash(directory: Path) -> str:
    """Content hash stored in a manifest directory (no blob verification)."""
    body = json.loads((Path(directory) / "manifest.json").read_text())
    return body["content_hash"]
