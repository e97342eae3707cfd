"""JSON-manifest + binary-blob container used by dataset and database files.

The manifest is a compact JSON document; large float arrays live in a
sibling ``.bin`` file as one stream of 64-bit little-endian values and are
referenced by (element offset, element count).  The manifest records the
blob's CRC32 and byte length so corruption is caught before any array is
handed out.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, TruncationError, VersionMismatchError


class BlobBuilder:
    """Accumulates float64 arrays into one stream, returning element refs."""

    def __init__(self) -> None:
        self._chunks: list[bytes] = []
        self._count = 0

    def add(self, arr: np.ndarray) -> tuple[int, int]:
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        ref = (self._count, flat.size)
        self._chunks.append(flat.tobytes())
        self._count += flat.size
        return ref

    def tobytes(self) -> bytes:
        return b"".join(self._chunks)


class BlobReader:
    def __init__(self, data: bytes, source: str):
        self._values = np.frombuffer(data, dtype="<f8")
        self._source = source

    def fetch(self, offset: int, count: int) -> np.ndarray:
        if offset < 0 or count < 0 or offset + count > self._values.size:
            raise TruncationError(
                f"{self._source}: array ref [{offset}, {count}) exceeds blob "
                f"of {self._values.size} values"
            )
        return self._values[offset : offset + count].astype(np.float64)


def blob_path_for(manifest_path) -> Path:
    p = Path(manifest_path)
    return p.with_suffix(".bin")


def write_container(manifest_path, manifest: dict, blob: bytes) -> None:
    """Write the manifest and its blob; records crc32/size in the manifest."""
    p = Path(manifest_path)
    bp = blob_path_for(p)
    doc = dict(manifest)
    doc["blob"] = {
        "file": bp.name,
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        "nbytes": len(blob),
    }
    bp.write_bytes(blob)
    p.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def read_container(manifest_path, expected_format: str, expected_version: int) -> tuple[dict, BlobReader]:
    p = Path(manifest_path)
    try:
        doc = json.loads(p.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{p}: manifest is not valid JSON") from exc
    if not isinstance(doc, dict) or doc.get("format") != expected_format:
        raise FormatError(f"{p}: not a {expected_format!r} file")
    if doc.get("version") != expected_version:
        raise VersionMismatchError(
            f"{p}: container version {doc.get('version')!r}, expected {expected_version}"
        )
    blob_info = doc.get("blob")
    if not isinstance(blob_info, dict):
        raise FormatError(f"{p}: missing blob record")
    bp = p.parent / blob_info["file"]
    try:
        data = bp.read_bytes()
    except FileNotFoundError as exc:
        raise TruncationError(f"{p}: blob file {bp.name} missing") from exc
    if len(data) < int(blob_info["nbytes"]):
        raise TruncationError(
            f"{bp}: blob has {len(data)} bytes, manifest records {blob_info['nbytes']}"
        )
    data = data[: int(blob_info["nbytes"])]
    if (zlib.crc32(data) & 0xFFFFFFFF) != int(blob_info["crc32"]):
        raise ChecksumError(f"{bp}: blob CRC32 mismatch")
    return doc, BlobReader(data, str(bp))
