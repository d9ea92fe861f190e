"""SLMF feature files and the JSONL manifest rows the aligner ingests.

Implemented against the published byte layout, deliberately not by
importing the aligner package: the file format is the contract between
the two sides, and only an independent writer makes the shared golden
fixture a real interoperability test.

Layout: magic "SLMF", u32 version=1, u32 T, u32 d, then T*d
little-endian IEEE-754 single-precision values, row-major. Manifest:
JSON Lines, one record per utterance with keys
{id, transcript, feature_path, num_frames, frame_rate_hz, dim}.
"""

from __future__ import annotations

import json
import struct

import numpy as np

SLMF_MAGIC = b"SLMF"
SLMF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file violates the SLMF layout."""


def write_features(path, features) -> None:
    """Write a [T, d] matrix; storage is always single precision."""
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise FormatError(f"feature matrix must be 2-d, got shape {arr.shape}")
    t, d = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SLMF_MAGIC, SLMF_VERSION, t, d))
        f.write(arr.astype("<f4").tobytes(order="C"))


def read_features(path) -> np.ndarray:
    """Read a feature file back as float64 [T, d].

    Values are exactly the stored single-precision bits, widened — the
    same convention the aligner's reader uses, so both sides must
    produce identical arrays from the same file.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes < {_HEADER.size}")
    magic, version, t, d = _HEADER.unpack_from(blob)
    if magic != SLMF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != SLMF_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = _HEADER.size + t * d * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - _HEADER.size} bytes, "
            f"header {t}x{d} requires {expected - _HEADER.size}"
        )
    payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return payload.reshape(t, d).astype(np.float64)


def manifest_row(id: str, transcript: str, feature_path: str,
                 num_frames: int, frame_rate_hz: float, dim: int) -> dict:
    return {
        "id": id,
        "transcript": transcript,
        "feature_path": feature_path,
        "num_frames": int(num_frames),
        "frame_rate_hz": float(frame_rate_hz),
        "dim": int(dim),
    }


def write_manifest(path, rows) -> None:
    """One sorted-key JSON object per line; an empty job writes an
    empty file, which the aligner reads as an empty corpus."""
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True))
            f.write("\n")
