"""Checkpoint files: one JSON header line + a flat little-endian float32 block."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ArtifactMismatchError, CorruptArtifactError


def save_params(
    path: str | Path,
    header: dict,
    params: Mapping[str, np.ndarray],
) -> None:
    """Write named float arrays after a single-line JSON header.

    The header records each array's name and shape in order, so the block
    can be sliced back without ambiguity.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()]
    full_header = dict(header)
    full_header["layout"] = layout
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in params.values()
    )
    with path.open("wb") as fh:
        fh.write(json.dumps(full_header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob)


def load_params(
    path: str | Path, expected_kind: str, expected_config_hash: str | None = None
) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CorruptArtifactError(f"{path} has no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptArtifactError(f"{path} has an unreadable header: {exc}") from exc
    if header.get("kind") != expected_kind:
        raise CorruptArtifactError(
            f"{path} holds a {header.get('kind')!r} checkpoint, expected {expected_kind!r}"
        )
    if expected_config_hash is not None and header.get("config_hash") not in (
        None,
        expected_config_hash,
    ):
        raise ArtifactMismatchError(
            f"checkpoint {path} was trained under config {header.get('config_hash')}, "
            f"expected {expected_config_hash}"
        )
    blob = raw[newline + 1:]
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header.get("layout", []):
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 4
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptArtifactError(f"{path} is truncated at parameter {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CorruptArtifactError(f"{path} has {len(blob) - offset} trailing bytes")
    return header, params
