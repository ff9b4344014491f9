"""
Tensor files and dataset manifests.

File layout (little-endian):
    magic "MSST" | version u32 = 1 | d u32 | R u32 | d x u64 cell counts |
    float64 payload, row-major (last axis fastest)
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

from .errors import GeometryError, TensorFormatError
from .scan import Geometry, TensorField

logger = logging.getLogger(__name__)

MAGIC = b"MSST"
VERSION = 1
HEADER = struct.Struct("<4sIII")
MAX_DIMENSION = 16


def write_tensor(field: TensorField, path: str) -> None:
    values = np.ascontiguousarray(field.values, dtype="<f8")
    counts = values.shape
    header = HEADER.pack(MAGIC, VERSION, field.d, field.R) + struct.pack(f"<{field.d}Q", *counts)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes(order="C"))


def _read_header(data: bytes, path: str):
    if len(data) < HEADER.size:
        raise TensorFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, d, R = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version == struct.unpack(">I", struct.pack("<I", VERSION))[0]:
        raise TensorFormatError(f"{path}: big-endian tensor files are not supported")
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if not 1 <= d <= MAX_DIMENSION:
        raise TensorFormatError(f"{path}: dimension {d} outside [1, {MAX_DIMENSION}]")
    if R == 0:
        raise TensorFormatError(f"{path}: resolution must be positive")

    end = HEADER.size + 8 * d
    if len(data) < end:
        raise TensorFormatError(f"{path}: truncated header, missing cell counts")
    counts = struct.unpack_from(f"<{d}Q", data, HEADER.size)
    return d, R, counts, end


def read_tensor(path: str) -> TensorField:
    """Read a tensor file; rejects truncated, oversized and big-endian files."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise TensorFormatError(f"Tensor file not found: {path}")

    d, R, counts, start = _read_header(data, path)
    if any(c == 0 or c % 2 for c in counts):
        raise TensorFormatError(f"{path}: cell counts must be even and positive, got {list(counts)}")
    if len(set(counts)) != 1:
        raise TensorFormatError(f"{path}: cell counts differ across axes: {list(counts)}")

    total = 1
    for c in counts:
        total *= c
    expected = total * 8
    if expected > 2 ** 62:
        raise TensorFormatError(f"{path}: geometry overflow, {list(counts)} cells")
    payload = len(data) - start
    if payload < expected:
        raise TensorFormatError(f"{path}: truncated payload ({payload} of {expected} bytes)")
    if payload > expected:
        raise TensorFormatError(f"{path}: {payload - expected} trailing bytes after the payload")

    values = np.frombuffer(data, dtype="<f8", count=total, offset=start).reshape(counts).astype(np.float64)
    geometry = Geometry(d=d, L=counts[0] / (2.0 * R), R=R)
    try:
        return TensorField(values=values, geometry=geometry, provenance={"kind": "external", "path": str(path)})
    except GeometryError as e:
        raise TensorFormatError(f"{path}: {e}")


class ManifestEntry(BaseModel):
    path: str
    provenance: Dict = Field(default_factory=dict)
    ground_truth: Optional[Dict] = None


class Manifest(BaseModel):
    geometry: Geometry
    entries: List[ManifestEntry]
    seed_lineage: Dict = Field(default_factory=dict)


def write_manifest(manifest: Manifest, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.model_dump(), fh, sort_keys=True, indent=2)


def load_manifest(path: str) -> Manifest:
    """Load a manifest and check every referenced file exists and shares its geometry."""
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise TensorFormatError(f"Manifest not found: {path}")
    try:
        with open(manifest_path) as fh:
            manifest = Manifest(**json.load(fh))
    except json.JSONDecodeError as e:
        raise TensorFormatError(f"Manifest {path} is not valid JSON: {e}")

    if not manifest.entries:
        raise TensorFormatError(f"Manifest {path} lists no tensors")
    for entry in manifest.entries:
        tensor_path = manifest_path.parent / entry.path
        if not tensor_path.exists():
            raise TensorFormatError(f"Manifest {path} references a missing file: {entry.path}")
        with open(tensor_path, "rb") as fh:
            d, R, counts, _ = _read_header(fh.read(HEADER.size + 8 * MAX_DIMENSION), str(tensor_path))
        if d != manifest.geometry.d or R != manifest.geometry.R or counts[0] != manifest.geometry.cells:
            raise GeometryError(f"{entry.path} has geometry (d={d}, R={R}, cells={counts[0]}), "
                                f"manifest declares {manifest.geometry.model_dump()}")
    return manifest


def load_tensors(manifest: Manifest, base_dir: str) -> List[TensorField]:
    tensors = []
    for entry in manifest.entries:
        field = read_tensor(str(Path(base_dir) / entry.path))
        field.provenance = {**entry.provenance, "path": entry.path}
        tensors.append(field)
    logger.info(f"Loaded {len(tensors)} tensors from manifest")
    return tensors
