"""
Tests for the tensor file format and dataset manifests.
"""

import json
import struct

import numpy as np
import pytest

from services.errors import GeometryError, TensorFormatError
from services.scan import Geometry, TensorField
from services.tensor_io import (
    HEADER,
    MAGIC,
    Manifest,
    ManifestEntry,
    load_manifest,
    load_tensors,
    read_tensor,
    write_manifest,
    write_tensor,
)


def field(d=1, L=4.0, R=2, seed=0):
    geometry = Geometry(d=d, L=L, R=R)
    return TensorField(values=np.random.default_rng(seed).standard_normal(geometry.shape), geometry=geometry)


def test_file_size_follows_layout(tmp_path):
    path = tmp_path / "x.msst"
    write_tensor(field(), str(path))
    data = path.read_bytes()
    assert len(data) == 4 + 4 + 4 + 4 + 8 + 16 * 8
    assert data[:4] == MAGIC
    assert struct.unpack_from("<IIIQ", data, 4) == (1, 1, 2, 16)


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(1000):
        d = int(rng.integers(1, 4))
        R = int(rng.choice([2, 4]))
        L = float(rng.choice([1.0, 1.5, 2.0]))
        original = field(d, L, R, seed=i)
        original.values[0] = rng.choice([1e308, -0.0, 5e-324])
        path = tmp_path / f"t{i % 7}.msst"
        write_tensor(original, str(path))
        loaded = read_tensor(str(path))
        assert loaded.geometry == original.geometry
        assert loaded.values.tobytes() == original.values.tobytes()


def test_header_only_file(tmp_path):
    path = tmp_path / "x.msst"
    write_tensor(field(), str(path))
    path.write_bytes(path.read_bytes()[:HEADER.size + 8])
    with pytest.raises(TensorFormatError, match="truncated payload"):
        read_tensor(str(path))


def test_truncated_header(tmp_path):
    path = tmp_path / "x.msst"
    path.write_bytes(b"MSST\x01\x00")
    with pytest.raises(TensorFormatError, match="truncated header"):
        read_tensor(str(path))


def test_bad_magic(tmp_path):
    path = tmp_path / "x.msst"
    write_tensor(field(), str(path))
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(TensorFormatError, match="bad magic"):
        read_tensor(str(path))


def test_version_mismatch(tmp_path):
    path = tmp_path / "x.msst"
    data = bytearray(HEADER.pack(MAGIC, 2, 1, 2) + struct.pack("<Q", 16) + bytes(128))
    path.write_bytes(bytes(data))
    with pytest.raises(TensorFormatError, match="version 2"):
        read_tensor(str(path))


def test_big_endian_rejected(tmp_path):
    path = tmp_path / "x.msst"
    payload = np.zeros(16, dtype=">f8").tobytes()
    path.write_bytes(struct.pack(">4sIII", MAGIC, 1, 1, 2) + struct.pack(">Q", 16) + payload)
    with pytest.raises(TensorFormatError, match="big-endian"):
        read_tensor(str(path))


def test_trailing_bytes(tmp_path):
    path = tmp_path / "x.msst"
    write_tensor(field(), str(path))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TensorFormatError, match="trailing"):
        read_tensor(str(path))


def test_odd_cell_count(tmp_path):
    path = tmp_path / "x.msst"
    path.write_bytes(HEADER.pack(MAGIC, 1, 1, 2) + struct.pack("<Q", 15) + bytes(15 * 8))
    with pytest.raises(TensorFormatError, match="even"):
        read_tensor(str(path))


def test_geometry_overflow(tmp_path):
    path = tmp_path / "x.msst"
    path.write_bytes(HEADER.pack(MAGIC, 1, 2, 2) + struct.pack("<QQ", 2 ** 40, 2 ** 40))
    with pytest.raises(TensorFormatError, match="overflow"):
        read_tensor(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(TensorFormatError):
        read_tensor(str(tmp_path / "absent.msst"))


class TestManifest:
    def write_dataset(self, tmp_path, n=3):
        entries = []
        for i in range(n):
            name = f"tensor_{i:04d}.msst"
            write_tensor(field(seed=i), str(tmp_path / name))
            entries.append(ManifestEntry(path=name, provenance={"index": i}))
        manifest = Manifest(geometry=Geometry(d=1, L=4.0, R=2), entries=entries, seed_lineage={"seed": 0})
        write_manifest(manifest, str(tmp_path / "manifest.json"))
        return manifest

    def test_round_trip(self, tmp_path):
        written = self.write_dataset(tmp_path)
        loaded = load_manifest(str(tmp_path / "manifest.json"))
        assert loaded == written
        tensors = load_tensors(loaded, str(tmp_path))
        assert [X.provenance["index"] for X in tensors] == [0, 1, 2]
        assert np.array_equal(tensors[1].values, field(seed=1).values)

    def test_missing_tensor(self, tmp_path):
        self.write_dataset(tmp_path)
        (tmp_path / "tensor_0001.msst").unlink()
        with pytest.raises(TensorFormatError, match="tensor_0001.msst"):
            load_manifest(str(tmp_path / "manifest.json"))

    def test_geometry_mismatch(self, tmp_path):
        self.write_dataset(tmp_path)
        write_tensor(field(R=4), str(tmp_path / "tensor_0002.msst"))
        with pytest.raises(GeometryError, match="tensor_0002.msst"):
            load_manifest(str(tmp_path / "manifest.json"))

    def test_invalid_json(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(TensorFormatError):
            load_manifest(str(tmp_path / "manifest.json"))

    def test_json_is_sorted(self, tmp_path):
        self.write_dataset(tmp_path, n=1)
        text = (tmp_path / "manifest.json").read_text()
        assert text == json.dumps(json.loads(text), sort_keys=True, indent=2)
