import json

import numpy as np
import pytest

from lloco.errors import CorruptFileError, VersionMismatchError
from lloco.fileformat import read_packed, read_sidecar, write_packed, write_sidecar


def tensors():
    rng = np.random.default_rng(0)
    return [("a", rng.standard_normal((3, 4)).astype(np.float32)), ("b", np.arange(5, dtype=np.float32))]


def test_packed_round_trip(tmp_path):
    p = tmp_path / "x.bin"
    write_packed(p, "thing", {"note": 1}, tensors())
    header, arrays = read_packed(p, "thing")
    assert header["note"] == 1 and header["format_version"] == 1
    for name, arr in tensors():
        assert arrays[name].tobytes() == arr.tobytes()


def test_packed_rejects_wrong_kind_bitflip_truncation(tmp_path):
    p = tmp_path / "x.bin"
    write_packed(p, "thing", {}, tensors())
    with pytest.raises(CorruptFileError):
        read_packed(p, "other")
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError):
        read_packed(p, "thing")
    p.write_bytes(b"LLC")
    with pytest.raises(CorruptFileError):
        read_packed(p, "thing")
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CorruptFileError):
        read_packed(p, "thing")


def test_sidecar_round_trip_and_version(tmp_path):
    j, b = tmp_path / "m.json", tmp_path / "m.bin"
    write_sidecar(j, b, "model", {"cfg": {"d": 2}}, tensors())
    header, arrays = read_sidecar(j, "model")
    assert header["cfg"] == {"d": 2}
    assert arrays["a"].shape == (3, 4)
    h = json.loads(j.read_text())
    h["format_version"] = 2
    j.write_text(json.dumps(h))
    with pytest.raises(VersionMismatchError):
        read_sidecar(j, "model")


def test_sidecar_missing_or_short_payload(tmp_path):
    j, b = tmp_path / "m.json", tmp_path / "m.bin"
    write_sidecar(j, b, "model", {}, tensors())
    b.write_bytes(b.read_bytes()[:-4])
    with pytest.raises(CorruptFileError):
        read_sidecar(j, "model")
    b.unlink()
    with pytest.raises(CorruptFileError):
        read_sidecar(j, "model")
