"""JSON-header + little-endian float32 payload containers.

Two layouts share one header schema:

* packed: ``MAGIC | uint32 header_len | header json | payload`` in one file
  (adaptors, summary archives);
* sidecar: header in ``<name>.json`` and payload in ``<name>.bin``
  (model checkpoints, store embeddings).

The header lists tensors in payload order as ``{"name", "shape"}`` and carries
the payload length and CRC32 so truncation and bit rot are both detected.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CorruptFileError, VersionMismatchError

MAGIC = b"LLCO"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_payload(tensors: list[tuple[str, np.ndarray]]) -> tuple[list[dict], bytes]:
    entries = []
    chunks = []
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype=_F32)
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    return entries, b"".join(chunks)


def _unpack_payload(entries: list[dict], payload: bytes, expect_len: int, crc: int) -> dict[str, np.ndarray]:
    if len(payload) != expect_len:
        raise CorruptFileError(f"payload is {len(payload)} bytes, header says {expect_len}")
    if zlib.crc32(payload) != crc:
        raise CorruptFileError("payload checksum mismatch")
    out: dict[str, np.ndarray] = {}
    off = 0
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if off + n > len(payload):
            raise CorruptFileError(f"tensor {e['name']!r} runs past end of payload")
        out[e["name"]] = np.frombuffer(payload, dtype=_F32, count=n // 4, offset=off).reshape(shape).copy()
        off += n
    if off != len(payload):
        raise CorruptFileError("trailing bytes after last tensor")
    return out


def _check_header(header: Any, kind: str) -> dict:
    if not isinstance(header, dict):
        raise CorruptFileError("header is not a JSON object")
    if header.get("kind") != kind:
        raise CorruptFileError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{kind} format version {header.get('format_version')!r}, this build reads {FORMAT_VERSION}"
        )
    for key in ("tensors", "payload_bytes", "crc32"):
        if key not in header:
            raise CorruptFileError(f"header missing {key!r}")
    return header


def write_packed(path, kind: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    entries, payload = _pack_payload(tensors)
    header = dict(meta, kind=kind, format_version=FORMAT_VERSION, tensors=entries,
                  payload_bytes=len(payload), crc32=zlib.crc32(payload))
    hbytes = json.dumps(header, sort_keys=True).encode()
    atomic_write(path, MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def read_packed(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CorruptFileError(f"{path}: bad magic or truncated preamble")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    header = _check_header(header, kind)
    arrays = _unpack_payload(header["tensors"], raw[8 + hlen :], header["payload_bytes"], header["crc32"])
    return header, arrays


def write_sidecar(json_path, bin_path, kind: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    entries, payload = _pack_payload(tensors)
    header = dict(meta, kind=kind, format_version=FORMAT_VERSION, tensors=entries,
                  payload_bytes=len(payload), crc32=zlib.crc32(payload),
                  payload_file=Path(bin_path).name)
    atomic_write(bin_path, payload)
    atomic_write(json_path, json.dumps(header, indent=1, sort_keys=True).encode())


def read_sidecar(json_path, kind: str, bin_path=None) -> tuple[dict, dict[str, np.ndarray]]:
    json_path = Path(json_path)
    try:
        header = json.loads(json_path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{json_path}: unreadable manifest") from exc
    header = _check_header(header, kind)
    if bin_path is None:
        bin_path = json_path.parent / header.get("payload_file", json_path.stem + ".bin")
    try:
        payload = Path(bin_path).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptFileError(f"missing payload file {bin_path}") from exc
    return header, _unpack_payload(header["tensors"], payload, header["payload_bytes"], header["crc32"])
