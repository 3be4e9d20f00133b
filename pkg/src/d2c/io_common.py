"""Shared binary-format plumbing: little-endian primitives, blake2b-64
section checksums, and the sectioned container used by the dataset and
condensed-data files.

Container layout (all integers little-endian):

    magic (4 bytes) | version u32 | manifest_len u32 | manifest (UTF-8 JSON)
    | for each section declared in manifest["sections"]:
          payload bytes | checksum (8-byte blake2b of the payload)

The manifest is serialized with sorted keys and compact separators so
identical content always produces identical bytes. Section declarations are
``{"name": ..., "dtype": "f32"|"u32", "shape": [...]}`` in payload order.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np


class FileFormatError(Exception):
    """Base for structured-file errors."""


class BadMagicError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u32": np.dtype("<u4")}


def blake2b8(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def fingerprint_hex(data: bytes) -> str:
    return blake2b8(data).hex()


class ByteReader:
    """Byte cursor that raises TruncatedFileError instead of short-reading."""

    def __init__(self, data: bytes, label: str = "file"):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.label}: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise FileFormatError(
                f"{self.label}: {len(self.data) - self.pos} trailing bytes")


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def pack_u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, version: int, manifest: dict,
                    sections: dict[str, np.ndarray]) -> bytes:
    """Serialize and write a sectioned container; returns the bytes written.

    ``manifest["sections"]`` is derived here from the section arrays, in
    insertion order of ``sections``.
    """
    decls = []
    blobs = []
    for name, arr in sections.items():
        code = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
                np.dtype(np.uint32): "u32"}.get(arr.dtype)
        if code is None:
            raise ValueError(f"section '{name}' has unsupported dtype {arr.dtype}")
        decls.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False)
                     .tobytes())
    manifest = dict(manifest)
    manifest["sections"] = decls
    mbytes = manifest_bytes(manifest)
    out = bytearray()
    out += magic
    out += pack_u32(version)
    out += pack_u32(len(mbytes))
    out += mbytes
    for blob in blobs:
        out += blob
        out += blake2b8(blob)
    data = bytes(out)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_container(path, magic: bytes, max_version: int):
    """Read, validate, and return (version, manifest, {name: array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = ByteReader(data, label=str(path))
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"{path}: magic {got!r} != expected {magic!r}")
    version = r.u32()
    if not 1 <= version <= max_version:
        raise UnsupportedVersionError(
            f"{path}: format version {version} unsupported (max {max_version})")
    mlen = r.u32()
    try:
        manifest = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"{path}: bad manifest: {e}") from None
    arrays = {}
    for decl in manifest.get("sections", []):
        dtype = _DTYPES[decl["dtype"]]
        shape = tuple(decl["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        blob = r.take(nbytes)
        check = r.take(8)
        if blake2b8(blob) != check:
            raise ChecksumError(f"{path}: section '{decl['name']}' checksum mismatch")
        arrays[decl["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    r.expect_end()
    return version, manifest, arrays
