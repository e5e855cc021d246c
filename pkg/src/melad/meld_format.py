"""MELD binary weight files.

Layout, all integers little-endian:

    bytes 0..3    magic "MELD"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 config length N
    next N bytes  UTF-8 JSON architecture config
    per tensor    u16 name length, UTF-8 name,
                  u8 rank, rank * u32 extents,
                  float32 row-major data
    last 4 bytes  u32 CRC-32 of every preceding byte

Tensors appear in layer order. The trailing checksum covers header, config,
and tensor records, so any torn write or bit flip is detected on load.
Distinct failures raise distinct exceptions so callers can tell a wrong file
from a corrupted one.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from .errors import MeladError
from .model import ArchitectureConfig, WeightBundle

MAGIC = b"MELD"
FORMAT_VERSION = 1


class MeldFormatError(MeladError):
    """Base for unreadable weight files."""


class BadMagicError(MeldFormatError):
    """The file does not start with the MELD magic."""


class UnsupportedVersionError(MeldFormatError):
    """The file announces a format version this reader does not know."""


class TruncatedStreamError(MeldFormatError):
    """The file ends in the middle of a declared structure."""


class ChecksumMismatchError(MeldFormatError):
    """The trailing CRC-32 does not match the bytes read."""


def save_weights(bundle: WeightBundle, path) -> None:
    """Write a weight bundle to a .meld file (atomic byte blob, CRC trailer)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    config_bytes = json.dumps(bundle.config.to_json()).encode("utf-8")
    buf.write(struct.pack("<Q", len(config_bytes)))
    buf.write(config_bytes)
    for name, arr in bundle.tensors.items():
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


class _Reader:
    """Cursor over the in-memory file with truncation-aware reads."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedStreamError(
                f"file ends inside {what}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.blob) - self.pos} remain"
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_weights(path) -> WeightBundle:
    """Read a .meld file, verify its checksum, and validate tensor shapes
    against the embedded architecture config."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise MeldFormatError(f"weight file not found: {path}") from None

    if len(blob) < len(MAGIC):
        raise TruncatedStreamError(
            f"file is {len(blob)} bytes, shorter than the magic"
        )
    if blob[:4] != MAGIC:
        raise BadMagicError(
            f"not a MELD weight file (starts with {blob[:4]!r})"
        )
    if len(blob) < 8:
        raise TruncatedStreamError("file ends inside the version field")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported MELD format version {version} "
            f"(this reader handles {FORMAT_VERSION})"
        )
    if len(blob) < 16:
        raise TruncatedStreamError(
            "file has no room for the config length and checksum trailer"
        )

    # Structure is parsed before the checksum is verified so that a file cut
    # short reports as truncated rather than as a checksum mismatch; a bit
    # flip that garbles a length field may therefore also report as
    # truncation, which the checksum would have caught either way.
    reader = _Reader(blob[:-4])
    reader.pos = 8
    config_len = reader.u64("the config length")
    config_bytes = reader.take(config_len, "the config JSON")
    try:
        config = ArchitectureConfig.from_json(json.loads(config_bytes.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MeldFormatError(f"embedded config is not valid JSON: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    while reader.pos < len(reader.blob):
        name_len = reader.u16("a tensor name length")
        name = reader.take(name_len, "a tensor name").decode("utf-8")
        rank = reader.u8(f"the rank of {name}")
        shape = tuple(reader.u32(f"an extent of {name}") for _ in range(rank))
        count = 1
        for extent in shape:
            count *= extent
        raw = reader.take(4 * count, f"the data of {name}")
        if name in tensors:
            raise MeldFormatError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumMismatchError(
            f"checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}"
        )

    # Shape/name mismatches against the embedded config surface as
    # WeightError from the bundle's own validation.
    return WeightBundle(config, tensors)
