"""Versioned binary container used by dataset files and model checkpoints.

Layout: 4-byte magic, little-endian uint32 version, uint64 header length,
UTF-8 JSON header, then the raw payload blocks back to back. The header
records each block's byte length and a SHA-256 checksum of the whole
payload, so truncation and bit flips are detected on load. Writes go
through a temp file and an atomic rename.
"""

import hashlib
import json
import os
import struct
import tempfile

from .errors import FormatError

_PREFIX = struct.Struct("<IQ")


def atomic_write_text(path, text):
    """Write UTF-8 text through a temp file and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-text-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def payload_checksum(blocks):
    h = hashlib.sha256()
    for block in blocks:
        h.update(block)
    return h.hexdigest()


def write_container(path, magic, version, header, blocks):
    """Write header + payload blocks atomically. `header` must be JSON-safe."""
    if len(magic) != 4:
        raise ValueError(f"magic must be 4 bytes, got {magic!r}")
    full_header = dict(header)
    full_header["block_lengths"] = [len(b) for b in blocks]
    full_header["checksum"] = payload_checksum(blocks)
    header_bytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-container-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(magic)
            fh.write(_PREFIX.pack(version, len(header_bytes)))
            fh.write(header_bytes)
            for block in blocks:
                fh.write(block)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return full_header["checksum"]


def read_container(path, magic, version):
    """Read and verify a container; returns (header, blocks)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 + _PREFIX.size or data[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode('ascii', 'replace')} container")
    got_version, header_len = _PREFIX.unpack_from(data, 4)
    if got_version != version:
        raise FormatError(f"{path}: unsupported version {got_version} (expected {version})")
    header_start = 4 + _PREFIX.size
    header_end = header_start + header_len
    if header_end > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[header_start:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    lengths = header.get("block_lengths")
    if not isinstance(lengths, list) or not all(isinstance(n, int) and n >= 0 for n in lengths):
        raise FormatError(f"{path}: header missing block lengths")
    blocks = []
    offset = header_end
    for length in lengths:
        if offset + length > len(data):
            raise FormatError(f"{path}: truncated payload")
        blocks.append(data[offset:offset + length])
        offset += length
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after payload")
    if payload_checksum(blocks) != header.get("checksum"):
        raise FormatError(f"{path}: payload checksum mismatch")
    return header, blocks
