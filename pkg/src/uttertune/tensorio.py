"""Versioned named-tensor container with a whole-file checksum.

Layout: a UTF-8 text header (format line, meta lines, one line per tensor
with name/shape, then "end"), the raw tensor payloads in header order as
row-major little-endian float32, and a trailing 32-byte SHA-256 digest of
every preceding byte. Writing the same tensors and meta twice yields
byte-identical files.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import CorruptFile, VersionMismatch

TENSOR_FORMAT_VERSION = "v1"
_MAGIC = "uttertune-tensors"
_DIGEST_SIZE = 32


def _check_name(name: str) -> None:
    if not name or any(c in name for c in " \t\n"):
        raise ValueError(f"bad tensor/meta name {name!r}")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    """Write float32 tensors plus string metadata; order is preserved."""
    header_lines = [f"{_MAGIC} {TENSOR_FORMAT_VERSION}"]
    for key, value in meta.items():
        _check_name(key)
        value = str(value)
        if "\n" in value:
            raise ValueError(f"meta value for {key!r} contains a newline")
        header_lines.append(f"meta {key}\t{value}")
    payloads = []
    for name, arr in tensors.items():
        _check_name(name)
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ValueError(f"tensor {name!r} must be float32, got {arr.dtype}")
        dims = " ".join(str(d) for d in arr.shape)
        header_lines.append(f"tensor {name} {arr.ndim}{(' ' + dims) if dims else ''}")
        payloads.append(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())
    header_lines.append("end")
    blob = "\n".join(header_lines).encode("utf-8") + b"\n" + b"".join(payloads)
    digest = hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(blob + digest)


def load_tensors(path):
    """Read a container; returns (tensors dict, meta dict) in file order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DIGEST_SIZE:
        raise CorruptFile("file shorter than its checksum")
    blob, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(blob).digest() != digest:
        raise CorruptFile("checksum mismatch")
    header_end = blob.find(b"\nend\n")
    if header_end == -1:
        raise CorruptFile("missing header terminator")
    try:
        header = blob[: header_end + 4].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptFile("header is not UTF-8") from exc
    payload = blob[header_end + 5 :]
    lines = header.split("\n")
    first = lines[0].split(" ")
    if len(first) != 2 or first[0] != _MAGIC:
        raise CorruptFile("not a tensor container")
    if first[1] != TENSOR_FORMAT_VERSION:
        raise VersionMismatch(
            f"container version {first[1]} != {TENSOR_FORMAT_VERSION}"
        )
    meta: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    for line in lines[1:]:
        if line == "end":
            break
        if line.startswith("meta "):
            body = line[5:]
            if "\t" not in body:
                raise CorruptFile(f"malformed meta line {line!r}")
            key, value = body.split("\t", 1)
            meta[key] = value
        elif line.startswith("tensor "):
            parts = line.split(" ")
            try:
                ndim = int(parts[2])
                shape = tuple(int(d) for d in parts[3 : 3 + ndim])
            except (IndexError, ValueError) as exc:
                raise CorruptFile(f"malformed tensor line {line!r}") from exc
            if len(parts) != 3 + ndim or len(shape) != ndim:
                raise CorruptFile(f"malformed tensor line {line!r}")
            specs.append((parts[1], shape))
        else:
            raise CorruptFile(f"unrecognized header line {line!r}")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptFile(f"payload truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(
            np.float32
        )
        offset += nbytes
    if offset != len(payload):
        raise CorruptFile("trailing bytes after last tensor")
    return tensors, meta
