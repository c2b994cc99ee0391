"""Shared on-disk container: ASCII header followed by raw float32 payloads.

Datasets and parameter checkpoints both use this format.  The header is a
sequence of newline-terminated ASCII lines:

    DPLANBIN 1
    endian little
    meta <key> <percent-encoded value>
    array <name> <ndim> <dim0> <dim1> ...
    end

followed by the arrays' float32 payloads, row-major, in header order.
Meta values are percent-encoded so they may contain spaces.  Arrays are
always written little-endian float32; in-memory float64 values are
quantized on save, so the file domain round-trips bit-exactly.
"""

from __future__ import annotations

import io
import urllib.parse

import numpy as np

MAGIC = "DPLANBIN"
VERSION = 1


class FileFormatError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(FileFormatError):
    pass


class BadVersionError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


def write_record(path, meta: dict[str, str], arrays: dict[str, np.ndarray]) -> None:
    """Write a record file.  Meta values are str()'d; arrays cast to float32."""
    lines = [f"{MAGIC} {VERSION}", "endian little"]
    for key in meta:
        if " " in key:
            raise ValueError(f"meta key may not contain spaces: {key!r}")
        lines.append(f"meta {key} {urllib.parse.quote(str(meta[key]), safe='')}")
    payloads = []
    for name, arr in arrays.items():
        if " " in name:
            raise ValueError(f"array name may not contain spaces: {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f4")
        dims = " ".join(str(d) for d in a.shape)
        lines.append(f"array {name} {a.ndim} {dims}".rstrip())
        payloads.append(a.tobytes())
    lines.append("end")
    blob = ("\n".join(lines) + "\n").encode("ascii") + b"".join(payloads)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_record(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read a record file back; arrays come out float32, meta as strings."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, rest = raw.partition(b"end\n")
    if not sep:
        raise FileFormatError(f"{path}: missing end-of-header marker")
    try:
        header_lines = head.decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise FileFormatError(f"{path}: header is not ASCII") from exc
    if not header_lines:
        raise BadMagicError(f"{path}: empty header")
    magic = header_lines[0].split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {header_lines[0]!r}")
    if magic[1] != str(VERSION):
        raise BadVersionError(f"{path}: unsupported version {magic[1]!r}")

    meta: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in header_lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "endian":
            if parts[1] != "little":
                raise FileFormatError(f"{path}: unsupported endianness {parts[1]!r}")
        elif parts[0] == "meta":
            if len(parts) < 2:
                raise FileFormatError(f"{path}: malformed meta line {line!r}")
            value = parts[2] if len(parts) > 2 else ""
            meta[parts[1]] = urllib.parse.unquote(value)
        elif parts[0] == "array":
            if len(parts) < 3:
                raise FileFormatError(f"{path}: malformed array line {line!r}")
            name, ndim = parts[1], int(parts[2])
            dims = tuple(int(d) for d in parts[3 : 3 + ndim])
            if len(dims) != ndim:
                raise FileFormatError(f"{path}: array dims truncated in {line!r}")
            shapes.append((name, dims))
        else:
            raise FileFormatError(f"{path}: unknown header directive {parts[0]!r}")

    arrays: dict[str, np.ndarray] = {}
    buf = io.BytesIO(rest)
    for name, dims in shapes:
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * 4
        chunk = buf.read(nbytes)
        if len(chunk) != nbytes:
            raise TruncatedPayloadError(
                f"{path}: array {name!r} expects {nbytes} bytes, got {len(chunk)}"
            )
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(dims).copy()
    trailing = buf.read(1)
    if trailing:
        raise FileFormatError(f"{path}: trailing bytes after declared payloads")
    return meta, arrays


def encode_floats(values) -> str:
    """Exact decimal encoding of a float64 vector for header meta fields."""
    return ",".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64).ravel())


def decode_floats(text: str) -> np.ndarray:
    if text == "":
        return np.zeros(0)
    return np.array([float(tok) for tok in text.split(",")], dtype=np.float64)
