"""Readers and writers for the on-disk formats.

* Tensor container ``MLT1``: magic, u8 dtype (0 = float32), u8 ndim,
  u16 reserved, ndim x u32 dims, little-endian row-major payload, then a
  u32 CRC32 of the payload.  All integers little-endian.
* Masks: binary PGM (P5, maxval 255); foreground is any value >= 128.
* Depth images: PGM (P5, maxval 65535, big-endian samples), millimetres.
* Meshes: the ``v x y z`` / ``f i j k`` subset of OBJ, 1-indexed triangles.
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ChecksumError, CorruptFileError, FormatError,
                     MissingFileError, TruncatedFileError)

TENSOR_MAGIC = b"MLT1"
_HEADER = struct.Struct("<4sBBH")
_DTYPES = {0: np.dtype("<f4")}


def atomic_write_bytes(path, data):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such file: {path}")
    return path.read_bytes()


def encode_tensor(array):
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    payload = a.tobytes()
    header = _HEADER.pack(TENSOR_MAGIC, 0, a.ndim, 0) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_tensor(blob, source="<bytes>"):
    if len(blob) < _HEADER.size:
        if blob[:4] != TENSOR_MAGIC[:len(blob[:4])]:
            raise BadMagicError(f"{source}: not a tensor file")
        raise TruncatedFileError(f"{source}: header truncated")
    magic, dtype_code, ndim, _ = _HEADER.unpack_from(blob)
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}")
    if dtype_code not in _DTYPES:
        raise CorruptFileError(f"{source}: unknown dtype code {dtype_code}")
    dims_end = _HEADER.size + 4 * ndim
    if len(blob) < dims_end + 4:
        raise TruncatedFileError(f"{source}: truncated before payload")
    dims = struct.unpack_from(f"<{ndim}I", blob, _HEADER.size)
    dtype = _DTYPES[dtype_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    body = blob[dims_end:]
    payload, crc = body[:-4], struct.unpack("<I", body[-4:])[0]
    if len(payload) != expected:
        # an intact payload whose CRC still matches means the header lies
        if len(payload) % dtype.itemsize == 0 and zlib.crc32(payload) == crc:
            raise CorruptFileError(
                f"{source}: header dims {dims} need {expected} bytes, payload has {len(payload)}")
        if len(payload) < expected:
            raise TruncatedFileError(f"{source}: payload truncated ({len(payload)} of {expected} bytes)")
        raise CorruptFileError(f"{source}: {len(payload) - expected} trailing bytes")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{source}: CRC32 mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)


def save_tensor(path, array):
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path):
    return decode_tensor(_read(path), str(path))


def _pgm_tokens(blob, source):
    """Parse a P5 header; returns (width, height, maxval, payload offset)."""
    if blob[:2] != b"P5":
        raise BadMagicError(f"{source}: not a binary PGM (P5)")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: malformed PGM header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace before raster
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{source}: invalid PGM header values {fields}")
    return w, h, maxval, pos


def read_pgm(path):
    blob = _read(path)
    w, h, maxval, pos = _pgm_tokens(blob, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(blob) - pos < need:
        raise TruncatedFileError(f"{path}: PGM raster truncated")
    return np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos).reshape(h, w), maxval


def write_pgm(path, image, maxval):
    image = np.asarray(image)
    h, w = image.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    atomic_write_bytes(path, header + image.astype(dtype).tobytes())


def save_mask(path, bits):
    write_pgm(path, np.where(np.asarray(bits, dtype=bool), 255, 0), 255)


def load_mask_bits(path):
    img, maxval = read_pgm(path)
    if maxval != 255:
        raise FormatError(f"{path}: mask PGM must have maxval 255, got {maxval}")
    return img >= 128


def save_depth_mm(path, depth_m):
    mm = np.rint(np.asarray(depth_m, dtype=float) * 1000.0)
    if np.any(mm < 0) or np.any(mm > 65535):
        raise FormatError("depth outside the 16-bit millimetre range")
    write_pgm(path, mm.astype(np.uint16), 65535)


def load_depth_m(path):
    img, maxval = read_pgm(path)
    if maxval != 65535:
        raise FormatError(f"{path}: depth PGM must have maxval 65535, got {maxval}")
    return img.astype(np.float64) / 1000.0


def parse_obj(text, source="<obj>"):
    """Vertices and triangle faces from OBJ text; unknown line types are skipped."""
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                if len(parts) != 4:
                    raise ValueError("expected 3 coordinates")
                verts.append([float(p) for p in parts[1:]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces are supported")
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from None
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def format_obj(vertices, faces):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=float).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    return "\n".join(lines) + "\n"
