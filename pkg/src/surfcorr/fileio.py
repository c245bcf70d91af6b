"""Binary containers and netpbm images.

All binary formats are little-endian and start with an 8-byte magic and a
uint32 version.

Field file::

    magic "SCFIELD\\0", version, H, W, D (uint32)
    H*W*D float32, row-major (H, W, D)
    ceil(H*W/8) bytes: mask bits, row-major, MSB first

Named-tensor file::

    magic "SCTENS\\0\\0", version, count (uint32)
    per tensor: name length (uint16), UTF-8 name, ndim (uint8),
                dims (uint32 each), float32 payload
"""

import struct

import numpy as np

from ._util import atomic_write

FIELD_MAGIC = b"SCFIELD\0"
TENSOR_MAGIC = b"SCTENS\0\0"
VERSION = 1


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"{path}: unexpected end of file")
    return buf


def write_field_file(path, data, mask):
    data = np.asarray(data)
    mask = np.asarray(mask, dtype=bool)
    h, w, d = data.shape
    if mask.shape != (h, w):
        raise ValueError("mask shape does not match field")
    with atomic_write(path) as fh:
        fh.write(struct.pack("<8sIIII", FIELD_MAGIC, VERSION, h, w, d))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        fh.write(np.packbits(mask.ravel()).tobytes())


def read_field_file(path):
    """Return ``(data, mask)``; data is promoted to float64."""
    with open(path, "rb") as fh:
        magic, version, h, w, d = struct.unpack("<8sIIII", _read_exact(fh, 24, path))
        if magic != FIELD_MAGIC:
            raise ValueError(f"{path}: not an embedding field file")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported field version {version}")
        data = np.frombuffer(_read_exact(fh, 4 * h * w * d, path), dtype="<f4")
        bits = np.frombuffer(_read_exact(fh, (h * w + 7) // 8, path), dtype=np.uint8)
    mask = np.unpackbits(bits)[: h * w].astype(bool).reshape(h, w)
    return data.reshape(h, w, d).astype(np.float64), mask


def write_tensors(path, tensors):
    """Write a mapping of name -> array as float32 named tensors (order kept)."""
    with atomic_write(path) as fh:
        fh.write(struct.pack("<8sII", TENSOR_MAGIC, VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(path):
    out = {}
    with open(path, "rb") as fh:
        magic, version, count = struct.unpack("<8sII", _read_exact(fh, 16, path))
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a named-tensor file")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported tensor file version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2, path))
            name = _read_exact(fh, n, path).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(fh, 4 * size, path), dtype="<f4")
            out[name] = arr.reshape(shape).astype(np.float64)
    return out


def write_ppm(path, rgb):
    """Write an (H, W, 3) float image in [0, 1] as binary PPM."""
    rgb = np.asarray(rgb)
    img = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with atomic_write(path) as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_pgm(path, img):
    """Write an (H, W) integer image (values 0..255) as binary PGM."""
    img = np.asarray(img)
    if img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = img.shape
    with atomic_write(path) as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


def _netpbm_tokens(fh, count):
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        tokens += line.split(b"#", 1)[0].split()
    return tokens


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) with maxval <= 255."""
    with open(path, "rb") as fh:
        magic, w, h, maxval = _netpbm_tokens(fh, 4)
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval > 255:
            raise ValueError(f"{path}: 16-bit netpbm not supported")
        channels = {b"P5": 1, b"P6": 3}.get(magic)
        if channels is None:
            raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
        data = np.frombuffer(_read_exact(fh, w * h * channels, path), dtype=np.uint8)
    return data.reshape(h, w) if channels == 1 else data.reshape(h, w, 3)
