"""File formats: binary/plain PGM for 2-D rasters, a minimal NRRD subset for 3-D.

Readers return float64 arrays holding the stored values verbatim, so integer
payloads survive a round trip exactly. Label writers store 16-bit unsigned
values verbatim (big-endian in PGM per that format, little-endian in NRRD).
All writers are atomic: a temporary file in the target directory is renamed
over the destination only after a successful write.
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from .contour import scan_contour
from .grid import Connectivity


class ImageFormatError(ValueError):
    """Base error for unreadable image files; ``offset`` is a byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedTypeError(ImageFormatError):
    pass


def _atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-rcseg-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# -- PGM ----------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int, start: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    i = start
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        if i >= len(data):
            raise MalformedHeaderError("unexpected end of PGM header", offset=i)
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append((data[i:j], i))
        i = j
    return tokens, i


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise MalformedHeaderError(f"not a PGM file (magic {magic!r})", offset=0)
    tokens, pos = _pgm_tokens(data, 3, 2)
    try:
        width, height, maxval = (int(t[0]) for t in tokens)
    except ValueError:
        raise MalformedHeaderError("non-numeric PGM header field",
                                   offset=tokens[0][1]) from None
    if width <= 0 or height <= 0:
        raise MalformedHeaderError("non-positive PGM dimensions", offset=tokens[0][1])
    if not 0 < maxval < 65536:
        raise UnsupportedTypeError(f"unsupported PGM maxval {maxval}",
                                   offset=tokens[2][1])
    n = width * height
    if magic == b"P2":
        try:
            values = np.array(data[pos:].split(), dtype=np.int64)
        except ValueError:
            raise MalformedHeaderError("non-numeric P2 sample", offset=pos) from None
        if values.size < n:
            raise TruncatedPayloadError(
                f"P2 payload has {values.size} of {n} samples", offset=len(data))
        return values[:n].reshape(height, width).astype(np.float64)
    pos += 1  # single whitespace byte after maxval
    itemsize = 1 if maxval < 256 else 2
    need = n * itemsize
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"P5 payload has {len(payload)} of {need} bytes",
            offset=pos + len(payload))
    dtype = np.uint8 if itemsize == 1 else np.dtype(">u2")
    values = np.frombuffer(payload, dtype=dtype)
    return values.reshape(height, width).astype(np.float64)


def write_pgm(array: np.ndarray, path, plain: bool = False) -> None:
    """Write nonnegative integer-valued 2-D data verbatim as P5 (or plain P2)."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError("PGM stores 2-D rasters only")
    rounded = np.rint(arr)
    if not np.allclose(arr, rounded, atol=1e-9, rtol=0.0):
        raise ValueError("PGM stores integer values; round or rescale first")
    ints = rounded.astype(np.int64)
    if ints.min() < 0 or ints.max() > 65535:
        raise ValueError("PGM values must be in [0, 65535]")
    maxval = 255 if ints.max() <= 255 else 65535
    header = f"P2\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n" if plain else \
             f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n"
    if plain:
        body = "\n".join(" ".join(str(v) for v in row) for row in ints.tolist())
        _atomic_write_bytes(path, header.encode() + body.encode() + b"\n")
        return
    payload = ints.astype(np.uint8 if maxval == 255 else np.dtype(">u2")).tobytes()
    _atomic_write_bytes(path, header.encode() + payload)


# -- NRRD (minimal raw-encoding subset) ----------------------------------------

_NRRD_TYPES = {
    "uchar": np.dtype("u1"), "unsigned char": np.dtype("u1"),
    "ushort": np.dtype("<u2"), "unsigned short": np.dtype("<u2"),
    "float": np.dtype("<f4"),
}


def read_nrrd(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"NRRD000"):
        raise MalformedHeaderError("not a NRRD file", offset=0)
    fields = {}
    data_file = None
    pos = data.find(b"\n") + 1
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise MalformedHeaderError("NRRD header not terminated", offset=pos)
        line = data[pos:end].rstrip(b"\r")
        line_start = pos
        pos = end + 1
        if line == b"":
            break
        if line.startswith(b"#"):
            continue
        if b":" not in line:
            raise MalformedHeaderError("malformed NRRD field", offset=line_start)
        key, _, value = line.partition(b":")
        key = key.strip().lower().decode("ascii", "replace")
        value = value.strip().decode("ascii", "replace")
        if key == "data file":
            data_file = value
        else:
            fields[key] = value
    for required in ("type", "dimension", "sizes", "encoding"):
        if required not in fields:
            raise MalformedHeaderError(f"NRRD header missing '{required}'",
                                       offset=pos)
    if fields["encoding"] != "raw":
        raise UnsupportedTypeError(
            f"unsupported NRRD encoding {fields['encoding']!r}")
    tname = fields["type"]
    if tname not in _NRRD_TYPES:
        raise UnsupportedTypeError(f"unsupported NRRD type {tname!r}")
    dtype = _NRRD_TYPES[tname]
    if dtype.itemsize > 1 and fields.get("endian", "little") != "little":
        raise UnsupportedTypeError(
            f"unsupported NRRD endian {fields.get('endian')!r}")
    try:
        ndim = int(fields["dimension"])
        sizes = [int(v) for v in fields["sizes"].split()]
    except ValueError:
        raise MalformedHeaderError("non-numeric NRRD dimension/sizes") from None
    if ndim not in (2, 3) or len(sizes) != ndim or any(s <= 0 for s in sizes):
        raise MalformedHeaderError(
            f"bad NRRD dimension/sizes: {ndim} / {sizes}")
    if data_file is not None:
        base = os.path.dirname(os.fspath(path))
        with open(os.path.join(base, data_file), "rb") as fh:
            payload = fh.read()
        payload_base = 0
    else:
        payload = data[pos:]
        payload_base = pos
    n = int(np.prod(sizes))
    need = n * dtype.itemsize
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"NRRD payload has {len(payload)} of {need} bytes",
            offset=payload_base + len(payload))
    values = np.frombuffer(payload[:need], dtype=dtype)
    # NRRD sizes run fastest axis first; our arrays are C-order
    return values.reshape(tuple(reversed(sizes))).astype(np.float64)


def write_nrrd(array: np.ndarray, path, dtype: str = "float") -> None:
    if dtype not in ("float", "ushort", "uchar"):
        raise ValueError(f"unsupported NRRD write type {dtype!r}")
    arr = np.asarray(array)
    if arr.ndim not in (2, 3):
        raise ValueError("NRRD writer supports 2-D and 3-D rasters")
    np_dtype = _NRRD_TYPES[dtype]
    if dtype != "float":
        rounded = np.rint(arr)
        lo, hi = 0, 255 if dtype == "uchar" else 65535
        if rounded.min() < lo or rounded.max() > hi:
            raise ValueError(f"values out of range for NRRD type {dtype}")
        payload = rounded.astype(np_dtype).tobytes()
    else:
        payload = arr.astype(np_dtype).tobytes()
    sizes = " ".join(str(s) for s in reversed(arr.shape))
    header = (
        "NRRD0004\n"
        f"type: {dtype}\n"
        f"dimension: {arr.ndim}\n"
        f"sizes: {sizes}\n"
        "encoding: raw\n"
    )
    if np_dtype.itemsize > 1:
        header += "endian: little\n"
    header += "\n"
    _atomic_write_bytes(path, header.encode() + payload)


# -- dispatch by extension ------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read a PGM or NRRD raster into float64, values verbatim."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] in (b"P2", b"P5"):
        return read_pgm(path)
    if magic.startswith(b"NRRD000"):
        return read_nrrd(path)
    raise MalformedHeaderError("unrecognized image format", offset=0)


def read_labels(path) -> np.ndarray:
    values = read_image(path)
    labels = np.rint(values).astype(np.int32)
    if not np.array_equal(labels, values):
        raise ValueError("label file contains non-integer values")
    if labels.min() < 0:
        raise ValueError("label file contains negative values")
    return labels


def write_labels(labels: np.ndarray, path) -> None:
    """Labels verbatim: 16-bit P5 for 2-D, NRRD ushort for 3-D."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("labels must fit unsigned 16-bit storage")
    if arr.ndim == 2:
        # force 16-bit payload regardless of the value range
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n"
        _atomic_write_bytes(path, header.encode()
                            + arr.astype(np.dtype(">u2")).tobytes())
    elif arr.ndim == 3:
        write_nrrd(arr, path, dtype="ushort")
    else:
        raise ValueError("labels must be 2-D or 3-D")


def write_image(image: np.ndarray, path, scale: bool = False) -> None:
    """Write intensities; extension picks the container.

    ``.pgm`` expects integer-valued data unless ``scale`` is set, in which
    case values are linearly rescaled to the full 16-bit range. Any other
    extension is written as float NRRD, exact for counting data.
    """
    path_str = os.fspath(path)
    arr = np.asarray(image, dtype=np.float64)
    if path_str.lower().endswith(".pgm"):
        if scale:
            lo, hi = float(arr.min()), float(arr.max())
            arr = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo) * 65535
            arr = np.rint(arr)
        write_pgm(arr, path)
    else:
        write_nrrd(arr, path, dtype="float")


def overlay_mask(labels: np.ndarray, conn: Connectivity | None = None) -> np.ndarray:
    """8-bit mask of foreground contour pixels (255 on the contour)."""
    if conn is None:
        conn = Connectivity.default(labels.ndim)
    contour = scan_contour(labels, conn)
    mask = np.zeros(labels.shape, dtype=np.uint8)
    flat_labels = labels.ravel()
    flat_mask = mask.ravel()
    for x, _ in contour.as_key_set():
        if flat_labels[x] > 0:
            flat_mask[x] = 255
    return mask


def write_overlay(labels: np.ndarray, path, conn: Connectivity | None = None) -> None:
    mask = overlay_mask(labels, conn)
    if mask.ndim == 2:
        write_pgm(mask, path)
    else:
        write_nrrd(mask, path, dtype="uchar")
