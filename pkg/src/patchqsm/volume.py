"""3D scalar volumes, sidecar-header file I/O and PGM slice export.

A volume on disk is two files sharing a stem: ``<stem>.hdr`` holds
``key=value`` lines (dims, spacing, dtype, order) and ``<stem>.f32`` holds
the raw little-endian float32 payload with x varying fastest.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SUFFIX = ".hdr"
RAW_SUFFIX = ".f32"
_DTYPE = "f32le"
_ORDER = "x-fastest"


class VolumeFormatError(ValueError):
    """Raised when a volume file pair is missing, inconsistent or invalid."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume:
    """Real scalar field on a regular grid, indexed ``array[x, y, z]``.

    The array is stored as float64 and made read-only. ``ravel()`` gives
    the x-fastest flat layout used on disk.
    """

    array: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.array, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "array", _freeze(arr))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.array.shape)

    @property
    def size(self) -> int:
        return int(self.array.size)

    def ravel(self) -> np.ndarray:
        """Flat data with index ``x + Nx*(y + Ny*z)``."""
        return self.array.ravel(order="F")

    @classmethod
    def from_flat(cls, data, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        data = np.asarray(data, dtype=np.float64)
        dims = tuple(int(n) for n in dims)
        if data.size != int(np.prod(dims)):
            raise ValueError(f"{data.size} values do not fill dims {dims}")
        return cls(data.reshape(dims, order="F"), spacing)

    def with_array(self, array) -> "Volume":
        """New volume on the same grid holding ``array``."""
        return Volume(array, self.spacing)


@dataclass(frozen=True)
class Mask:
    """Binary voxel mask; ``array`` is boolean with shape ``dims``."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.ndim != 3:
            raise ValueError("mask must be 3D")
        object.__setattr__(self, "array", _freeze(arr.astype(bool)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.array.shape)

    @classmethod
    def full(cls, dims) -> "Mask":
        return cls(np.ones(tuple(dims), dtype=bool))

    @classmethod
    def from_volume(cls, v: Volume) -> "Mask":
        return cls(v.array != 0)

    def to_volume(self, spacing=(1.0, 1.0, 1.0)) -> Volume:
        return Volume(self.array.astype(np.float64), spacing)

    def check(self, dims) -> None:
        if tuple(dims) != self.dims:
            raise ValueError(f"mask dims {self.dims} do not match volume dims {tuple(dims)}")


def volume_paths(path) -> tuple[Path, Path]:
    """Return ``(header, raw)`` paths for a stem, ``.hdr`` or ``.f32`` path."""
    p = Path(path)
    if p.suffix in (HEADER_SUFFIX, RAW_SUFFIX):
        p = p.with_suffix("")
    return p.with_name(p.name + HEADER_SUFFIX), p.with_name(p.name + RAW_SUFFIX)


def _parse_triple(text: str, cast, key: str):
    parts = [s.strip() for s in text.split(",")]
    if len(parts) != 3:
        raise VolumeFormatError(f"header key {key!r} needs three comma-separated values, got {text!r}")
    try:
        return tuple(cast(s) for s in parts)
    except ValueError as exc:
        raise VolumeFormatError(f"bad value for header key {key!r}: {text!r}") from exc


def read_header(path) -> dict:
    header, _ = volume_paths(path)
    if not header.is_file():
        raise VolumeFormatError(f"missing header file {header}")
    fields = {}
    for lineno, line in enumerate(header.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"{header}:{lineno}: expected key=value, got {line!r}")
        fields[key.strip()] = value.strip()
    missing = {"dims", "spacing", "dtype", "order"} - fields.keys()
    if missing:
        raise VolumeFormatError(f"{header}: missing header keys {sorted(missing)}")
    if fields["dtype"] != _DTYPE or fields["order"] != _ORDER:
        raise VolumeFormatError(
            f"{header}: unsupported dtype/order {fields['dtype']}/{fields['order']}")
    dims = _parse_triple(fields["dims"], int, "dims")
    spacing = _parse_triple(fields["spacing"], float, "spacing")
    if min(dims) < 1 or min(spacing) <= 0:
        raise VolumeFormatError(f"{header}: dims and spacing must be positive")
    return {"dims": dims, "spacing": spacing}


def load_volume(path) -> Volume:
    """Read a volume written by :func:`save_volume`."""
    meta = read_header(path)
    _, raw = volume_paths(path)
    if not raw.is_file():
        raise VolumeFormatError(f"missing raw payload {raw}")
    n = int(np.prod(meta["dims"]))
    nbytes = raw.stat().st_size
    if nbytes != 4 * n:
        raise VolumeFormatError(
            f"{raw}: size mismatch, dims {meta['dims']} need {4 * n} bytes, file has {nbytes}")
    data = np.fromfile(raw, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{raw}: payload contains non-finite values")
    return Volume.from_flat(data.astype(np.float64), meta["dims"], meta["spacing"])


def save_volume(v: Volume, path) -> Path:
    """Write header and float32 payload; returns the header path."""
    header, raw = volume_paths(path)
    with np.errstate(over="ignore"):
        data = v.ravel().astype("<f4")
    if not np.all(np.isfinite(data)):
        # finite float64 values beyond float32 range overflow to inf
        raise VolumeFormatError("volume has values that are not finite in float32")
    header.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "dims=" + ",".join(str(n) for n in v.dims),
        "spacing=" + ",".join(repr(s) for s in v.spacing),
        f"dtype={_DTYPE}",
        f"order={_ORDER}",
    ]
    header.write_text("\n".join(lines) + "\n", encoding="utf-8")
    data.tofile(raw)
    return header


_AXES = {"x": 0, "y": 1, "z": 2}


def slice_image(v: Volume, axis: str, index: int, window) -> np.ndarray:
    """Grayscale uint8 image of one slice, rows first.

    z-slices have rows along y and columns along x; x- and y-slices have
    rows along z. Values are mapped linearly from ``window`` to 0..255 with
    round-half-up and clipping.
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got ({lo}, {hi})")
    ax = _AXES[axis]
    n = v.dims[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for axis {axis} of length {n}")
    plane = np.take(v.array, index, axis=ax)  # remaining axes in (x, y, z) order
    img = plane.T  # rows follow the later axis
    scaled = np.floor((img - lo) * (255.0 / (hi - lo)) + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + rows * cols], dtype=np.uint8)
    return pixels.reshape(rows, cols)


def export_slice(v: Volume, axis: str, index: int, window, path) -> Path:
    """Write one slice of ``v`` as a binary PGM (P5) image."""
    return write_pgm(slice_image(v, axis, index, window), path)
