"""Grid containers for depth and feature maps, plus PFM / PGM file I/O.

All grids are stored row-major, top row first, as read-only float64 arrays.
The PFM bottom-up row order is handled only inside the reader and writer.
A depth value of exactly 0 marks a pixel without a measurement.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    """Invalid grid contents or shape."""


class PfmError(ValueError):
    """Base class for PFM decoding failures."""


class PfmHeaderError(PfmError):
    pass


class PfmTruncatedError(PfmError):
    pass


class NonFiniteError(PfmError):
    pass


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise GridError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DepthGrid:
    """H x W depth map in meters; 0 means unobserved."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values, 2)
        if not np.all(np.isfinite(arr)):
            raise GridError("depth grid contains non-finite values")
        if np.any(arr < 0):
            raise GridError("depth grid contains negative values")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "DepthGrid":
        return cls(np.zeros((height, width)))


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """H x W x C real-valued feature map."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        arr = _frozen(arr, 3)
        if not np.all(np.isfinite(arr)):
            raise GridError("feature grid contains non-finite values")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        return self.values[:, :, channel]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; ``p`` indexes rows and ``q`` columns."""

    f_p: float
    f_q: float
    c_p: float
    c_q: float

    def __post_init__(self):
        if not (self.f_p > 0 and self.f_q > 0):
            raise GridError(f"focal lengths must be positive, got {self.f_p}, {self.f_q}")
        for name in ("f_p", "f_q", "c_p", "c_q"):
            if not np.isfinite(getattr(self, name)):
                raise GridError(f"intrinsic {name} is not finite")


def as_array(grid) -> np.ndarray:
    """Return the underlying array of a grid, or the argument as float64."""
    if isinstance(grid, (DepthGrid, FeatureGrid)):
        return grid.values
    return np.asarray(grid, dtype=np.float64)


def valid_mask(grid) -> np.ndarray:
    return as_array(grid) > 0


_HEADER_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def read_pfm(path) -> FeatureGrid:
    """Read a single-channel ``Pf`` file into a 1-channel FeatureGrid."""
    with open(path, "rb") as f:
        data = f.read()

    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise PfmHeaderError(f"{path}: incomplete PFM header")
    magic, dims, scale_line, payload = lines
    if magic.strip() != b"Pf":
        raise PfmHeaderError(f"{path}: bad magic {magic.strip()!r}, expected b'Pf'")
    m = _HEADER_DIMS.match(dims)
    if not m:
        raise PfmHeaderError(f"{path}: bad dimension line {dims!r}")
    width, height = int(m.group(1)), int(m.group(2))
    try:
        scale = float(scale_line)
    except ValueError:
        raise PfmHeaderError(f"{path}: bad scale line {scale_line!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise PfmHeaderError(f"{path}: invalid scale {scale}")

    n = width * height
    if len(payload) < 4 * n:
        raise PfmTruncatedError(f"{path}: expected {4 * n} payload bytes, found {len(payload)}")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(payload, dtype=dtype, count=n).reshape(height, width)
    if not np.all(np.isfinite(img)):
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    return FeatureGrid(np.flipud(img).astype(np.float64))


def write_pfm(grid, path) -> None:
    """Write a depth grid or 1-channel feature grid as little-endian ``Pf``."""
    arr = as_array(grid)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise GridError(f"PFM writer takes one channel, got {arr.shape[2]}")
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise GridError(f"cannot write array of shape {arr.shape} as PFM")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to write non-finite values to PFM")
    height, width = arr.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(np.flipud(arr), dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def write_pgm16(grid, path, max_depth: float) -> None:
    """Write a 16-bit binary PGM, mapping [0, max_depth] onto [0, 65535]."""
    if not max_depth > 0:
        raise GridError(f"max_depth must be positive, got {max_depth}")
    arr = as_array(grid)
    scaled = np.clip(arr / max_depth, 0.0, 1.0) * 65535.0
    # round half up; np.round would round half to even
    pix = np.floor(scaled + 0.5).astype(">u2")
    height, width = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        f.write(pix.tobytes())


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
