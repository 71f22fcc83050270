"""KITTI-format LiDAR frame I/O, range clipping, and PLY export.

A frame on disk is a headerless sequence of little-endian float32
quadruples (x, y, z, reflectance). In memory a cloud is an (N, 4) array
whose row order equals file order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MalformedFrame, NonFiniteValue

#: Bytes per on-disk point record: four little-endian float32 values.
RECORD_BYTES = 16


@dataclass(frozen=True)
class RangeBox:
    """Axis-aligned detection range; every axis is half-open [min, max).

    The half-open rule guarantees that each retained point maps to a
    valid voxel index.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for axis in "xyz":
            lo = getattr(self, f"{axis}_min")
            hi = getattr(self, f"{axis}_max")
            if not lo < hi:
                raise ValueError(f"range {axis}_min={lo} must be < {axis}_max={hi}")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def extent(self) -> np.ndarray:
        return self.maxs - self.mins

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Boolean mask of rows inside the box ([min, max) per axis)."""
        xyz = np.asarray(xyz)
        return np.all((xyz >= self.mins) & (xyz < self.maxs), axis=-1)


#: Default detection range (x forward, y left, z up), in meters.
DEFAULT_RANGE = RangeBox(0.0, 70.4, -40.0, 40.0, -3.0, 1.0)


class PointCloud:
    """Immutable ordered set of (x, y, z, reflectance) points."""

    def __init__(self, points: np.ndarray, frame_id: str = ""):
        arr = np.ascontiguousarray(points, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"expected an (N, 4) array, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
            raise NonFiniteValue(f"point {bad} has a NaN/Inf component")
        arr.setflags(write=False)
        self._points = arr
        self.frame_id = str(frame_id)

    @property
    def points(self) -> np.ndarray:
        """(N, 4) float32 array in original order; read-only."""
        return self._points

    @property
    def xyz(self) -> np.ndarray:
        return self._points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self._points[:, 3]

    def __len__(self) -> int:
        return self._points.shape[0]

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, frame_id={self.frame_id!r})"


def read_kitti_bin(path: str | Path) -> PointCloud:
    """Load a headerless float32 (x, y, z, r) frame.

    Raises FileNotFoundError, MalformedFrame (byte count not a multiple
    of 16), or NonFiniteValue (corrupt floats are an error, not a silent
    drop, so downstream statistics stay trustworthy).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such frame: {path}")
    size = os.path.getsize(path)
    if size % RECORD_BYTES != 0:
        raise MalformedFrame(
            f"{path}: {size} bytes is not a multiple of {RECORD_BYTES}"
        )
    raw = np.fromfile(path, dtype="<f4")
    return PointCloud(raw.reshape(-1, 4), frame_id=path.stem)


def write_kitti_bin(pc: PointCloud, path: str | Path) -> None:
    """Write a cloud in the same headerless float32 layout (round-trips bit-exactly)."""
    np.ascontiguousarray(pc.points, dtype="<f4").tofile(path)


def clip_to_range(pc: PointCloud, box: RangeBox = DEFAULT_RANGE) -> PointCloud:
    """Keep points with min <= coord < max on every axis; order preserved."""
    mask = box.contains(pc.xyz)
    return PointCloud(pc.points[mask], frame_id=pc.frame_id)


def _color_ramp(scalars: np.ndarray) -> np.ndarray:
    """Map scalars to uint8 RGB, magenta (low) to green (high).

    Scalars are min-max normalized; a constant array maps to the high end.
    """
    s = np.asarray(scalars, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    t = np.ones_like(s) if hi <= lo else (s - lo) / (hi - lo)
    rgb = np.empty((len(s), 3), dtype=np.uint8)
    rgb[:, 0] = np.rint(255 * (1.0 - t))
    rgb[:, 1] = np.rint(255 * t)
    rgb[:, 2] = np.rint(255 * (1.0 - t))
    return rgb


def write_ply(obj, path: str | Path, colors: np.ndarray | None = None) -> None:
    """Write positions as ASCII PLY vertices with optional scalar colors.

    ``obj`` may be a PointCloud, anything exposing ``.xyz``, or an (N, 3)
    array. ``colors``, when given, is one scalar per element and is
    rendered through the magenta-to-green ramp documented in the header.
    Without colors every vertex is white.
    """
    xyz = np.asarray(obj.xyz if hasattr(obj, "xyz") else obj, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ValueError(f"expected (N, 3) positions, got shape {xyz.shape}")
    n = xyz.shape[0]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64).ravel()
        if len(colors) != n:
            raise ValueError(f"{len(colors)} colors for {n} vertices")
        rgb = _color_ramp(colors) if n else np.empty((0, 3), np.uint8)
    else:
        rgb = np.full((n, 3), 255, dtype=np.uint8)

    lines = [
        "ply",
        "format ascii 1.0",
        "comment scalar colors use a linear min-max ramp: "
        "magenta (255,0,255) = low, green (0,255,0) = high; white = no scalar",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
        for (x, y, z), (r, g, b) in zip(xyz, rgb):
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {r} {g} {b}\n")
