"""Sparse voxelization with mean-aggregated features.

Each occupied grid cell becomes one voxel whose feature is the arithmetic
mean of its member points' (x, y, z, r). Voxels are kept sparse (only
occupied cells exist) and sorted lexicographically by grid coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PointOutOfRange
from .pointcloud import DEFAULT_RANGE, PointCloud, RangeBox
from .rng import derive_rng

#: Relative slack when checking that the range extent is a whole number of cells.
_GRID_TOL = 1e-9


@dataclass(frozen=True)
class VoxelConfig:
    """Grid geometry: cell sizes, spatial range, and optional voxel cap."""

    size_x: float = 0.05
    size_y: float = 0.05
    size_z: float = 0.1
    range: RangeBox = field(default_factory=lambda: DEFAULT_RANGE)
    max_voxels: int | None = 16000

    def __post_init__(self):
        sizes = (self.size_x, self.size_y, self.size_z)
        if any(s <= 0 for s in sizes):
            raise ValueError(f"voxel sizes must be positive, got {sizes}")
        if self.max_voxels is not None and self.max_voxels <= 0:
            raise ValueError("max_voxels must be positive or None")
        for extent, size, axis in zip(self.range.extent, sizes, "xyz"):
            cells = extent / size
            if abs(cells - round(cells)) > _GRID_TOL * max(1.0, cells):
                raise ValueError(
                    f"range extent {extent} on {axis} is not a whole number "
                    f"of {size} cells"
                )

    @property
    def sizes(self) -> np.ndarray:
        return np.array([self.size_x, self.size_y, self.size_z])

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        dims = np.rint(self.range.extent / self.sizes).astype(np.int64)
        return int(dims[0]), int(dims[1]), int(dims[2])


class VoxelSet:
    """Sparse voxel grid: unique (gx, gy, gz) cells sorted lexicographically.

    ``features`` holds the per-voxel mean (x, y, z, r) in float64;
    ``counts`` the number of member points (always >= 1).
    """

    def __init__(
        self,
        coords: np.ndarray,
        features: np.ndarray,
        counts: np.ndarray,
        config: VoxelConfig,
        frame_id: str = "",
    ):
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        features = np.ascontiguousarray(features, dtype=np.float64)
        counts = np.ascontiguousarray(counts, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (M, 3), got {coords.shape}")
        if features.shape != (coords.shape[0], 4):
            raise ValueError(f"features must be (M, 4), got {features.shape}")
        if counts.shape != (coords.shape[0],):
            raise ValueError(f"counts must be (M,), got {counts.shape}")
        if len(counts) and counts.min() < 1:
            raise ValueError("every voxel needs at least one member point")
        keys = _flat_keys(coords, config.grid_dims)
        if len(keys) > 1 and not np.all(np.diff(keys) > 0):
            raise ValueError("voxels must be sorted by (gx, gy, gz) and unique")
        for a in (coords, features, counts):
            a.setflags(write=False)
        self.coords = coords
        self.features = features
        self.counts = counts
        self.config = config
        self.frame_id = str(frame_id)

    @property
    def xyz(self) -> np.ndarray:
        """Per-voxel mean positions, (M, 3)."""
        return self.features[:, :3]

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __repr__(self) -> str:
        return f"VoxelSet(n={len(self)}, frame_id={self.frame_id!r})"

    def subset(self, indices: np.ndarray) -> "VoxelSet":
        """New VoxelSet from ascending row indices (keeps the sort order)."""
        idx = np.asarray(indices, dtype=np.int64)
        if len(idx) > 1 and not np.all(np.diff(idx) > 0):
            idx = np.unique(idx)
        return VoxelSet(
            self.coords[idx], self.features[idx], self.counts[idx],
            self.config, self.frame_id,
        )


def _flat_keys(coords: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Lexicographic (gx, gy, gz) order as a single int64 key."""
    _, dy, dz = dims
    return (coords[:, 0] * dy + coords[:, 1]) * dz + coords[:, 2]


def voxelize(pc: PointCloud, cfg: VoxelConfig) -> VoxelSet:
    """Group points into grid cells and average their features.

    The cloud must already be clipped to ``cfg.range``; an out-of-range
    point raises PointOutOfRange rather than being dropped silently.
    The result is independent of the input point order (members of each
    cell are summed in a canonical order).
    """
    pts = pc.points.astype(np.float64)
    if len(pts) == 0:
        return VoxelSet(
            np.empty((0, 3), np.int64), np.empty((0, 4)), np.empty(0, np.int64),
            cfg, pc.frame_id,
        )

    dims = np.array(cfg.grid_dims, dtype=np.int64)
    idx = np.floor((pts[:, :3] - cfg.range.mins) / cfg.sizes).astype(np.int64)
    bad = np.flatnonzero(np.any((idx < 0) | (idx >= dims), axis=1))
    if len(bad):
        raise PointOutOfRange(int(bad[0]))

    keys = _flat_keys(idx, cfg.grid_dims)
    # Canonical member order inside each cell makes the float sums, and
    # therefore the means, permutation-invariant bit for bit.
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], keys))
    keys = keys[order]
    pts = pts[order]
    idx = idx[order]

    starts = np.flatnonzero(np.r_[True, np.diff(keys) > 0])
    counts = np.diff(np.r_[starts, len(keys)])
    sums = np.add.reduceat(pts, starts, axis=0)
    features = sums / counts[:, None]
    return VoxelSet(idx[starts], features, counts, cfg, pc.frame_id)


def cap_voxels(vs: VoxelSet, max_voxels: int, seed: int) -> VoxelSet:
    """Uniform random subset of at most ``max_voxels`` voxels, re-sorted."""
    if max_voxels <= 0:
        raise ValueError("max_voxels must be positive")
    if len(vs) <= max_voxels:
        return vs
    rng = derive_rng(seed, "cap")
    keep = np.sort(rng.choice(len(vs), size=max_voxels, replace=False))
    return vs.subset(keep)


def write_voxels_csv(vs: VoxelSet, path: str | Path) -> None:
    """Dump voxels as ``gx,gy,gz,x,y,z,r,count`` rows."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gx", "gy", "gz", "x", "y", "z", "r", "count"])
        for (gx, gy, gz), (x, y, z, r), c in zip(vs.coords, vs.features, vs.counts):
            writer.writerow(
                [gx, gy, gz, repr(float(x)), repr(float(y)), repr(float(z)),
                 repr(float(r)), c]
            )
