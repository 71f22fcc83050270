import numpy as np
import pytest

from normvox.pointcloud import RangeBox
from normvox.voxels import VoxelConfig, VoxelSet, _flat_keys


def make_voxel_set(positions, cfg: VoxelConfig | None = None,
                   reflectance: float = 0.5, frame_id: str = "test") -> VoxelSet:
    """VoxelSet with one voxel per position; positions must hit distinct cells."""
    cfg = cfg or VoxelConfig()
    pos = np.asarray(positions, dtype=np.float64)
    coords = np.floor((pos - cfg.range.mins) / cfg.sizes).astype(np.int64)
    keys = _flat_keys(coords, cfg.grid_dims)
    assert len(np.unique(keys)) == len(keys), "positions collide in the voxel grid"
    order = np.argsort(keys, kind="stable")
    features = np.column_stack([pos, np.full(len(pos), reflectance)])
    return VoxelSet(
        coords[order], features[order], np.ones(len(pos), dtype=np.int64),
        cfg, frame_id,
    )


@pytest.fixture
def wide_config() -> VoxelConfig:
    """A grid that admits points far outside the default detection range."""
    return VoxelConfig(
        size_x=0.05, size_y=0.05, size_z=0.1,
        range=RangeBox(-80.0, 80.0, -80.0, 80.0, -8.0, 8.0),
        max_voxels=None,
    )


def brute_knn(positions, query, k, exclude_self=False):
    """O(n^2) reference: sort by (squared distance, index), take k."""
    positions = np.asarray(positions, dtype=np.float64)
    d2 = ((positions - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    order = sorted(range(len(positions)), key=lambda i: (d2[i], i))
    if exclude_self:
        order = [i for i in order if d2[i] != 0.0]
    return np.array(order[:k], dtype=np.int64)


def brute_radius_count(positions, query, radius):
    positions = np.asarray(positions, dtype=np.float64)
    d2 = ((positions - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    return int((d2 <= radius * radius).sum())


def brute_ball_counts(positions, radius):
    positions = np.asarray(positions, dtype=np.float64)
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    return (d2 <= radius * radius).sum(axis=1)
