"""Keep/drop mask samplers over a voxel set.

Two primary strategies plus baselines:

* normal-density sampling drops a fixed fraction of the voxels whose
  normal-space density exceeds a threshold (flat, redundant regions);
* radial bin sampling with a growing per-bin quota keeps the areal voxel
  density constant with range while everything beyond the cutoff stays.

Baselines: constant-quota bin sampling, uniform random, and exact greedy
farthest-point selection. All samplers are deterministic given (inputs,
seed); per-bin draws come from independent derived streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch
from .rng import derive_rng
from .voxels import VoxelSet

#: Valid provenance tags for dropped voxels.
DROP_TAGS = ("none", "nd", "fov", "cap", "baseline")

_TAG_DTYPE = "<U8"


@dataclass
class SampleMask:
    """Per-voxel keep decision aligned with a VoxelSet, with drop provenance."""

    keep: np.ndarray       # (M,) bool
    dropped_by: np.ndarray  # (M,) short tag; "none" exactly when kept
    seed: int

    def __post_init__(self):
        self.keep = np.ascontiguousarray(self.keep, dtype=bool)
        self.dropped_by = np.ascontiguousarray(self.dropped_by, dtype=_TAG_DTYPE)
        if self.keep.shape != self.dropped_by.shape:
            raise LengthMismatch(
                f"keep has {self.keep.shape}, dropped_by has {self.dropped_by.shape}"
            )
        unknown = set(np.unique(self.dropped_by)) - set(DROP_TAGS)
        if unknown:
            raise ValueError(f"unknown drop tags: {sorted(unknown)}")
        if not np.array_equal(self.keep, self.dropped_by == "none"):
            raise ValueError("dropped_by must be 'none' exactly for kept voxels")

    def __len__(self) -> int:
        return len(self.keep)

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())

    @property
    def retention(self) -> float:
        return self.n_kept / len(self) if len(self) else 1.0

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    @classmethod
    def all_kept(cls, n: int, seed: int) -> "SampleMask":
        return cls(np.ones(n, bool), np.full(n, "none", _TAG_DTYPE), seed)


def _drop(n: int, dropped: np.ndarray, tag: str, seed: int) -> SampleMask:
    keep = np.ones(n, dtype=bool)
    keep[dropped] = False
    tags = np.full(n, "none", dtype=_TAG_DTYPE)
    tags[dropped] = tag
    return SampleMask(keep, tags, seed)


@dataclass(frozen=True)
class NdConfig:
    """Normal-density sampling: drop ``drop_fraction`` of voxels above the threshold.

    ``mode`` is "random" (uniform choice among candidates) or "rank"
    (densest first, ties by ascending index).
    """

    density_threshold: float = 0.7
    drop_fraction: float = 0.5
    mode: str = "random"

    def __post_init__(self):
        if not 0.0 < self.density_threshold < 1.0:
            raise ValueError("density_threshold must lie in (0, 1)")
        if not 0.0 <= self.drop_fraction <= 1.0:
            raise ValueError("drop_fraction must lie in [0, 1]")
        if self.mode not in ("random", "rank"):
            raise ValueError("mode must be 'random' or 'rank'")


@dataclass(frozen=True)
class FovConfig:
    """Radial bin sampling: bin n (1-based) keeps at most base_quota * (2n - 1).

    Bins cover [(n-1) * bin_width, n * bin_width) in horizontal (BEV)
    range; everything at or beyond ``far_cutoff`` (default
    num_bins * bin_width) is kept unconditionally. ``use_3d_range``
    switches the radial distance to full 3D range.
    """

    num_bins: int = 10
    base_quota: int = 500
    bin_width: float = 3.0
    far_cutoff: float | None = None
    use_3d_range: bool = False

    def __post_init__(self):
        if self.num_bins < 1 or self.base_quota < 1:
            raise ValueError("num_bins and base_quota must be >= 1")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.far_cutoff is not None and self.far_cutoff <= 0:
            raise ValueError("far_cutoff must be positive")

    @property
    def cutoff(self) -> float:
        return self.num_bins * self.bin_width if self.far_cutoff is None else self.far_cutoff

    def quota(self, bin_index: int) -> int:
        """Quota for 0-based bin index: base_quota * (2n - 1) with n = index + 1."""
        return self.base_quota * (2 * (bin_index + 1) - 1)


def radial_distance(vs: VoxelSet, use_3d: bool = False) -> np.ndarray:
    """Horizontal (default) or 3D range of each voxel's mean position."""
    xyz = vs.xyz
    if use_3d:
        return np.sqrt((xyz * xyz).sum(axis=1))
    return np.hypot(xyz[:, 0], xyz[:, 1])


def nd_sample(
    vs: VoxelSet, densities: np.ndarray, cfg: NdConfig, seed: int
) -> SampleMask:
    """Drop floor(drop_fraction * |candidates|) voxels with density above threshold."""
    densities = np.asarray(densities, dtype=np.float64)
    if densities.shape != (len(vs),):
        raise LengthMismatch(
            f"{densities.shape[0]} densities for {len(vs)} voxels"
        )
    candidates = np.flatnonzero(densities > cfg.density_threshold)
    n_drop = math.floor(cfg.drop_fraction * len(candidates))
    if n_drop == 0:
        return SampleMask.all_kept(len(vs), seed)
    if cfg.mode == "rank":
        order = np.lexsort((candidates, -densities[candidates]))
        dropped = candidates[order[:n_drop]]
    else:
        rng = derive_rng(seed, "nd")
        dropped = rng.choice(candidates, size=n_drop, replace=False)
    return _drop(len(vs), dropped, "nd", seed)


def _bin_quota_sample(
    vs: VoxelSet,
    num_bins: int,
    bin_width: float,
    cutoff: float,
    quota_fn,
    use_3d: bool,
    seed: int,
    stream: str,
    tag: str,
) -> SampleMask:
    rho = radial_distance(vs, use_3d)
    near = rho < cutoff
    bins = np.floor(rho / bin_width).astype(np.int64)
    dropped_chunks = []
    for b in np.unique(bins[near]):
        members = np.flatnonzero(near & (bins == b))
        quota = quota_fn(int(b))
        excess = len(members) - quota
        if excess <= 0:
            continue
        rng = derive_rng(seed, stream, int(b))
        kept_local = rng.choice(len(members), size=quota, replace=False)
        drop_local = np.setdiff1d(np.arange(len(members)), kept_local)
        dropped_chunks.append(members[drop_local])
    if not dropped_chunks:
        return SampleMask.all_kept(len(vs), seed)
    return _drop(len(vs), np.concatenate(dropped_chunks), tag, seed)


def fov_bin_sample(vs: VoxelSet, cfg: FovConfig, seed: int) -> SampleMask:
    """Growing-quota radial bin sampler; distant voxels are always kept."""
    return _bin_quota_sample(
        vs, cfg.num_bins, cfg.bin_width, cfg.cutoff, cfg.quota,
        cfg.use_3d_range, seed, "fov", "fov",
    )


def general_bin_sample(
    vs: VoxelSet, num_bins: int, per_bin_quota: int, far_cutoff: float, seed: int
) -> SampleMask:
    """Constant-quota radial bin sampler (baseline)."""
    if num_bins < 1 or per_bin_quota < 1:
        raise ValueError("num_bins and per_bin_quota must be >= 1")
    if far_cutoff <= 0:
        raise ValueError("far_cutoff must be positive")
    bin_width = far_cutoff / num_bins
    return _bin_quota_sample(
        vs, num_bins, bin_width, far_cutoff, lambda b: per_bin_quota,
        False, seed, "bin", "baseline",
    )


def random_sample(vs: VoxelSet, keep_fraction: float, seed: int) -> SampleMask:
    """Uniform random subset of round(keep_fraction * N) voxels (baseline)."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in [0, 1]")
    n = len(vs)
    n_keep = int(round(keep_fraction * n))
    if n_keep >= n:
        return SampleMask.all_kept(n, seed)
    rng = derive_rng(seed, "random")
    kept = rng.choice(n, size=n_keep, replace=False)
    dropped = np.setdiff1d(np.arange(n), kept)
    return _drop(n, dropped, "baseline", seed)


def fps_sample(vs: VoxelSet, keep_count: int, seed: int) -> SampleMask:
    """Exact greedy farthest-point selection from a seeded random start (baseline)."""
    n = len(vs)
    if not 1 <= keep_count <= n:
        raise ValueError(f"keep_count must lie in [1, {n}]")
    if keep_count == n:
        return SampleMask.all_kept(n, seed)
    pos = vs.xyz
    rng = derive_rng(seed, "fps")
    selected = np.empty(keep_count, dtype=np.int64)
    selected[0] = rng.integers(n)
    min_d2 = ((pos - pos[selected[0]]) ** 2).sum(axis=1)
    for i in range(1, keep_count):
        # Ties on the max-min distance resolve to the lowest index (argmax).
        selected[i] = np.argmax(min_d2)
        d2 = ((pos - pos[selected[i]]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    dropped = np.setdiff1d(np.arange(n), selected)
    return _drop(n, dropped, "baseline", seed)


def expand_mask(mask: SampleMask, parent_indices: np.ndarray, total: int) -> SampleMask:
    """Lift a mask computed on a survivor subset back to full-length indexing.

    ``parent_indices`` maps subset rows to parent rows; parent rows not in
    the subset stay kept with tag "none" (an earlier stage owns them).
    """
    parent_indices = np.asarray(parent_indices, dtype=np.int64)
    if parent_indices.shape != (len(mask),):
        raise LengthMismatch(
            f"{len(parent_indices)} parent indices for mask of {len(mask)}"
        )
    keep = np.ones(total, dtype=bool)
    tags = np.full(total, "none", dtype=_TAG_DTYPE)
    keep[parent_indices] = mask.keep
    tags[parent_indices] = mask.dropped_by
    return SampleMask(keep, tags, mask.seed)


def compose(masks: list[SampleMask]) -> SampleMask:
    """Conjunction of same-length masks; provenance goes to the first dropper."""
    if not masks:
        raise ValueError("need at least one mask")
    n = len(masks[0])
    for m in masks[1:]:
        if len(m) != n:
            raise LengthMismatch(f"mask lengths differ: {len(m)} != {n}")
    keep = np.ones(n, dtype=bool)
    tags = np.full(n, "none", dtype=_TAG_DTYPE)
    for m in masks:
        newly = keep & ~m.keep
        tags[newly] = m.dropped_by[newly]
        keep &= m.keep
    return SampleMask(keep, tags, masks[0].seed)


@dataclass(frozen=True)
class BinStatistics:
    """Per-bin voxel counts and areal densities, plus a far-field bucket."""

    bin_width: float
    counts: np.ndarray     # (num_bins,) voxels per near bin
    areas: np.ndarray      # (num_bins,) annulus areas
    densities: np.ndarray  # counts / areas
    far_count: int
    total: int

    @property
    def num_bins(self) -> int:
        return len(self.counts)

    def rows(self) -> list[tuple]:
        """CSV-friendly rows: (bin, lo, hi, count, area, density)."""
        out = []
        for i in range(self.num_bins):
            out.append((
                i + 1, i * self.bin_width, (i + 1) * self.bin_width,
                int(self.counts[i]), float(self.areas[i]), float(self.densities[i]),
            ))
        out.append(("far", self.num_bins * self.bin_width, "", self.far_count, "", ""))
        return out


def bin_statistics(
    vs: VoxelSet, mask: SampleMask | None, cfg: FovConfig
) -> BinStatistics:
    """Count kept voxels per radial bin and divide by the annulus area."""
    rho = radial_distance(vs, cfg.use_3d_range)
    if mask is not None:
        if len(mask) != len(vs):
            raise LengthMismatch(f"mask of {len(mask)} for {len(vs)} voxels")
        rho = rho[mask.keep]
    # Anything past the binned extent counts as far field here, even when a
    # custom cutoff extends the sampler's quota rule beyond num_bins.
    near = rho < min(cfg.cutoff, cfg.num_bins * cfg.bin_width)
    bins = np.floor(rho[near] / cfg.bin_width).astype(np.int64)
    counts = np.bincount(bins, minlength=cfg.num_bins)[: cfg.num_bins]
    edges = np.arange(cfg.num_bins + 1) * cfg.bin_width
    areas = np.pi * edges[1:] ** 2 - np.pi * edges[:-1] ** 2
    return BinStatistics(
        bin_width=cfg.bin_width,
        counts=counts,
        areas=areas,
        densities=counts / areas,
        far_count=int((~near).sum()),
        total=len(rho),
    )
