"""Per-voxel surface normals via neighborhood PCA, plus normal-space density.

Each voxel's neighborhood is its own centroid together with the k nearest
other voxel centroids. The normal is the eigenvector of the centered
covariance with the smallest eigenvalue, oriented by a configurable
policy. Density is the closed-ball neighbor count of each oriented normal
on the unit sphere, normalized by the per-frame maximum count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateNeighborhood, InsufficientNeighbors
from .index import IndexedPoints
from .pointcloud import write_ply
from .voxels import VoxelSet

ORIENTATION_POLICIES = ("toward_sensor", "plus_z_hemisphere")

#: Jacobi sweep convergence threshold, relative to the matrix magnitude.
_JACOBI_TOL = 1e-12
_MAX_SWEEPS = 30

#: Eigenvalue gap (relative to the largest eigenvalue) below which the two
#: smallest eigenvalues are treated as tied and the lexicographic rule kicks in.
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class NormalConfig:
    k: int = 7
    density_radius: float = 0.25
    orientation: str = "toward_sensor"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2 (PCA needs at least 3 points)")
        if self.density_radius <= 0:
            raise ValueError("density_radius must be positive")
        if self.orientation not in ORIENTATION_POLICIES:
            raise ValueError(
                f"unknown orientation {self.orientation!r}; "
                f"choose from {ORIENTATION_POLICIES}"
            )


@dataclass(frozen=True)
class NormalFeatures:
    """Per-voxel unit normals and normalized densities, aligned with the VoxelSet."""

    normals: np.ndarray   # (M, 3) float64, unit rows
    densities: np.ndarray  # (M,) float64 in (0, 1]
    ball_counts: np.ndarray  # (M,) int64 raw closed-ball counts
    k: int
    density_radius: float
    orientation: str

    def __post_init__(self):
        for a in (self.normals, self.densities, self.ball_counts):
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.normals.shape[0]


def symmetric_eigh_3x3(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a batch of symmetric 3x3 matrices via Jacobi sweeps.

    Returns eigenvalues ascending, shape (..., 3), and the matching unit
    eigenvectors as columns of a (..., 3, 3) array.
    """
    a = np.array(mats, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    if a.ndim != 3 or a.shape[1:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got {mats.shape}")

    b = a.shape[0]
    v = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()
    scale = np.maximum(np.sqrt((a * a).sum(axis=(1, 2))), 1e-300)

    for _ in range(_MAX_SWEEPS):
        off = np.sqrt(
            a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        )
        if np.all(off <= _JACOBI_TOL * scale):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            nz = apq != 0.0
            denom = np.where(nz, 2.0 * apq, 1.0)
            theta = np.where(nz, (a[:, q, q] - a[:, p, p]) / denom, 0.0)
            big = np.abs(theta) > 1e10
            theta_s = np.where(big, 1.0, theta)  # keeps theta^2 from overflowing
            t = np.where(
                big,
                0.5 / np.where(theta == 0.0, 1.0, theta),
                np.sign(theta_s) / (np.abs(theta_s) + np.sqrt(theta_s * theta_s + 1.0)),
            )
            t = np.where(nz, t, 0.0)
            # theta == 0 with apq != 0 means a 45-degree rotation (t = 1).
            t = np.where(nz & (theta == 0.0), 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            j = np.broadcast_to(np.eye(3), (b, 3, 3)).copy()
            j[:, p, p] = c
            j[:, q, q] = c
            j[:, p, q] = s
            j[:, q, p] = -s
            a = np.matmul(np.matmul(j.transpose(0, 2, 1), a), j)
            v = np.matmul(v, j)

    w = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    if squeeze:
        return w[0], v[0]
    return w, v


def estimate_normal(neighborhood: np.ndarray) -> np.ndarray:
    """Least-variance principal axis of >= 3 points; sign is unspecified."""
    pts = np.asarray(neighborhood, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (m, 3) points, got {pts.shape}")
    if pts.shape[0] < 3:
        raise ValueError("neighborhood needs at least 3 points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    if np.trace(cov) <= 1e-18:
        raise DegenerateNeighborhood("all neighborhood points coincide")
    _, vecs = symmetric_eigh_3x3(cov)
    n = vecs[:, 0]
    return n / np.linalg.norm(n)


def orient_normal(n: np.ndarray, p: np.ndarray | None, policy: str) -> np.ndarray:
    """Deterministic sign choice for a single unit normal."""
    out = orient_normals(
        np.asarray(n, dtype=np.float64).reshape(1, 3),
        None if p is None else np.asarray(p, dtype=np.float64).reshape(1, 3),
        policy,
    )
    return out[0]


def orient_normals(
    normals: np.ndarray, positions: np.ndarray | None, policy: str
) -> np.ndarray:
    """Vectorized orientation of (M, 3) unit normals.

    ``toward_sensor`` keeps n when n . (origin - p) >= 0; it needs the
    voxel positions. ``plus_z_hemisphere`` keeps the representative with
    nz > 0, falling back to nx then ny when earlier components are zero.
    """
    n = np.array(normals, dtype=np.float64)
    if policy == "toward_sensor":
        if positions is None:
            raise ValueError("toward_sensor orientation needs voxel positions")
        dots = -(n * np.asarray(positions, dtype=np.float64)).sum(axis=1)
        flip = dots < 0
    elif policy == "plus_z_hemisphere":
        nz, nx, ny = n[:, 2], n[:, 0], n[:, 1]
        flip = (nz < 0) | ((nz == 0) & ((nx < 0) | ((nx == 0) & (ny < 0))))
    else:
        raise ValueError(f"unknown orientation policy {policy!r}")
    n[flip] *= -1.0
    return n


def _resolve_eigen_ties(
    w: np.ndarray, v: np.ndarray, positions: np.ndarray, policy: str
) -> np.ndarray:
    """Pick the lexicographically largest oriented eigenvector among ties."""
    normals = v[:, :, 0].copy()
    gap_scale = np.maximum(w[:, 2], 1e-30)
    tied = (w[:, 1] - w[:, 0]) <= _TIE_TOL * gap_scale
    for row in np.flatnonzero(tied):
        cutoff = w[row, 0] + _TIE_TOL * gap_scale[row]
        candidates = [v[row, :, j] for j in range(3) if w[row, j] <= cutoff]
        pos = positions[row : row + 1]
        oriented = [orient_normals(c.reshape(1, 3), pos, policy)[0] for c in candidates]
        normals[row] = max(oriented, key=tuple)
    return normals


def extract_normals(vs: VoxelSet, cfg: NormalConfig = NormalConfig()) -> NormalFeatures:
    """Normals and normalized densities for every voxel, in VoxelSet order."""
    m = len(vs)
    if m <= cfg.k:
        raise InsufficientNeighbors(cfg.k, max(m - 1, 0))

    positions = vs.xyz.astype(np.float64)
    idx = IndexedPoints(positions)
    nbrs = idx.knn_batch(positions, cfg.k, exclude_self=True)

    neigh = np.concatenate([positions[:, None, :], positions[nbrs]], axis=1)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.matmul(centered.transpose(0, 2, 1), centered) / neigh.shape[1]

    w, v = symmetric_eigh_3x3(cov)
    raw = _resolve_eigen_ties(w, v, positions, cfg.orientation)
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    normals = orient_normals(raw, positions, cfg.orientation)

    sphere = IndexedPoints(normals)
    counts = sphere.count_all_pairs_within_radius(cfg.density_radius)
    densities = counts / counts.max()

    return NormalFeatures(
        normals=normals,
        densities=densities,
        ball_counts=counts,
        k=cfg.k,
        density_radius=cfg.density_radius,
        orientation=cfg.orientation,
    )


def density_histogram(densities: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts of density values per equal-width bin over [0, 1]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, edges = np.histogram(
        np.asarray(densities, dtype=np.float64), bins=bins, range=(0.0, 1.0)
    )
    return counts, edges


def write_normals_csv(vs: VoxelSet, feats: NormalFeatures, path: str | Path) -> None:
    """Dump per-voxel normals as ``gx,gy,gz,nx,ny,nz,density`` rows."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gx", "gy", "gz", "nx", "ny", "nz", "density"])
        for (gx, gy, gz), (nx, ny, nz), d in zip(
            vs.coords, feats.normals, feats.densities
        ):
            writer.writerow(
                [gx, gy, gz, repr(float(nx)), repr(float(ny)), repr(float(nz)),
                 repr(float(d))]
            )


def write_normal_sphere_ply(feats: NormalFeatures, path: str | Path) -> None:
    """Normals as unit-sphere points colored by density."""
    write_ply(feats.normals, path, colors=feats.densities)
