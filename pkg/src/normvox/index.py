"""Exact k-nearest-neighbor and fixed-radius queries over 3D point sets.

A kd-tree (scipy) generates candidates; squared distances are then
recomputed in plain numpy and candidates re-sorted by (distance, index),
so results are exact, match a brute-force oracle, and break distance
ties deterministically by ascending index. Radius counts use a closed
ball (distance <= radius).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, InsufficientNeighbors, NonFiniteInput


class IndexedPoints:
    """Immutable query index over a fixed (N, 3) position array."""

    def __init__(self, positions: np.ndarray):
        pos = np.ascontiguousarray(positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if pos.shape[0] == 0:
            raise EmptyInput("cannot index zero positions")
        if not np.all(np.isfinite(pos)):
            raise NonFiniteInput("positions contain NaN/Inf")
        pos.setflags(write=False)
        self.positions = pos
        self._tree = cKDTree(pos)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def knn(self, query, k: int, exclude_self: bool = False,
            return_distances: bool = False):
        """Indices of the k nearest positions, nearest first.

        Ties are broken by ascending index. With ``exclude_self`` every
        candidate at distance exactly zero from the query is skipped.
        """
        q = np.asarray(query, dtype=np.float64).reshape(1, 3)
        idx, d2 = self._knn_batch(q, k, exclude_self)
        if return_distances:
            return idx[0], np.sqrt(d2[0])
        return idx[0]

    def knn_batch(self, queries: np.ndarray, k: int, exclude_self: bool = False,
                  return_distances: bool = False):
        """Vectorized ``knn`` over (M, 3) queries; returns (M, k) indices."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise ValueError(f"queries must be (M, 3), got {q.shape}")
        idx, d2 = self._knn_batch(q, k, exclude_self)
        if return_distances:
            return idx, np.sqrt(d2)
        return idx

    def _knn_batch(self, q: np.ndarray, k: int, exclude_self: bool):
        n = len(self)
        if k < 1:
            raise ValueError("k must be >= 1")
        if not np.all(np.isfinite(q)):
            raise NonFiniteInput("query contains NaN/Inf")
        hard_cap = n - 1 if exclude_self else n
        if k > hard_cap:
            raise InsufficientNeighbors(k, hard_cap)

        m = q.shape[0]
        out_idx = np.empty((m, k), dtype=np.int64)
        out_d2 = np.empty((m, k), dtype=np.float64)
        pending = np.arange(m)
        fetch = min(n, k + (8 if exclude_self else 4))
        while len(pending):
            idx_s, d2_s, n_zeros, boundary = self._candidates(
                q[pending], fetch, exclude_self
            )
            if fetch == n:
                short = ~np.isfinite(d2_s[:, k - 1])
                if short.any():
                    row = int(np.argmax(short))
                    raise InsufficientNeighbors(k, int(n - n_zeros[row]))
                complete = np.ones(len(pending), dtype=bool)
            else:
                # Settled once the k-th distance lies strictly inside the
                # fetched ball: every tie at that distance is then already
                # among the candidates (the tree may drop ties only at the
                # boundary itself).
                complete = d2_s[:, k - 1] < boundary
            rows = pending[complete]
            out_idx[rows] = idx_s[complete, :k]
            out_d2[rows] = d2_s[complete, :k]
            pending = pending[~complete]
            fetch = min(n, fetch * 2 + 8)
        return out_idx, out_d2

    def _candidates(self, q: np.ndarray, fetch: int, exclude_self: bool):
        """The ``fetch`` nearest candidates per row, sorted by (d^2, index)."""
        _, raw_idx = self._tree.query(q, k=fetch)
        raw_idx = raw_idx.reshape(len(q), fetch)
        diffs = self.positions[raw_idx] - q[:, None, :]
        d2 = (diffs * diffs).sum(axis=-1)
        boundary = d2.max(axis=1)
        if exclude_self:
            self_mask = d2 == 0.0
            n_zeros = self_mask.sum(axis=1)
            d2 = np.where(self_mask, np.inf, d2)
        else:
            n_zeros = np.zeros(len(q), dtype=np.int64)
        # Stable two-key sort: ascending index first, then distance, so
        # equal distances keep ascending-index order.
        by_index = np.argsort(raw_idx, axis=1, kind="stable")
        idx_s = np.take_along_axis(raw_idx, by_index, axis=1)
        d2_s = np.take_along_axis(d2, by_index, axis=1)
        by_dist = np.argsort(d2_s, axis=1, kind="stable")
        return (
            np.take_along_axis(idx_s, by_dist, axis=1),
            np.take_along_axis(d2_s, by_dist, axis=1),
            n_zeros,
            boundary,
        )

    def count_within_radius(self, query, radius: float) -> int:
        """Number of indexed positions with distance <= radius (closed ball)."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(q)):
            raise NonFiniteInput("query contains NaN/Inf")
        return int(self._tree.query_ball_point(q, r=radius, return_length=True))

    def count_within_radius_batch(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Vectorized closed-ball counts for (M, 3) queries."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if not np.all(np.isfinite(q)):
            raise NonFiniteInput("queries contain NaN/Inf")
        counts = self._tree.query_ball_point(q, r=radius, return_length=True)
        return np.asarray(counts, dtype=np.int64)

    def count_all_pairs_within_radius(self, radius: float) -> np.ndarray:
        """Closed-ball count of every indexed point against the whole set.

        Same result as ``count_within_radius_batch(positions, radius)``
        (each point counts itself), computed with a dual-tree sweep that
        stays fast when the points form tight clusters, as oriented
        normals on the unit sphere do.
        """
        if radius <= 0:
            raise ValueError("radius must be positive")
        return ball_counts_all_pairs(self.positions, radius)


def build(positions: np.ndarray) -> IndexedPoints:
    """Build an immutable exact-query index over the given positions."""
    return IndexedPoints(positions)


_LEAF_SIZE = 16
#: Relative margin around r^2 inside which node pairs are checked point by
#: point; far wider than float rounding, so bound-based shortcuts can never
#: disagree with the explicit distance test.
_BOUND_MARGIN = 1e-9


class _MedianTree:
    """Median-split bounding-box tree in flat arrays, parents before children."""

    def __init__(self, pts: np.ndarray):
        n = len(pts)
        self.perm = np.arange(n)
        lo, hi, start, end, left, right = [], [], [], [], [], []

        stack = [(0, n, -1, False)]  # (start, end, parent, is_right)
        while stack:
            s, e, parent, is_right = stack.pop()
            idx = len(lo)
            if parent >= 0:
                (right if is_right else left)[parent] = idx
            sub = self.perm[s:e]
            p = pts[sub]
            lo.append(p.min(axis=0))
            hi.append(p.max(axis=0))
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            if e - s > _LEAF_SIZE:
                axis = int(np.argmax(hi[idx] - lo[idx]))
                mid = (e - s) // 2
                part = np.argpartition(p[:, axis], mid)
                self.perm[s:e] = sub[part]
                # push right first so the left child is built first
                stack.append((s + mid, e, idx, True))
                stack.append((s, s + mid, idx, False))
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.start = np.array(start)
        self.end = np.array(end)
        self.left = np.array(left)
        self.right = np.array(right)
        self.sizes = self.end - self.start
        self.ext2 = ((self.hi - self.lo) ** 2).sum(axis=1)
        self.spts = pts[self.perm]


def _explicit_leaf_counts(tree: _MedianTree, ea: np.ndarray, eb: np.ndarray,
                          r2: float, counts_sorted: np.ndarray) -> None:
    """Exact per-point checks for boundary leaf pairs, chunk-vectorized.

    Rows with ``ea == eb`` are leaf self-pairs and only accumulate row
    sums; distinct pairs also accumulate column sums for the other side.
    """
    width = int(tree.sizes[np.concatenate([ea, eb])].max())
    cols = np.arange(width)
    chunk = max(1, 30_000_000 // max(1, width * width * 3))
    for c0 in range(0, len(ea), chunk):
        a = ea[c0 : c0 + chunk]
        b = eb[c0 : c0 + chunk]
        ia = tree.start[a, None] + cols[None, :]
        ib = tree.start[b, None] + cols[None, :]
        mask_a = cols[None, :] < tree.sizes[a, None]
        mask_b = cols[None, :] < tree.sizes[b, None]
        pa = tree.spts[np.minimum(ia, tree.end[a, None] - 1)]
        pb = np.where(
            mask_b[:, :, None],
            tree.spts[np.minimum(ib, tree.end[b, None] - 1)],
            np.inf,
        )
        diff = pa[:, :, None, :] - pb[:, None, :, :]
        inside = (diff * diff).sum(axis=-1) <= r2
        counts_sorted += np.bincount(
            ia[mask_a], weights=inside.sum(axis=2)[mask_a], minlength=len(counts_sorted)
        ).astype(np.int64)
        distinct = a != b
        if distinct.any():
            row = np.where(mask_a[:, :, None] & distinct[:, None, None], inside, False)
            counts_sorted += np.bincount(
                ib[mask_b], weights=row.sum(axis=1)[mask_b], minlength=len(counts_sorted)
            ).astype(np.int64)


def ball_counts_all_pairs(positions: np.ndarray, radius: float) -> np.ndarray:
    """For every point, how many points (itself included) lie within ``radius``.

    Exact closed-ball semantics identical to a brute-force
    ``sum((a - b)**2) <= radius**2`` sweep. A dual-tree self-join counts
    (or skips) whole node pairs whose bounding boxes are decisively
    inside (or outside) the radius; only pairs straddling the boundary
    are checked point by point with the brute-force expression itself.
    """
    pts = np.ascontiguousarray(positions, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    tree = _MedianTree(pts)
    n_nodes = len(tree.start)
    r2 = radius * radius
    auto_hi = r2 * (1.0 - _BOUND_MARGIN)
    skip_lo = r2 * (1.0 + _BOUND_MARGIN)

    node_counter = np.zeros(n_nodes, dtype=np.int64)
    counts_sorted = np.zeros(n, dtype=np.int64)
    lo, hi = tree.lo, tree.hi
    left, right, sizes = tree.left, tree.right, tree.sizes

    self_q = np.array([0])
    cross_a = np.empty(0, dtype=np.int64)
    cross_b = np.empty(0, dtype=np.int64)
    explicit_a: list[np.ndarray] = []
    explicit_b: list[np.ndarray] = []

    while len(self_q) or len(cross_a):
        # Self pairs {A, A}: auto when the box diagonal fits in the radius.
        if len(self_q):
            s = self_q
            auto = tree.ext2[s] <= auto_hi
            node_counter += np.bincount(
                s[auto], weights=sizes[s[auto]], minlength=n_nodes
            ).astype(np.int64)
            s = s[~auto]
            is_leaf = left[s] < 0
            if is_leaf.any():
                explicit_a.append(s[is_leaf])
                explicit_b.append(s[is_leaf])
            s = s[~is_leaf]
            self_q = np.concatenate([left[s], right[s]])
            new_ca, new_cb = left[s], right[s]
        else:
            new_ca = new_cb = np.empty(0, dtype=np.int64)

        # Cross pairs {A, B}, always disjoint subtrees.
        if len(cross_a):
            a, b = cross_a, cross_b
            dhi = np.maximum(hi[a] - lo[b], hi[b] - lo[a])
            maxd2 = (dhi * dhi).sum(axis=1)
            dlo = np.maximum(0.0, np.maximum(lo[b] - hi[a], lo[a] - hi[b]))
            mind2 = (dlo * dlo).sum(axis=1)
            auto = maxd2 <= auto_hi
            if auto.any():
                aa, bb = a[auto], b[auto]
                node_counter += np.bincount(
                    aa, weights=sizes[bb], minlength=n_nodes
                ).astype(np.int64)
                node_counter += np.bincount(
                    bb, weights=sizes[aa], minlength=n_nodes
                ).astype(np.int64)
            rest = ~(auto | (mind2 > skip_lo))
            a, b = a[rest], b[rest]
            a_leaf = left[a] < 0
            b_leaf = left[b] < 0
            both = a_leaf & b_leaf
            if both.any():
                explicit_a.append(a[both])
                explicit_b.append(b[both])
            a, b = a[~both], b[~both]
            a_leaf, b_leaf = a_leaf[~both], b_leaf[~both]
            split_a = np.where(
                b_leaf, True, np.where(a_leaf, False, tree.ext2[a] >= tree.ext2[b])
            )
            sa = np.flatnonzero(split_a)
            sb = np.flatnonzero(~split_a)
            cross_a = np.concatenate(
                [new_ca, left[a[sa]], right[a[sa]], a[sb], a[sb]]
            )
            cross_b = np.concatenate(
                [new_cb, b[sa], b[sa], left[b[sb]], right[b[sb]]]
            )
        else:
            cross_a, cross_b = new_ca, new_cb

    if explicit_a:
        _explicit_leaf_counts(
            tree, np.concatenate(explicit_a), np.concatenate(explicit_b),
            r2, counts_sorted,
        )

    for i in range(n_nodes):
        if left[i] >= 0:
            node_counter[left[i]] += node_counter[i]
            node_counter[right[i]] += node_counter[i]
        else:
            counts_sorted[tree.start[i] : tree.end[i]] += node_counter[i]

    out = np.empty(n, dtype=np.int64)
    out[tree.perm] = counts_sorted
    return out
