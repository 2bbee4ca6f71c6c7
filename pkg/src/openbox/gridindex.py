"""Uniform hash-grid index for fixed-radius neighbor queries.

One structure backs the cluster-to-instance inclusion test, surface voting,
and per-frame persistence counts. Cell size equals the query radius so a
query only ever touches the 27 cells around the query point. All distance
comparisons are strictly less-than; callers relying on boundary behaviour
get the same answer a brute-force scan would give.
"""

from __future__ import annotations

import numpy as np


class GridIndex:
    """Hash grid over an (N, 3) point set for radius queries at a fixed scale."""

    def __init__(self, points: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell_size = float(cell_size)
        self._cells: dict[tuple[int, int, int], np.ndarray] = {}
        if len(self.points):
            keys = np.floor(self.points / self.cell_size).astype(np.int64)
            order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
            sorted_keys = keys[order]
            boundaries = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
            starts = np.concatenate(([0], boundaries))
            ends = np.concatenate((boundaries, [len(order)]))
            for s, e in zip(starts, ends):
                self._cells[tuple(sorted_keys[s])] = order[s:e]

    def __len__(self) -> int:
        return len(self.points)

    def _candidate_indices(self, query: np.ndarray) -> np.ndarray:
        base = np.floor(query / self.cell_size).astype(np.int64)
        chunks = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    hit = self._cells.get((base[0] + dx, base[1] + dy, base[2] + dz))
                    if hit is not None:
                        chunks.append(hit)
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)

    def query_indices(self, query: np.ndarray, radius: float) -> np.ndarray:
        """Indices of stored points strictly within radius of the query point."""
        if radius > self.cell_size + 1e-12:
            raise ValueError("query radius exceeds the grid cell size")
        query = np.asarray(query, dtype=np.float64).reshape(3)
        cand = self._candidate_indices(query)
        if not len(cand):
            return cand
        d2 = np.sum((self.points[cand] - query) ** 2, axis=1)
        hits = cand[d2 < radius * radius]
        hits.sort()
        return hits

    def query_count(self, query: np.ndarray, radius: float) -> int:
        return int(len(self.query_indices(query, radius)))

    def count_batch(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Neighbor counts for a batch of query points."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        return np.fromiter(
            (self.query_count(q, radius) for q in queries), dtype=np.int64, count=len(queries)
        )

    def any_within(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Boolean mask: does each query have at least one stored point strictly within radius."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out = np.zeros(len(queries), dtype=bool)
        r2 = radius * radius
        for i, q in enumerate(queries):
            cand = self._candidate_indices(q)
            if len(cand):
                d2 = np.sum((self.points[cand] - q) ** 2, axis=1)
                out[i] = bool((d2 < r2).any())
        return out
