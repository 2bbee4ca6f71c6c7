"""Slow reference implementations the fast library code is checked against.

Everything here is deliberately naive: full distance matrices, rejection
sampling, dense rasterization. None of it touches the package's spatial
index or vectorized kernels, so a shared bug would have to be written twice
to go unnoticed.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


# ---------------------------------------------------------------------------
# Density clustering on a full distance matrix


def brute_cluster_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Textbook density clustering, O(n^2) neighbor queries.

    Scan order is the lexicographic point order and expansion is
    breadth-first, matching the library's canonical order so border-point
    assignment is comparable. Returns labels aligned with the input order,
    -1 for noise.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels_sorted = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels_sorted
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    spts = pts[order]
    diff = spts[:, None, :] - spts[None, :, :]
    adj = np.einsum("ijk,ijk->ij", diff, diff) <= eps * eps

    def neighbors(i: int) -> list[int]:
        return [int(j) for j in np.nonzero(adj[i])[0]]

    visited = np.zeros(n, dtype=bool)
    next_label = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        seed = neighbors(i)
        if len(seed) < min_pts:
            continue
        cid = next_label
        next_label += 1
        labels_sorted[i] = cid
        queue = deque(j for j in seed if j != i)
        enqueued = set(seed)
        while queue:
            j = queue.popleft()
            if labels_sorted[j] == -1:
                labels_sorted[j] = cid
            if visited[j]:
                continue
            visited[j] = True
            reach = neighbors(j)
            if len(reach) >= min_pts:
                for k in reach:
                    if k not in enqueued:
                        enqueued.add(k)
                        queue.append(k)

    labels = np.empty(n, dtype=np.int64)
    labels[order] = labels_sorted
    return labels


# ---------------------------------------------------------------------------
# Cluster-to-instance vote on full distance matrices


def brute_refine_assignment(
    cluster_points: list[np.ndarray],
    instances: list[tuple[int, np.ndarray]],
    alpha: float,
    beta: float,
    delta: float,
    symmetric_inclusion: bool = False,
) -> dict[int, int]:
    """Re-derive the cluster vote with explicit pairwise distances.

    instances is a list of (track_id, points). Returns
    {cluster position: winning track_id} for clusters that were assigned.
    """
    out: dict[int, int] = {}
    for k, members in enumerate(cluster_points):
        r = np.asarray(members, dtype=np.float64).reshape(-1, 3)
        best: tuple[float, int] | None = None
        for track_id, inst_pts in instances:
            f = np.asarray(inst_pts, dtype=np.float64).reshape(-1, 3)
            d = np.linalg.norm(r[:, None, :] - f[None, :, :], axis=2)
            near = d < delta               # strict
            n = int(near.any(axis=1).sum())
            coverage = n / len(r)
            if coverage <= alpha:
                continue
            if symmetric_inclusion:
                inclusion = int(near.any(axis=0).sum()) / len(f)
            else:
                inclusion = n / len(f)
            if inclusion <= beta:
                continue
            if best is None or coverage > best[0] + 1e-12 or (
                    abs(coverage - best[0]) <= 1e-12 and track_id < best[1]):
                best = (coverage, track_id)
        if best is not None:
            out[k] = best[1]
    return out


# ---------------------------------------------------------------------------
# Surface voting, one vertex at a time


def brute_vote(vertices: np.ndarray, foreground: np.ndarray,
               background: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (vertex keep mask, foreground keep mask)."""
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    fg = np.asarray(foreground, dtype=np.float64).reshape(-1, 3)
    bg = np.asarray(background, dtype=np.float64).reshape(-1, 3)
    keep = np.zeros(len(verts), dtype=bool)
    fg_keep = np.zeros(len(fg), dtype=bool)
    for i, v in enumerate(verts):
        df = np.linalg.norm(fg - v, axis=1) if len(fg) else np.empty(0)
        db = np.linalg.norm(bg - v, axis=1) if len(bg) else np.empty(0)
        fg_near = df < tau
        if int(fg_near.sum()) > int((db < tau).sum()):
            keep[i] = True
            fg_keep |= fg_near
    return keep, fg_keep


# ---------------------------------------------------------------------------
# Box overlap oracles


def mc_iou3d(box_a, box_b, n_samples: int = 1_000_000,
             rng: np.random.Generator | None = None) -> float:
    """Volume IoU by uniform sampling over the joint bounding box."""
    if rng is None:
        rng = np.random.default_rng(0)
    corners = np.vstack([box_a.corners(), box_b.corners()])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    samples = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = box_a.contains_points(samples)
    in_b = box_b.contains_points(samples)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(in_a & in_b)) / union


def _points_in_convex(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """points (N,2) inside a counter-clockwise convex polygon, boundary in."""
    inside = np.ones(len(points), dtype=bool)
    m = len(poly)
    for i in range(m):
        a = poly[i]
        e = poly[(i + 1) % m] - a
        cross = e[0] * (points[:, 1] - a[1]) - e[1] * (points[:, 0] - a[0])
        inside &= cross >= -1e-12
    return inside


def raster_bev_intersection(box_a, box_b, cell: float = 0.01) -> float:
    """Footprint intersection area by counting cell centers inside both."""
    pa = box_a.bev_corners()
    pb = box_b.bev_corners()
    lo = np.maximum(pa.min(axis=0), pb.min(axis=0)) - cell
    hi = np.minimum(pa.max(axis=0), pb.max(axis=0)) + cell
    if (hi <= lo).any():
        return 0.0
    xs = np.arange(lo[0] + cell / 2.0, hi[0], cell)
    ys = np.arange(lo[1] + cell / 2.0, hi[1], cell)
    if len(xs) == 0 or len(ys) == 0:
        return 0.0
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    hits = _points_in_convex(pts, pa) & _points_in_convex(pts, pb)
    return float(np.count_nonzero(hits)) * cell * cell


# ---------------------------------------------------------------------------
# Rectangle direction search on a fine grid


def _nearer_edge_distances(proj: np.ndarray) -> np.ndarray:
    hi = proj.max() - proj
    lo = proj - proj.min()
    return hi if hi.sum() < lo.sum() else lo


def grid_direction_oracle(points_xy: np.ndarray, step_deg: float = 0.1,
                          floor: float = 0.01) -> float:
    """Argmax direction of the closeness criterion over a fine grid.

    Returns the best direction in [0, pi/2). Same criterion as the library,
    evaluated with a plain per-angle loop at a 5x finer resolution.
    """
    xy = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    best_score = -math.inf
    best_theta = 0.0
    for theta in np.deg2rad(np.arange(0.0, 90.0, step_deg)):
        c, s = math.cos(theta), math.sin(theta)
        u = xy[:, 0] * c + xy[:, 1] * s
        v = -xy[:, 0] * s + xy[:, 1] * c
        d = np.minimum(_nearer_edge_distances(u), _nearer_edge_distances(v))
        score = float(np.sum(1.0 / np.maximum(d, floor)))
        if score > best_score:
            best_score = score
            best_theta = float(theta)
    return best_theta


def yaw_gap_deg(a: float, b: float, period: float = math.pi / 2.0) -> float:
    """Smallest angular difference between two directions, in degrees."""
    d = (a - b) % period
    d = min(d, period - d)
    return math.degrees(d)


# ---------------------------------------------------------------------------
# Scene construction shorthand


def sample_box_surface(box, step: float = 0.12,
                       faces: tuple[str, ...] = ("+x", "-x", "+y", "-y", "top"),
                       jitter: float = 0.0,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Dense point samples on selected faces of an oriented box.

    Face names are in the box frame: +x is the face at +length/2 and so on.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    hl, hw = box.length / 2.0, box.width / 2.0
    us = np.arange(-hl, hl + step / 2.0, step)
    vs = np.arange(-hw, hw + step / 2.0, step)
    zs = np.arange(box.bottom_z, box.top_z + step / 2.0, step)
    zs_local = zs - box.center[2]
    pts_local = []
    for face in faces:
        if face == "+x":
            g = np.meshgrid(vs, zs_local, indexing="ij")
            pts_local.append(np.column_stack(
                [np.full(g[0].size, hl), g[0].ravel(), g[1].ravel()]))
        elif face == "-x":
            g = np.meshgrid(vs, zs_local, indexing="ij")
            pts_local.append(np.column_stack(
                [np.full(g[0].size, -hl), g[0].ravel(), g[1].ravel()]))
        elif face == "+y":
            g = np.meshgrid(us, zs_local, indexing="ij")
            pts_local.append(np.column_stack(
                [g[0].ravel(), np.full(g[0].size, hw), g[1].ravel()]))
        elif face == "-y":
            g = np.meshgrid(us, zs_local, indexing="ij")
            pts_local.append(np.column_stack(
                [g[0].ravel(), np.full(g[0].size, -hw), g[1].ravel()]))
        elif face == "top":
            g = np.meshgrid(us, vs, indexing="ij")
            pts_local.append(np.column_stack(
                [g[0].ravel(), g[1].ravel(),
                 np.full(g[0].size, box.top_z - box.center[2])]))
        else:
            raise ValueError(f"unknown face {face!r}")
    local = np.vstack(pts_local)
    if jitter > 0:
        local = local + rng.normal(0.0, jitter, size=local.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = local[:, 0] * c - local[:, 1] * s + box.center[0]
    world[:, 1] = local[:, 0] * s + local[:, 1] * c + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    return world
