"""Cross-modal instance alignment: from 2D cues to cleaned 3D instance points.

Per frame the flow is: remove the ground plane, drop a thin band of
near-ground points, cluster what is left, erode the 2D masks, lift masked
image pixels to 3D by projecting the cloud through each camera, then keep
only the clusters that mutually overlap the lifted points.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import as_points
from .gridindex import GridIndex
from .scene_io import FrameBundle, InstanceCue2D

# Ground planes must be near-horizontal: unit normal z above this.
GROUND_NORMAL_MIN_Z = 0.7

# Adaptive erosion radius: fraction of the smaller 2D box side, clamped.
EROSION_FRACTION = 0.03
EROSION_RADIUS_MIN = 1
EROSION_RADIUS_MAX = 8


@dataclass(frozen=True)
class GroundModel:
    """Plane a*x + b*y + c*z + d = 0 with unit normal, oriented so c > 0."""

    coefficients: np.ndarray
    inlier_threshold: float

    def __post_init__(self) -> None:
        coef = np.array(self.coefficients, dtype=np.float64).reshape(4)
        norm = float(np.linalg.norm(coef[:3]))
        if norm <= 0:
            raise ValueError("degenerate plane normal")
        coef = coef / norm
        if coef[2] < 0:
            coef = -coef
        if coef[2] <= GROUND_NORMAL_MIN_Z:
            raise ValueError(f"ground plane normal z must exceed {GROUND_NORMAL_MIN_Z}")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    def height_above(self, points: np.ndarray) -> np.ndarray:
        """Signed distance above the plane for each point."""
        pts = as_points(points)
        return pts @ self.coefficients[:3] + self.coefficients[3]

    def plane_z(self, x: float, y: float) -> float:
        a, b, c, d = self.coefficients
        return float(-(a * x + b * y + d) / c)


def _fit_plane_svd(points: np.ndarray) -> np.ndarray | None:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        return None
    normal = normal / norm
    return np.concatenate([normal, [-float(normal @ centroid)]])


def remove_ground(
    points: np.ndarray,
    threshold: float = 0.1,
    iterations: int = 200,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, GroundModel | None]:
    """Seeded-RANSAC ground plane removal.

    Returns (non_ground_points, indices of those points in the input,
    GroundModel or None). Planes are accepted only when near-horizontal;
    if none is found after the iteration budget, all points are returned
    and the model is None.
    """
    pts = as_points(points)
    n = len(pts)
    if rng is None:
        rng = np.random.default_rng(0)
    if n < 3:
        return pts, np.arange(n), None

    best_inliers = 0
    best_plane: np.ndarray | None = None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = pts[idx]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        if normal[2] < 0:
            normal = -normal
        if normal[2] <= GROUND_NORMAL_MIN_Z:
            continue
        d = -float(normal @ p0)
        count = int((np.abs(pts @ normal + d) < threshold).sum())
        if count > best_inliers:
            best_inliers = count
            best_plane = np.concatenate([normal, [d]])

    if best_plane is None:
        return pts, np.arange(n), None

    # One refinement pass: least-squares plane on the consensus set.
    inlier_mask = np.abs(pts @ best_plane[:3] + best_plane[3]) < threshold
    refined = _fit_plane_svd(pts[inlier_mask]) if inlier_mask.sum() >= 3 else None
    if refined is not None:
        if refined[2] < 0:
            refined = -refined
        if refined[2] > GROUND_NORMAL_MIN_Z:
            best_plane = refined
            inlier_mask = np.abs(pts @ best_plane[:3] + best_plane[3]) < threshold

    model = GroundModel(coefficients=best_plane, inlier_threshold=threshold)
    keep = ~inlier_mask
    return pts[keep], np.flatnonzero(keep), model


def height_floor_mask(points: np.ndarray, ground: GroundModel | None,
                      min_height: float = 0.05) -> np.ndarray:
    """Mask of points at least min_height above the fitted ground plane.

    Without a ground model every point passes; degenerate scenes still flow
    through the pipeline.
    """
    pts = as_points(points)
    if ground is None:
        return np.ones(len(pts), dtype=bool)
    return ground.height_above(pts) >= min_height


# ---------------------------------------------------------------------------
# Clustering


@dataclass
class ClusterSet:
    """Clustering of a point cloud: labels (-1 = noise) over `points`."""

    points: np.ndarray
    labels: np.ndarray
    n_clusters: int
    point_indices: np.ndarray | None = None  # optional map into an external cloud

    def cluster_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def clusters(self) -> list[np.ndarray]:
        return [self.cluster_indices(k) for k in range(self.n_clusters)]

    @property
    def noise_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == -1)


def cluster(points: np.ndarray, eps: float = 0.7, min_pts: int = 5,
            point_indices: np.ndarray | None = None) -> ClusterSet:
    """Density clustering (DBSCAN semantics) with a hash-grid neighbor index.

    The point order is canonicalized by lexicographic sort before the scan,
    so the labeling is a pure function of the point multiset. Neighborhoods
    are closed balls (distance <= eps) and include the point itself, hence
    every cluster has at least min_pts members.
    """
    pts = as_points(points)
    n = len(pts)
    labels_sorted = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ClusterSet(points=pts, labels=labels_sorted, n_clusters=0,
                          point_indices=point_indices)

    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    spts = pts[order]
    grid = GridIndex(spts, cell_size=eps)
    eps2 = eps * eps

    def neighbors(i: int) -> np.ndarray:
        cand = grid._candidate_indices(spts[i])
        d2 = np.sum((spts[cand] - spts[i]) ** 2, axis=1)
        hits = cand[d2 <= eps2]
        hits.sort()
        return hits

    visited = np.zeros(n, dtype=bool)
    next_label = 0
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        seed = neighbors(i)
        if len(seed) < min_pts:
            continue  # stays noise unless captured as a border point later
        cid = next_label
        next_label += 1
        labels_sorted[i] = cid
        queue = deque(int(j) for j in seed if j != i)
        enqueued = set(int(j) for j in seed)
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
                    k = int(k)
                    if k not in enqueued:
                        enqueued.add(k)
                        queue.append(k)

    labels = np.empty(n, dtype=np.int64)
    labels[order] = labels_sorted
    return ClusterSet(points=pts, labels=labels, n_clusters=next_label,
                      point_indices=point_indices)


# ---------------------------------------------------------------------------
# Mask erosion and unprojection


def erosion_radius(box2d_width: float, box2d_height: float) -> int:
    r = int(round(EROSION_FRACTION * min(box2d_width, box2d_height)))
    return max(EROSION_RADIUS_MIN, min(EROSION_RADIUS_MAX, r))


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    xx, yy = np.meshgrid(span, span)
    return (xx * xx + yy * yy) <= radius * radius


def erode_mask(mask: np.ndarray, box2d_width: float, box2d_height: float
               ) -> tuple[np.ndarray, bool]:
    """Erode a cue mask by the adaptive radius.

    If erosion empties the mask, fall back to a single pixel at the original
    mask centroid and flag it. The returned mask is always a subset of the
    input mask plus that fallback pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy(), False
    radius = erosion_radius(box2d_width, box2d_height)
    eroded = ndimage.binary_erosion(mask, structure=_disk(radius), border_value=0)
    if eroded.any():
        return eroded, False
    ys, xs = np.nonzero(mask)
    cy = int(np.clip(round(float(ys.mean())), 0, mask.shape[0] - 1))
    cx = int(np.clip(round(float(xs.mean())), 0, mask.shape[1] - 1))
    fallback = np.zeros_like(mask)
    fallback[cy, cx] = True
    return fallback, True


@dataclass
class InstancePoints:
    """3D points attributed to one tracked instance.

    Points are stored in the sensor frame of their own sweep; frame_indices
    gives each point's sweep and source_indices its position in that sweep's
    working cloud (ground-removed, height-filtered).
    """

    track_id: int
    class_label: str
    points: np.ndarray
    frame_indices: np.ndarray
    source_indices: np.ndarray
    score: float = 1.0
    refined: bool = False

    def __post_init__(self) -> None:
        self.points = as_points(self.points)
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64).reshape(-1)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        if not (len(self.points) == len(self.frame_indices) == len(self.source_indices)):
            raise ValueError("points, frame_indices and source_indices must align")
        if len(self.points) == 0:
            raise ValueError("an instance must own at least one point")


@dataclass
class SkipRecord:
    """One skipped or degraded item, for the sidecar report."""

    frame: int
    track_id: int
    reason: str
    camera: str = ""
    detail: str = ""


def unproject_instances(
    frame: FrameBundle,
    working_points: np.ndarray,
    eroded_masks: dict[str, list[np.ndarray | None]] | None = None,
) -> tuple[list[InstancePoints], list[SkipRecord]]:
    """Lift 2D cues to 3D by projecting the working cloud through each camera.

    A point joins a cue when its pixel lands on a set mask pixel. If several
    masks in one camera claim the same pixel, the cue with the higher score
    wins (ties to the lower track_id). Cues from different cameras sharing a
    track_id are merged into one instance. Cues that capture no points are
    reported as skips.

    eroded_masks maps camera name to a list parallel to that camera's cues;
    None entries (or a missing dict) mean the raw mask is eroded here.
    """
    pts = as_points(working_points)
    skips: list[SkipRecord] = []
    # track_id -> (class_label, score accumulator, point index set)
    collected: dict[int, dict] = {}
    cue_seen: dict[int, bool] = {}

    for view in frame.cameras:
        if not view.cues:
            continue
        uv, _, in_image = view.camera.project_points(pts) if len(pts) else (
            np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=bool))
        # pixels are NaN behind the camera; substitute before the int cast
        safe_uv = np.where(np.isfinite(uv), uv, -1.0)
        cols = np.floor(safe_uv[:, 0]).astype(np.int64)
        rows = np.floor(safe_uv[:, 1]).astype(np.int64)

        # Per-point best claim in this camera: (score, -track_id) wins.
        best_score = np.full(len(pts), -1.0)
        best_track = np.full(len(pts), -1, dtype=np.int64)
        best_cue: dict[int, InstanceCue2D] = {}
        for ci, cue in enumerate(view.cues):
            cue_seen.setdefault(cue.track_id, False)
            mask = None
            if eroded_masks is not None and view.name in eroded_masks:
                mask = eroded_masks[view.name][ci]
            if mask is None:
                mask, _ = erode_mask(cue.mask(), cue.box2d.width, cue.box2d.height)
            if len(pts) == 0 or not in_image.any():
                continue
            sel = np.flatnonzero(in_image)
            on_mask = mask[rows[sel], cols[sel]]
            hit = sel[on_mask]
            if len(hit) == 0:
                continue
            better = (cue.score > best_score[hit]) | (
                (cue.score == best_score[hit]) & (cue.track_id < best_track[hit]))
            take = hit[better]
            # A tie on score against the same track just keeps the first claim.
            replaced = take[best_track[take] != cue.track_id]
            best_score[replaced] = cue.score
            best_track[replaced] = cue.track_id
            best_cue[cue.track_id] = cue

        for track_id, cue in best_cue.items():
            owned = np.flatnonzero(best_track == track_id)
            if len(owned) == 0:
                continue
            cue_seen[track_id] = True
            slot = collected.setdefault(track_id, {
                "class_label": cue.class_label,
                "scores": [],
                "indices": set(),
                "best": -1.0,
            })
            slot["indices"].update(int(i) for i in owned)
            slot["scores"].append(cue.score)
            if cue.score > slot["best"]:
                slot["best"] = cue.score
                slot["class_label"] = cue.class_label

    for view in frame.cameras:
        for cue in view.cues:
            if not cue_seen.get(cue.track_id, False) and cue.track_id not in collected:
                skips.append(SkipRecord(frame=frame.index, track_id=cue.track_id,
                                        camera=view.name, reason="no_points",
                                        detail="cue mask captured no projected points"))
                cue_seen[cue.track_id] = True  # one report per track

    instances = []
    for track_id in sorted(collected):
        slot = collected[track_id]
        idx = np.asarray(sorted(slot["indices"]), dtype=np.int64)
        instances.append(InstancePoints(
            track_id=track_id,
            class_label=slot["class_label"],
            points=pts[idx],
            frame_indices=np.full(len(idx), frame.index, dtype=np.int64),
            source_indices=idx,
            score=float(np.mean(slot["scores"])),
        ))
    return instances, skips


# ---------------------------------------------------------------------------
# Context-aware refinement


@dataclass
class RefineResult:
    instances: list[InstancePoints]
    # cluster id -> track_id it was assigned to (clusters absent here were discarded)
    assignment: dict[int, int]
    # indices (into the working cloud) of points in clusters no instance claimed
    unassigned_points: np.ndarray


def context_aware_refine(
    clusters: ClusterSet,
    instances: list[InstancePoints],
    alpha: float = 0.3,
    beta: float = 0.2,
    delta: float = 0.1,
    symmetric_inclusion: bool = False,
) -> RefineResult:
    """Assign clusters to instances by mutual-overlap ratios.

    For cluster R and instance F let n = |{p in R : some f in F has
    ||p - f|| < delta}|. R may join F only when n/|R| > alpha and the
    inclusion ratio exceeds beta. As published, the inclusion ratio reuses
    the same numerator, n/|F|; with symmetric_inclusion=True the numerator
    is instead counted from F's side (|{f in F : dist(f, R) < delta}|).

    Each cluster joins at most one instance: the one with the highest n/|R|,
    ties to the lower track_id. A refined instance is exactly the union of
    its clusters; instances that win no cluster keep their lifted points and
    stay flagged unrefined. The result does not depend on the order of
    clusters or instances.
    """
    inst_grids = [GridIndex(inst.points, cell_size=delta) for inst in instances]

    assignment: dict[int, int] = {}
    winners: dict[int, list[np.ndarray]] = {}
    unassigned: list[np.ndarray] = []

    for k in range(clusters.n_clusters):
        member_idx = clusters.cluster_indices(k)
        member_pts = clusters.points[member_idx]
        best: tuple[float, int, int] | None = None  # (coverage, track_id, instance pos)
        for pos, (inst, grid) in enumerate(zip(instances, inst_grids)):
            near = grid.any_within(member_pts, delta)
            n = int(near.sum())
            coverage = n / len(member_idx)
            if coverage <= alpha:
                continue
            if symmetric_inclusion:
                member_grid = GridIndex(member_pts, cell_size=delta)
                inclusion_hits = int(member_grid.any_within(inst.points, delta).sum())
                inclusion = inclusion_hits / len(inst.points)
            else:
                inclusion = n / len(inst.points)
            if inclusion <= beta:
                continue
            if best is None or coverage > best[0] + 1e-12 or (
                    abs(coverage - best[0]) <= 1e-12 and inst.track_id < best[1]):
                best = (coverage, inst.track_id, pos)
        if best is None:
            unassigned.append(member_idx)
        else:
            assignment[k] = best[1]
            winners.setdefault(best[2], []).append(member_idx)

    refined: list[InstancePoints] = []
    for pos, inst in enumerate(instances):
        if pos not in winners:
            refined.append(InstancePoints(
                track_id=inst.track_id, class_label=inst.class_label,
                points=inst.points.copy(), frame_indices=inst.frame_indices.copy(),
                source_indices=inst.source_indices.copy(), score=inst.score,
                refined=False))
            continue
        idx = np.unique(np.concatenate(winners[pos]))
        frame_value = int(inst.frame_indices[0]) if len(inst.frame_indices) else 0
        source = (clusters.point_indices[idx] if clusters.point_indices is not None
                  else idx)
        refined.append(InstancePoints(
            track_id=inst.track_id, class_label=inst.class_label,
            points=clusters.points[idx],
            frame_indices=np.full(len(idx), frame_value, dtype=np.int64),
            source_indices=np.asarray(source, dtype=np.int64),
            score=inst.score, refined=True))

    unassigned_idx = (np.unique(np.concatenate(unassigned)) if unassigned
                      else np.empty(0, dtype=np.int64))
    return RefineResult(instances=refined, assignment=assignment,
                        unassigned_points=unassigned_idx)
