"""Physical-state-aware oriented box fitting.

Static rigid objects: aggregate sweeps, carve a truncated signed distance
field along the sensor rays, extract the zero-crossing surface, vote surface
vertices against nearby background points, fit an L-shape to the surviving
foreground, and when the result is implausibly small against the class size
prior, grow it to the prior anchored on the observed faces and let the 2D
cues pick between the two possible orientations.

Dynamic rigid objects: orient by the smoothed trajectory, take the single
sweep's tight extents, and extend only across faces the sensor cannot see.

Deformable objects: tight per-sweep boxes, nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (AxisAlignedBox2, CameraModel, OrientedBox3, Pose,
                       iou2d, wrap_angle)
from .gridindex import GridIndex
from .scene_io import ClassPrior
from .alignment import GroundModel

# Thin-box floor for degenerate (collinear) footprints, metres.
DEGENERATE_WIDTH = 0.05

SIDES = ("+x", "-x", "+y", "-y")
ALL_SIDES = frozenset(SIDES)


# ---------------------------------------------------------------------------
# L-shape fitting


@dataclass
class LShapeResult:
    box: OrientedBox3
    yaw_raw: float        # maximizing direction in [0, pi/2)
    degenerate: bool


def _closeness_scores(xy: np.ndarray, thetas: np.ndarray, floor: float) -> np.ndarray:
    """Closeness criterion for every candidate direction at once.

    For each direction the points are projected on the two rectangle axes;
    on each axis the nearer boundary (by total distance) is the candidate
    edge, and every point contributes the inverse of its distance to the
    nearer of the two candidate edges, floored to keep the sum finite.
    """
    cos = np.cos(thetas)[:, None]
    sin = np.sin(thetas)[:, None]
    u = xy[None, :, 0] * cos + xy[None, :, 1] * sin      # (A, N)
    v = -xy[None, :, 0] * sin + xy[None, :, 1] * cos
    scores = np.empty(len(thetas))
    for a in range(len(thetas)):
        d = np.minimum(_edge_distances(u[a]), _edge_distances(v[a]))
        scores[a] = float(np.sum(1.0 / np.maximum(d, floor)))
    return scores


def _edge_distances(proj: np.ndarray) -> np.ndarray:
    hi = proj.max() - proj
    lo = proj - proj.min()
    return hi if hi.sum() < lo.sum() else lo


def lshape_fit(points: np.ndarray, yaw_step_deg: float = 0.5,
               closeness_floor: float = 0.01) -> LShapeResult:
    """Fit an oriented box to >= 3 points by grid search over direction.

    Directions sweep [0, 90) degrees; the footprint is the tight extent at
    the winning direction and the height the tight z extent. A collinear
    cloud yields a thin box at the DEGENERATE_WIDTH floor, flagged.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError(f"lshape_fit needs at least 3 points, got {len(pts)}")
    xy = pts[:, :2]
    thetas = np.deg2rad(np.arange(0.0, 90.0, yaw_step_deg))
    scores = _closeness_scores(xy, thetas, closeness_floor)
    best = int(np.argmax(scores))
    yaw = float(thetas[best])
    return _box_from_direction(pts, yaw)


def _box_from_direction(pts: np.ndarray, yaw: float) -> LShapeResult:
    """Tight box around pts with the given footprint direction."""
    c, s = math.cos(yaw), math.sin(yaw)
    u = pts[:, 0] * c + pts[:, 1] * s
    v = -pts[:, 0] * s + pts[:, 1] * c
    u0, u1 = float(u.min()), float(u.max())
    v0, v1 = float(v.min()), float(v.max())
    z0, z1 = float(pts[:, 2].min()), float(pts[:, 2].max())
    extent_u = u1 - u0
    extent_v = v1 - v0
    degenerate = False
    if extent_u < DEGENERATE_WIDTH:
        pad = (DEGENERATE_WIDTH - extent_u) / 2.0
        u0, u1 = u0 - pad, u1 + pad
        extent_u = DEGENERATE_WIDTH
        degenerate = True
    if extent_v < DEGENERATE_WIDTH:
        pad = (DEGENERATE_WIDTH - extent_v) / 2.0
        v0, v1 = v0 - pad, v1 + pad
        extent_v = DEGENERATE_WIDTH
        degenerate = True
    height = max(z1 - z0, DEGENERATE_WIDTH)
    mu, mv = (u0 + u1) / 2.0, (v0 + v1) / 2.0
    center = np.array([mu * c - mv * s, mu * s + mv * c, (z0 + z1) / 2.0])
    box = OrientedBox3(center=center, length=extent_u, width=extent_v,
                       height=height, yaw=yaw)
    return LShapeResult(box=box, yaw_raw=wrap_angle(yaw) % (math.pi / 2.0),
                        degenerate=degenerate)


def tight_box_at_yaw(points: np.ndarray, yaw: float) -> LShapeResult:
    """Tight box at a caller-chosen direction (trajectory-oriented fits)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 1:
        raise ValueError("tight_box_at_yaw needs points")
    return _box_from_direction(pts, yaw)


# ---------------------------------------------------------------------------
# Size plausibility


def size_check(box: OrientedBox3, prior: ClassPrior, ratio: float = 0.8) -> list[str]:
    """Names of box dimensions strictly below ratio times the prior dimension."""
    flags = []
    if box.length < ratio * prior.length:
        flags.append("length")
    if box.width < ratio * prior.width:
        flags.append("width")
    if box.height < ratio * prior.height:
        flags.append("height")
    return flags


# ---------------------------------------------------------------------------
# TSDF carving and surface extraction


@dataclass
class TsdfGrid:
    """Dense TSDF over a padded axis-aligned region of the global frame."""

    origin: np.ndarray           # world position of voxel (0, 0, 0) corner
    voxel_size: float
    truncation: float
    distances: np.ndarray        # (nx, ny, nz) mean truncated signed distance
    weights: np.ndarray          # (nx, ny, nz) observation counts

    def voxel_center(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size


def tsdf_integrate(
    sweeps: list[tuple[np.ndarray, np.ndarray]],
    voxel_size: float = 0.1,
    truncation: float = 0.3,
) -> TsdfGrid | None:
    """Carve a TSDF from (points, sensor_origin) pairs, one per sweep.

    Each measured point updates the voxels along its ray inside the
    truncation band around the hit, with the projective signed distance
    (range minus distance along the ray), clamped and averaged. Returns
    None when no sweep holds any point.
    """
    all_pts = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p, _ in sweeps]
    total = sum(len(p) for p in all_pts)
    if total == 0:
        return None
    stacked = np.concatenate([p for p in all_pts if len(p)])
    pad = truncation + voxel_size
    lo = np.floor((stacked.min(axis=0) - pad) / voxel_size) * voxel_size
    hi = stacked.max(axis=0) + pad
    shape = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 1)

    dist_sum = np.zeros(shape)
    weight = np.zeros(shape, dtype=np.int64)

    # Sample positions along each ray at half-voxel spacing across the band.
    n_samples = int(np.ceil(4.0 * truncation / voxel_size)) + 1
    offsets = np.linspace(-truncation, truncation, n_samples)

    for pts, origin in sweeps:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            continue
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        rays = pts - origin
        ranges = np.linalg.norm(rays, axis=1)
        ok = ranges > 1e-9
        pts, rays, ranges = pts[ok], rays[ok], ranges[ok]
        dirs = rays / ranges[:, None]
        # (N, S, 3) sample points; signed distance = -offset (before hit is positive)
        samples = pts[:, None, :] - dirs[:, None, :] * offsets[None, :, None]
        sdf = np.broadcast_to(offsets[None, :], (len(pts), n_samples))
        vox = np.floor((samples - lo) / voxel_size).astype(np.int64)
        flat_ok = np.all((vox >= 0) & (vox < shape), axis=2)
        vi = vox[flat_ok]
        np.add.at(dist_sum, (vi[:, 0], vi[:, 1], vi[:, 2]),
                  np.clip(sdf[flat_ok], -truncation, truncation))
        np.add.at(weight, (vi[:, 0], vi[:, 1], vi[:, 2]), 1)

    distances = np.zeros(shape)
    seen = weight > 0
    distances[seen] = dist_sum[seen] / weight[seen]
    return TsdfGrid(origin=lo, voxel_size=voxel_size, truncation=truncation,
                    distances=distances, weights=weight)


@dataclass
class SurfaceVertexSet:
    """Zero-crossing vertices of a TSDF with unit normals."""

    vertices: np.ndarray   # (V, 3)
    normals: np.ndarray    # (V, 3)

    def __len__(self) -> int:
        return len(self.vertices)

    def subset(self, mask: np.ndarray) -> "SurfaceVertexSet":
        return SurfaceVertexSet(vertices=self.vertices[mask], normals=self.normals[mask])


def _tsdf_gradient(grid: TsdfGrid, idx: np.ndarray) -> np.ndarray:
    """Central-difference gradient at integer voxel indices, one-sided at edges."""
    d = grid.distances
    w = grid.weights
    shape = np.asarray(d.shape)
    out = np.zeros((len(idx), 3))
    for axis in range(3):
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        fwd = np.clip(idx + step, 0, shape - 1)
        bwd = np.clip(idx - step, 0, shape - 1)
        fwd_ok = w[fwd[:, 0], fwd[:, 1], fwd[:, 2]] > 0
        bwd_ok = w[bwd[:, 0], bwd[:, 1], bwd[:, 2]] > 0
        dv = d[fwd[:, 0], fwd[:, 1], fwd[:, 2]] - d[bwd[:, 0], bwd[:, 1], bwd[:, 2]]
        span = (fwd[:, axis] - bwd[:, axis]).astype(np.float64)
        usable = fwd_ok & bwd_ok & (span > 0)
        out[usable, axis] = dv[usable] / (span[usable] * grid.voxel_size)
    return out


def extract_surface(grid: TsdfGrid, sensor_hint: np.ndarray | None = None
                    ) -> SurfaceVertexSet:
    """Vertices where the TSDF changes sign between observed neighbor voxels.

    The vertex sits at the linear zero crossing along the connecting axis.
    Normals are normalized central-difference gradients, which point from
    the occupied side into free space; sensor_hint (any point on the sensor
    side) flips stragglers that noise turned around.
    """
    d, w = grid.distances, grid.weights
    verts = []
    norms = []
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        da, db = d[tuple(sl_a)], d[tuple(sl_b)]
        wa, wb = w[tuple(sl_a)], w[tuple(sl_b)]
        crossing = (wa > 0) & (wb > 0) & (da * db < 0)
        if not crossing.any():
            continue
        ia = np.argwhere(crossing)
        va, vb = da[crossing], db[crossing]
        t = va / (va - vb)
        base = (ia + 0.5) * grid.voxel_size + grid.origin
        step = np.zeros(3)
        step[axis] = grid.voxel_size
        verts.append(base + t[:, None] * step[None, :])
        ga = _tsdf_gradient(grid, ia)
        ib = ia.copy()
        ib[:, axis] += 1
        gb = _tsdf_gradient(grid, ib)
        g = ga * (1.0 - t[:, None]) + gb * t[:, None]
        norms.append(g)
    if not verts:
        return SurfaceVertexSet(vertices=np.zeros((0, 3)), normals=np.zeros((0, 3)))
    vertices = np.concatenate(verts)
    normals = np.concatenate(norms)
    lengths = np.linalg.norm(normals, axis=1)
    bad = lengths < 1e-9
    normals[bad] = np.array([0.0, 0.0, 1.0])
    lengths[bad] = 1.0
    normals = normals / lengths[:, None]
    if sensor_hint is not None:
        toward = np.asarray(sensor_hint, dtype=np.float64).reshape(3) - vertices
        flip = np.sum(normals * toward, axis=1) < 0
        normals[flip] *= -1.0
    return SurfaceVertexSet(vertices=vertices, normals=normals)


# ---------------------------------------------------------------------------
# Surface voting


@dataclass
class VoteResult:
    surface: SurfaceVertexSet          # vertices that won the vote
    vertex_keep: np.ndarray            # bool per input vertex
    foreground_keep: np.ndarray        # bool per foreground point (union of kept balls)


def surface_vote(surface: SurfaceVertexSet, foreground: np.ndarray,
                 background: np.ndarray, tau: float = 0.15) -> VoteResult:
    """Keep surface vertices with strictly more foreground than background
    support within tau, then keep exactly the foreground points inside the
    tau-ball of some kept vertex. Ties are discarded.
    """
    fg = np.asarray(foreground, dtype=np.float64).reshape(-1, 3)
    bg = np.asarray(background, dtype=np.float64).reshape(-1, 3)
    verts = surface.vertices
    if len(verts) == 0:
        return VoteResult(surface=surface.subset(np.zeros(0, dtype=bool)),
                          vertex_keep=np.zeros(0, dtype=bool),
                          foreground_keep=np.zeros(len(fg), dtype=bool))
    fg_grid = GridIndex(fg, cell_size=tau)
    bg_grid = GridIndex(bg, cell_size=tau)
    keep = np.zeros(len(verts), dtype=bool)
    fg_keep = np.zeros(len(fg), dtype=bool)
    for i, v in enumerate(verts):
        fg_idx = fg_grid.query_indices(v, tau)
        if len(fg_idx) > bg_grid.query_count(v, tau):
            keep[i] = True
            fg_keep[fg_idx] = True
    return VoteResult(surface=surface.subset(keep), vertex_keep=keep,
                      foreground_keep=fg_keep)


# ---------------------------------------------------------------------------
# Side coverage and prior-guided resizing


def side_coverage(surface: SurfaceVertexSet, yaw: float, gamma: float = 0.8,
                  min_vertices: int = 5) -> frozenset[str]:
    """Which vertical box sides the surface actually evidences.

    Normals are rotated into the box frame; a side counts as covered when at
    least min_vertices normals align with its outward direction beyond gamma.
    """
    if len(surface) == 0:
        return frozenset()
    c, s = math.cos(yaw), math.sin(yaw)
    n = surface.normals
    nx = n[:, 0] * c + n[:, 1] * s
    ny = -n[:, 0] * s + n[:, 1] * c
    counts = {
        "+x": int((nx > gamma).sum()),
        "-x": int((-nx > gamma).sum()),
        "+y": int((ny > gamma).sum()),
        "-y": int((-ny > gamma).sum()),
    }
    return frozenset(side for side, cnt in counts.items() if cnt >= min_vertices)


def _anchored_interval(lo: float, hi: float, target: float,
                       covered_lo: bool, covered_hi: bool,
                       sensor_coord: float) -> tuple[float, float]:
    """Grow [lo, hi] to length target without moving covered endpoints.

    With one covered endpoint growth is one-sided away from it; with both
    (or with neither classifiable) growth is symmetric; with neither covered
    the sensor-facing endpoint is held and growth runs away from the sensor.
    """
    size = hi - lo
    grow = max(target - size, 0.0)
    if grow == 0.0:
        return lo, hi
    if covered_lo and covered_hi:
        return lo - grow / 2.0, hi + grow / 2.0
    if covered_lo:
        return lo, hi + grow
    if covered_hi:
        return lo - grow, hi
    # Neither face covered: anchor the face nearer the sensor.
    if abs(sensor_coord - lo) <= abs(sensor_coord - hi):
        return lo, hi + grow
    return lo - grow, hi


def resize_candidates(box: OrientedBox3, prior: ClassPrior,
                      coverage: frozenset[str],
                      sensor_origin: np.ndarray) -> list[OrientedBox3]:
    """Prior-sized candidates anchored on the covered faces.

    With all four sides covered the box is returned unchanged. Otherwise two
    candidates are produced: the observed long side treated as the object's
    length, and as its width (a 90-degree yaw flip). Dimensions only ever
    grow: an observed extent larger than the prior is kept. Height becomes
    max(observed, 0.8 * prior height) with the bottom face held.
    """
    if coverage == ALL_SIDES:
        return [box]
    sensor = np.asarray(sensor_origin, dtype=np.float64).reshape(3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s], [-s, c]])          # world -> box frame
    center_uv = rot @ box.center[:2]
    sensor_uv = rot @ sensor[:2]
    u_lo, u_hi = center_uv[0] - box.length / 2.0, center_uv[0] + box.length / 2.0
    v_lo, v_hi = center_uv[1] - box.width / 2.0, center_uv[1] + box.width / 2.0

    height = max(box.height, 0.8 * prior.height)
    bottom = box.bottom_z

    candidates = []
    seen: set[tuple] = set()
    for targets in ((prior.length, prior.width), (prior.width, prior.length)):
        target_u = max(targets[0], box.length)
        target_v = max(targets[1], box.width)
        nu_lo, nu_hi = _anchored_interval(u_lo, u_hi, target_u,
                                          "-x" in coverage, "+x" in coverage,
                                          sensor_uv[0])
        nv_lo, nv_hi = _anchored_interval(v_lo, v_hi, target_v,
                                          "-y" in coverage, "+y" in coverage,
                                          sensor_uv[1])
        mu, mv = (nu_lo + nu_hi) / 2.0, (nv_lo + nv_hi) / 2.0
        center = np.array([mu * c - mv * s, mu * s + mv * c, bottom + height / 2.0])
        cand = OrientedBox3(center=center, length=nu_hi - nu_lo,
                            width=nv_hi - nv_lo, height=height, yaw=box.yaw)
        key = (round(cand.length, 9), round(cand.width, 9),
               tuple(np.round(cand.center, 9)), round(cand.yaw, 9))
        if key not in seen:
            seen.add(key)
            candidates.append(cand)
    return candidates


# ---------------------------------------------------------------------------
# 2D-cue-guided candidate selection


@dataclass
class CueObservation:
    """One usable 2D cue of a track: camera, 2D box, and the sweep's ego pose."""

    camera: CameraModel
    box2d: AxisAlignedBox2
    ego_pose: Pose


def _projected_hull(box: OrientedBox3, obs: CueObservation) -> AxisAlignedBox2 | None:
    """Axis-aligned hull of the projected box corners, clipped to the image.

    Corners behind the camera are dropped; the view qualifies only if at
    least one corner lands inside the image.
    """
    corners_sensor = obs.ego_pose.inverse().apply(box.corners())
    uv, depth, in_image = obs.camera.project_points(corners_sensor)
    front = depth > 0
    if not in_image.any() or not front.any():
        return None
    hull = AxisAlignedBox2(float(uv[front, 0].min()), float(uv[front, 1].min()),
                           float(uv[front, 0].max()), float(uv[front, 1].max()))
    return hull.clipped(obs.camera.width, obs.camera.height)


def iou_align_select(candidates: list[OrientedBox3],
                     observations: list[CueObservation],
                     reference_yaw: float,
                     aggregate: str = "mean") -> tuple[OrientedBox3, bool]:
    """Pick the candidate whose projected hull best matches the 2D cues.

    Per observation the score is 2D IoU between the clipped corner hull and
    the cue box; per candidate the scores aggregate by mean (or max). Exact
    ties go to the candidate closer in yaw to reference_yaw (footprint
    orientation compared modulo pi). Returns (choice, verified); verified is
    False when no observation qualified and the first candidate was kept.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    if len(candidates) == 1:
        return candidates[0], True
    if aggregate not in ("mean", "max"):
        raise ValueError(f"aggregate must be 'mean' or 'max', got {aggregate!r}")

    def yaw_gap(cand: OrientedBox3) -> float:
        d = (cand.yaw - reference_yaw) % math.pi
        return min(d, math.pi - d)

    best: tuple[float, float, int] | None = None
    any_view = False
    for idx, cand in enumerate(candidates):
        ious = []
        for obs in observations:
            hull = _projected_hull(cand, obs)
            if hull is None:
                continue
            ious.append(iou2d(hull, obs.box2d))
        if not ious:
            continue
        any_view = True
        score = float(np.mean(ious)) if aggregate == "mean" else float(np.max(ious))
        key = (score, -yaw_gap(cand))
        if best is None or key[0] > best[0] + 1e-9 or (
                abs(key[0] - best[0]) <= 1e-9 and key[1] > best[1]):
            best = (key[0], key[1], idx)
    if not any_view:
        return candidates[0], False
    return candidates[best[2]], True


# ---------------------------------------------------------------------------
# Dynamic objects: trajectory orientation and visibility-limited extension


def trajectory_yaw(trajectory: dict[int, np.ndarray], frame: int,
                   min_step: float = 0.1) -> float | None:
    """Heading at `frame` from the 3-sweep smoothed centroid track.

    Centroids are smoothed with a centered 3-sweep mean, then the heading is
    the direction of the displacement bracketing the frame. Displacements
    under min_step per sweep are unreliable; returns None so the caller can
    fall back to the L-shape direction.
    """
    frames = sorted(trajectory)
    if len(frames) < 2 or frame not in trajectory:
        return None
    raw = np.stack([np.asarray(trajectory[f], dtype=np.float64)[:2] for f in frames])
    smooth = raw.copy()
    for i in range(len(frames)):
        lo, hi = max(0, i - 1), min(len(frames), i + 2)
        smooth[i] = raw[lo:hi].mean(axis=0)
    i = frames.index(frame)
    lo, hi = max(0, i - 1), min(len(frames) - 1, i + 1)
    if hi == lo:
        return None
    step = (smooth[hi] - smooth[lo]) / (frames[hi] - frames[lo])
    if np.linalg.norm(step) < min_step:
        return None
    return float(math.atan2(step[1], step[0]))


@dataclass
class DynamicFit:
    box: OrientedBox3
    yaw_fallback: bool          # trajectory too flat, used L-shape direction
    extended_sides: frozenset[str]
    degenerate: bool


def visible_sides(box: OrientedBox3, sensor_origin: np.ndarray) -> frozenset[str]:
    """Vertical sides whose outward normal faces the sensor.

    A side is visible when the ray from the sensor to the face center runs
    against the face normal (negative dot product).
    """
    sensor = np.asarray(sensor_origin, dtype=np.float64).reshape(3)
    e_l, e_w = box.axes()
    out = []
    for side, axis, half in (("+x", e_l, box.length / 2.0), ("-x", -e_l, box.length / 2.0),
                             ("+y", e_w, box.width / 2.0), ("-y", -e_w, box.width / 2.0)):
        normal = np.array([axis[0], axis[1], 0.0])
        face_center = box.center + normal * half
        ray = face_center - sensor
        if float(ray @ normal) < 0.0:
            out.append(side)
    return frozenset(out)


def dynamic_orient_and_extend(
    points: np.ndarray,
    trajectory: dict[int, np.ndarray],
    prior: ClassPrior,
    sensor_origin: np.ndarray,
    frame: int,
    min_step: float = 0.1,
    yaw_step_deg: float = 0.5,
    closeness_floor: float = 0.01,
) -> DynamicFit:
    """Single-sweep box for a moving rigid object.

    Heading comes from the smoothed trajectory (L-shape direction when the
    track barely moves). Extents are the tight extents at that heading; the
    prior length is applied along the heading and the prior width across it.
    Each horizontal axis with a sensor-visible face is grown to the prior
    dimension away from that face; visible faces never move and dimensions
    never shrink. An axis with no visible face keeps its observed extent.
    """
    yaw = trajectory_yaw(trajectory, frame, min_step=min_step)
    yaw_fallback = yaw is None
    if yaw_fallback:
        # No usable heading: the observed long side plays the role of length.
        tight = lshape_fit(points, yaw_step_deg=yaw_step_deg,
                           closeness_floor=closeness_floor)
        yaw = tight.box.yaw
    else:
        tight = tight_box_at_yaw(points, yaw)
    degenerate = tight.degenerate

    # Work in the heading frame, not the canonical box frame: a partial view
    # of a car is often wider across the heading than along it, and the
    # canonical representation would swap the axes underneath us.
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(yaw), math.sin(yaw)
    u = pts[:, 0] * c + pts[:, 1] * s
    v = -pts[:, 0] * s + pts[:, 1] * c
    u_lo, u_hi = float(u.min()), float(u.max())
    v_lo, v_hi = float(v.min()), float(v.max())
    if u_hi - u_lo < DEGENERATE_WIDTH:
        pad = (DEGENERATE_WIDTH - (u_hi - u_lo)) / 2.0
        u_lo, u_hi = u_lo - pad, u_hi + pad
        degenerate = True
    if v_hi - v_lo < DEGENERATE_WIDTH:
        pad = (DEGENERATE_WIDTH - (v_hi - v_lo)) / 2.0
        v_lo, v_hi = v_lo - pad, v_hi + pad
        degenerate = True
    z_lo, z_hi = float(pts[:, 2].min()), float(pts[:, 2].max())
    height = max(z_hi - z_lo, DEGENERATE_WIDTH)

    sensor = np.asarray(sensor_origin, dtype=np.float64).reshape(3)
    sensor_uv = np.array([sensor[0] * c + sensor[1] * s,
                          -sensor[0] * s + sensor[1] * c])

    # A face is visible iff the ray from the sensor to the face center
    # opposes the outward normal; in the heading frame the normals are the
    # unit axes, so the dot product collapses to a coordinate comparison.
    vis = set()
    if u_hi - sensor_uv[0] < 0.0:
        vis.add("+x")
    if sensor_uv[0] - u_lo < 0.0:
        vis.add("-x")
    if v_hi - sensor_uv[1] < 0.0:
        vis.add("+y")
    if sensor_uv[1] - v_lo < 0.0:
        vis.add("-y")

    extended: list[str] = []
    if ("+x" in vis) != ("-x" in vis):
        target = max(prior.length, u_hi - u_lo)
        if target > (u_hi - u_lo) + 1e-12:
            if "+x" in vis:
                u_lo = u_hi - target
                extended.append("-x")
            else:
                u_hi = u_lo + target
                extended.append("+x")
    if ("+y" in vis) != ("-y" in vis):
        target = max(prior.width, v_hi - v_lo)
        if target > (v_hi - v_lo) + 1e-12:
            if "+y" in vis:
                v_lo = v_hi - target
                extended.append("-y")
            else:
                v_hi = v_lo + target
                extended.append("+y")

    mu, mv = (u_lo + u_hi) / 2.0, (v_lo + v_hi) / 2.0
    center = np.array([mu * c - mv * s, mu * s + mv * c, (z_lo + z_hi) / 2.0])
    out = OrientedBox3(center=center, length=max(u_hi - u_lo, DEGENERATE_WIDTH),
                       width=max(v_hi - v_lo, DEGENERATE_WIDTH),
                       height=height, yaw=yaw)
    return DynamicFit(box=out, yaw_fallback=yaw_fallback,
                      extended_sides=frozenset(extended), degenerate=degenerate)


# ---------------------------------------------------------------------------
# Deformable objects


def deformable_fit(points: np.ndarray, yaw_step_deg: float = 0.5,
                   closeness_floor: float = 0.01) -> LShapeResult:
    """Tight single-sweep box; no prior resizing, no cross-sweep aggregation."""
    return lshape_fit(points, yaw_step_deg=yaw_step_deg, closeness_floor=closeness_floor)


# ---------------------------------------------------------------------------
# Height refinement


def refine_height(
    box: OrientedBox3,
    frame_cloud: np.ndarray,
    prior: ClassPrior | None = None,
    ground: GroundModel | None = None,
    enforce_height_floor: bool = False,
    min_points: int = 10,
    percentile: float = 0.01,
) -> tuple[OrientedBox3, bool]:
    """Snap the box bottom to the local ground level.

    Sweep points whose horizontal distance to the box center is within the
    footprint circumradius (half the footprint diagonal) form the local
    neighborhood; it spans the full vertical column, so it reaches the
    ground under tall thin objects too. The ground level is the z-value at
    the `percentile` rank of that neighborhood (an outlier-skipping low
    quantile). With fewer than min_points neighbors the fitted ground plane
    supplies the level instead (flagged). The top face stays at the observed
    top; when enforce_height_floor is set (prior-resized boxes) the height
    will not drop below 0.8 times the prior height.
    """
    cloud = np.asarray(frame_cloud, dtype=np.float64).reshape(-1, 3)
    radius = math.hypot(box.length, box.width) / 2.0
    center = box.center
    used_plane = False
    ground_z: float | None = None
    if len(cloud):
        d = np.linalg.norm(cloud[:, :2] - center[:2], axis=1)
        nearby = cloud[d < radius]
    else:
        nearby = cloud
    if len(nearby) >= min_points:
        zs = np.sort(nearby[:, 2])
        rank = min(int(math.ceil(percentile * len(zs))), len(zs) - 1)
        ground_z = float(zs[rank])
    elif ground is not None:
        ground_z = ground.plane_z(float(center[0]), float(center[1]))
        used_plane = True
    if ground_z is None:
        return box, False

    top = box.top_z
    height = max(top - ground_z, DEGENERATE_WIDTH)
    if enforce_height_floor and prior is not None:
        height = max(height, 0.8 * prior.height)
    new_center = np.array([center[0], center[1], ground_z + height / 2.0])
    return OrientedBox3(center=new_center, length=box.length, width=box.width,
                        height=height, yaw=box.yaw), used_plane
