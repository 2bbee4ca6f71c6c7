"""Synthetic LiDAR scenes with exact ground truth.

A scene is ray-cast on a fixed azimuth/elevation grid from a moving sensor.
Rays stop at the nearest surface among the ground plane, object boxes, and
occluding walls, so a box face only ever receives points when its outward
normal faces the sensor. Range noise is applied along the ray, which keeps
every point on its original line of sight. Cameras render exact 2D cues
from the true boxes: the cue box is the tight hull of the projected
corners, the mask is that hull filled (optionally dilated a little to mimic
imprecise mask boundaries, which is what leaks background points into an
instance). Everything derives from one seeded generator, so a given spec
and seed always produce byte-identical files.

Point provenance is written beside each sweep (labels.bin, int32): the
owning track id, or -1 for ground and -2 for walls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import AxisAlignedBox2, CameraModel, OrientedBox3, Pose
from .scene_io import (FORMAT_VERSION, Annotation, AnnotationSet, CameraView,
                       ClassPrior, FrameBundle, InstanceCue2D, SceneFormatError,
                       default_priors, mask_bbox, rle_encode, save_sequence,
                       write_annotations, write_priors, read_annotations,
                       load_sequence)

GROUND_LABEL = -1
WALL_LABEL = -2

TRUTH_FILE = "truth_annotations.json"
SPEC_FILE = "scene_spec.json"
PRIORS_FILE = "priors.json"


@dataclass
class ObjectSpec:
    """One box-shaped actor. Parked objects stay put; moving ones translate
    by velocity_xy per frame (the true yaw follows the velocity direction
    unless the object is parked)."""

    track_id: int
    class_label: str
    center: tuple[float, float, float]
    length: float
    width: float
    height: float
    yaw: float = 0.0
    velocity_xy: tuple[float, float] = (0.0, 0.0)

    def is_moving(self) -> bool:
        return math.hypot(*self.velocity_xy) > 1e-9

    def box_at(self, frame: int) -> OrientedBox3:
        cx = self.center[0] + self.velocity_xy[0] * frame
        cy = self.center[1] + self.velocity_xy[1] * frame
        yaw = self.yaw
        if self.is_moving():
            yaw = math.atan2(self.velocity_xy[1], self.velocity_xy[0])
        return OrientedBox3(center=np.array([cx, cy, self.center[2]]),
                            length=self.length, width=self.width,
                            height=self.height, yaw=yaw)


@dataclass
class WallSpec:
    """A vertical rectangular slab from (x1, y1) to (x2, y2), spanning
    z in [z_min, z_max]. An optional gap cuts a rectangular hole: the gap
    spans [gap_lo, gap_hi] measured along the wall and the full height."""

    x1: float
    y1: float
    x2: float
    y2: float
    z_min: float = 0.0
    z_max: float = 3.0
    gap: tuple[float, float] | None = None


@dataclass
class CameraSpec:
    """A pinhole camera rigidly mounted on the sensor, looking along a yaw
    direction in the sensor frame."""

    name: str
    yaw_deg: float = 0.0
    fx: float = 500.0
    fy: float = 500.0
    width: int = 800
    height: int = 450
    pitch_deg: float = 0.0


@dataclass
class SceneSpec:
    """Full description of a synthetic scene."""

    seed: int = 0
    n_frames: int = 10
    ego_start: tuple[float, float, float] = (0.0, 0.0, 1.8)
    ego_velocity_xy: tuple[float, float] = (0.0, 0.0)
    objects: list[ObjectSpec] = field(default_factory=list)
    walls: list[WallSpec] = field(default_factory=list)
    cameras: list[CameraSpec] = field(default_factory=lambda: [CameraSpec(name="cam0")])
    azimuth_start_deg: float = -180.0
    azimuth_stop_deg: float = 180.0
    azimuth_step_deg: float = 0.4
    elevation_start_deg: float = -14.0
    elevation_stop_deg: float = 6.0
    elevation_step_deg: float = 0.8
    max_range: float = 80.0
    noise_sigma: float = 0.0
    ground_extent: float = 120.0
    mask_dilation_px: int = 1
    min_truth_points: int = 5

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ValueError("n_frames must be at least 1")
        if self.azimuth_step_deg <= 0 or self.elevation_step_deg <= 0:
            raise ValueError("angular steps must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not (0 <= self.mask_dilation_px <= 2):
            raise ValueError("mask_dilation_px must be 0, 1, or 2 to keep cue "
                             "masks consistent with their boxes")
        ids = [o.track_id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object track_ids must be unique")

    def to_json(self) -> str:
        return json.dumps({"format_version": FORMAT_VERSION, **asdict(self)},
                          indent=1)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        payload = json.loads(text)
        payload.pop("format_version", None)
        payload["objects"] = [ObjectSpec(**{**o, "center": tuple(o["center"]),
                                            "velocity_xy": tuple(o["velocity_xy"])})
                              for o in payload.get("objects", [])]
        payload["walls"] = [WallSpec(**{**w, "gap": tuple(w["gap"]) if w.get("gap") else None})
                            for w in payload.get("walls", [])]
        payload["cameras"] = [CameraSpec(**c) for c in payload.get("cameras", [])]
        for key in ("ego_start", "ego_velocity_xy"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return SceneSpec(**payload)


# ---------------------------------------------------------------------------
# Ray casting


def _ray_directions(spec: SceneSpec) -> np.ndarray:
    az = np.deg2rad(np.arange(spec.azimuth_start_deg, spec.azimuth_stop_deg,
                              spec.azimuth_step_deg))
    el = np.deg2rad(np.arange(spec.elevation_start_deg,
                              spec.elevation_stop_deg + 1e-9,
                              spec.elevation_step_deg))
    azg, elg = np.meshgrid(az, el, indexing="ij")
    cos_el = np.cos(elg)
    dirs = np.stack([cos_el * np.cos(azg), cos_el * np.sin(azg), np.sin(elg)],
                    axis=-1)
    return dirs.reshape(-1, 3)


def _intersect_ground(origin: np.ndarray, dirs: np.ndarray, extent: float,
                      ego_xy: np.ndarray) -> np.ndarray:
    t = np.full(len(dirs), np.inf)
    dz = dirs[:, 2]
    hit = dz < -1e-9
    t_hit = -origin[2] / dz[hit]
    pts_xy = origin[None, :2] + dirs[hit, :2] * t_hit[:, None]
    inside = np.linalg.norm(pts_xy - ego_xy[None, :], axis=1) <= extent
    vals = np.where(inside, t_hit, np.inf)
    t[hit] = vals
    return t


def _intersect_box(origin: np.ndarray, dirs: np.ndarray, box: OrientedBox3
                   ) -> np.ndarray:
    """Entry distance of each ray into the box (slab method), inf if missed."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - box.center)
    d = dirs @ rot.T
    half = np.array([box.length / 2.0, box.width / 2.0, box.height / 2.0])
    t_near = np.full(len(dirs), -np.inf)
    t_far = np.full(len(dirs), np.inf)
    for axis in range(3):
        da = d[:, axis]
        oa = o[axis]
        parallel = np.abs(da) < 1e-12
        t1 = (-half[axis] - oa) / np.where(parallel, 1.0, da)
        t2 = (half[axis] - oa) / np.where(parallel, 1.0, da)
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        lo[parallel] = -np.inf
        hi[parallel] = np.inf
        outside = parallel & (np.abs(oa) > half[axis])
        lo[outside] = np.inf
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    t = np.where((t_near <= t_far) & (t_near > 1e-6), t_near, np.inf)
    return t


def _intersect_wall(origin: np.ndarray, dirs: np.ndarray, wall: WallSpec
                    ) -> np.ndarray:
    p1 = np.array([wall.x1, wall.y1])
    p2 = np.array([wall.x2, wall.y2])
    along = p2 - p1
    span = float(np.linalg.norm(along))
    t = np.full(len(dirs), np.inf)
    if span < 1e-9:
        return t
    along /= span
    normal = np.array([-along[1], along[0]])
    denom = dirs[:, :2] @ normal
    ok = np.abs(denom) > 1e-12
    t_hit = ((p1 - origin[:2]) @ normal) / denom[ok]
    pts = origin[None, :] + dirs[ok] * t_hit[:, None]
    u = (pts[:, :2] - p1) @ along
    good = (t_hit > 1e-6) & (u >= 0.0) & (u <= span) \
        & (pts[:, 2] >= wall.z_min) & (pts[:, 2] <= wall.z_max)
    if wall.gap is not None:
        lo, hi = wall.gap
        good &= ~((u >= lo) & (u <= hi))
    vals = np.where(good, t_hit, np.inf)
    t[ok] = vals
    return t


def _cast_frame(spec: SceneSpec, frame: int, origin: np.ndarray,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Cast all rays for one sweep. Returns global points and labels."""
    dirs = _ray_directions(spec)
    best_t = _intersect_ground(origin, dirs, spec.ground_extent, origin[:2])
    labels = np.where(np.isfinite(best_t), GROUND_LABEL, np.iinfo(np.int32).min)
    for wall in spec.walls:
        t = _intersect_wall(origin, dirs, wall)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        labels = np.where(closer, WALL_LABEL, labels)
    for obj in spec.objects:
        t = _intersect_box(origin, dirs, obj.box_at(frame))
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        labels = np.where(closer, obj.track_id, labels)
    hit = np.isfinite(best_t) & (best_t <= spec.max_range)
    t = best_t[hit]
    if spec.noise_sigma > 0:
        t = t + rng.normal(0.0, spec.noise_sigma, size=len(t))
        t = np.maximum(t, 1e-3)
    points = origin[None, :] + dirs[hit] * t[:, None]
    return points, labels[hit].astype(np.int32)


# ---------------------------------------------------------------------------
# Camera rendering


def _camera_model(cam: CameraSpec) -> CameraModel:
    """Build sensor-to-camera extrinsics for a camera yawed in the sensor frame."""
    yaw = math.radians(cam.yaw_deg)
    pitch = math.radians(cam.pitch_deg)
    # camera axes expressed in the sensor frame
    fwd = np.array([math.cos(yaw) * math.cos(pitch),
                    math.sin(yaw) * math.cos(pitch),
                    math.sin(pitch)])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    rot_cam_from_sensor = np.stack([right, down, fwd])
    return CameraModel(fx=cam.fx, fy=cam.fy, cx=cam.width / 2.0,
                       cy=cam.height / 2.0, width=cam.width, height=cam.height,
                       extrinsics=Pose(rot_cam_from_sensor, np.zeros(3)))


def _fill_convex_hull(px: np.ndarray, width: int, height: int) -> np.ndarray:
    """Rasterize the convex hull of 2D pixel points onto an image grid."""
    mask = np.zeros((height, width), dtype=bool)
    if len(px) < 3:
        for x, y in px:
            xi, yi = int(math.floor(x)), int(math.floor(y))
            if 0 <= xi < width and 0 <= yi < height:
                mask[yi, xi] = True
        return mask
    hull = _convex_hull(px)
    if len(hull) < 3:
        return mask
    x0 = max(int(math.floor(hull[:, 0].min())), 0)
    x1 = min(int(math.ceil(hull[:, 0].max())) + 1, width)
    y0 = max(int(math.floor(hull[:, 1].min())), 0)
    y1 = min(int(math.ceil(hull[:, 1].max())) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return mask
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones(gx.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % n]
        inside &= (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) >= 0.0
    mask[y0:y1, x0:x1] = inside
    return mask


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise."""
    pts = sorted({(float(x), float(y)) for x, y in points})
    if len(pts) <= 2:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def _render_cues(spec: SceneSpec, frame: int, pose: Pose,
                 cameras: list[tuple[CameraSpec, CameraModel]],
                 visible_counts: dict[int, int]) -> list[CameraView]:
    views = []
    pose_inv = pose.inverse()
    for cam_spec, camera in cameras:
        cues = []
        for obj in sorted(spec.objects, key=lambda o: o.track_id):
            if visible_counts.get(obj.track_id, 0) < 1:
                continue
            box = obj.box_at(frame)
            corners_sensor = pose_inv.apply(box.corners())
            uv, depth, in_image = camera.project_points(corners_sensor)
            front = depth > 0
            if not in_image.any() or front.sum() < 3:
                continue
            mask = _fill_convex_hull(uv[front], camera.width, camera.height)
            if not mask.any():
                continue
            bbox = mask_bbox(mask)
            if bbox is None or bbox.width < 2 or bbox.height < 2:
                continue
            if spec.mask_dilation_px > 0:
                span = np.arange(-spec.mask_dilation_px, spec.mask_dilation_px + 1)
                xx, yy = np.meshgrid(span, span)
                disk = (xx * xx + yy * yy) <= spec.mask_dilation_px ** 2
                mask = ndimage.binary_dilation(mask, structure=disk)
            score = max(0.05, min(1.0, 0.99 - 0.003 * obj.track_id))
            cues.append(InstanceCue2D(
                track_id=obj.track_id,
                class_label=obj.class_label,
                score=round(score, 6),
                box2d=bbox,
                mask_rle=rle_encode(mask),
            ))
        views.append(CameraView(name=cam_spec.name, camera=camera, cues=cues))
    return views


# ---------------------------------------------------------------------------
# Generation


@dataclass
class GeneratedScene:
    frames: list[FrameBundle]
    truth: AnnotationSet
    labels: dict[int, np.ndarray]
    scene_dir: Path


def generate(spec: SceneSpec, out_dir: str | Path,
             priors: dict[str, ClassPrior] | None = None) -> GeneratedScene:
    """Generate a scene on disk: sweeps, cues, truth annotations, labels."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    cameras = [(c, _camera_model(c)) for c in spec.cameras]
    if priors is None:
        priors = default_priors()

    frames: list[FrameBundle] = []
    labels_by_frame: dict[int, np.ndarray] = {}
    truth: list[Annotation] = []
    for t in range(spec.n_frames):
        origin = np.array([spec.ego_start[0] + spec.ego_velocity_xy[0] * t,
                           spec.ego_start[1] + spec.ego_velocity_xy[1] * t,
                           spec.ego_start[2]])
        pose = Pose(np.eye(3), origin)
        points_global, labels = _cast_frame(spec, t, origin, rng)
        points_sensor = pose.inverse().apply(points_global) if len(points_global) \
            else points_global
        visible_counts = {int(tid): int(n) for tid, n in
                          zip(*np.unique(labels[labels >= 0], return_counts=True))}
        views = _render_cues(spec, t, pose, cameras, visible_counts)
        frames.append(FrameBundle(index=t, ego_pose=pose,
                                  points=points_sensor, cameras=views))
        labels_by_frame[t] = labels

        for obj in sorted(spec.objects, key=lambda o: o.track_id):
            if visible_counts.get(obj.track_id, 0) < spec.min_truth_points:
                continue
            box = obj.box_at(t)
            prior = priors.get(obj.class_label.lower())
            motion = "dynamic" if obj.is_moving() else "static"
            if prior is not None and prior.rigidity == "deformable":
                physical = "deformable"
            elif motion == "static":
                physical = "static_rigid"
            else:
                physical = "dynamic_rigid"
            truth.append(Annotation(
                frame=t, track_id=obj.track_id, class_label=obj.class_label,
                box=box, motion_state=motion, physical_type=physical,
                provenance="synthetic/truth", score=1.0,
                ego_distance=float(np.linalg.norm(box.center - origin))))

    save_sequence(frames, out_dir)
    for t, labels in labels_by_frame.items():
        labels.astype("<i4").tofile(out_dir / "frames" / str(t) / "labels.bin")
    truth_set = AnnotationSet(annotations=truth, frames=list(range(spec.n_frames)))
    write_annotations(truth, out_dir / TRUTH_FILE, frames=truth_set.frames)
    write_priors(priors, out_dir / PRIORS_FILE)
    with open(out_dir / SPEC_FILE, "w", encoding="utf-8") as fh:
        fh.write(spec.to_json())
        fh.write("\n")
    return GeneratedScene(frames=frames, truth=truth_set,
                          labels=labels_by_frame, scene_dir=out_dir)


def load_labels(scene_dir: str | Path) -> dict[int, np.ndarray]:
    scene_dir = Path(scene_dir)
    labels = {}
    for fdir in (scene_dir / "frames").iterdir():
        if fdir.is_dir():
            path = fdir / "labels.bin"
            if path.exists():
                labels[int(fdir.name)] = np.fromfile(path, dtype="<i4")
    return labels


# ---------------------------------------------------------------------------
# Self-check oracle


@dataclass
class OracleReport:
    ok: bool
    checks: int
    violations: list[str]


def oracle_check(scene_dir: str | Path) -> OracleReport:
    """Verify a generated scene against its own ground truth.

    Checks: files load cleanly; per-sweep label sidecars align with the
    point counts; every labeled object point lies near its true box (inside,
    with slack for range noise); every labeled object point that projects
    into a camera showing a cue for that track lands on the cue mask; and in
    noise-free scenes, points only ever sit on faces whose outward normal
    faces the sensor.
    """
    scene_dir = Path(scene_dir)
    violations: list[str] = []
    checks = 0
    try:
        frames = load_sequence(scene_dir)
        truth = read_annotations(scene_dir / TRUTH_FILE)
        labels = load_labels(scene_dir)
        with open(scene_dir / SPEC_FILE, "r", encoding="utf-8") as fh:
            spec = SceneSpec.from_json(fh.read())
    except (SceneFormatError, OSError, ValueError, KeyError) as exc:
        return OracleReport(ok=False, checks=0, violations=[f"load failed: {exc}"])

    noise_free = spec.noise_sigma == 0.0
    slack = 1e-6 + 4.0 * spec.noise_sigma
    truth_by_frame: dict[int, dict[int, Annotation]] = {}
    for ann in truth.annotations:
        truth_by_frame.setdefault(ann.frame, {})[ann.track_id] = ann

    for frame in frames:
        lab = labels.get(frame.index)
        if lab is None or len(lab) != len(frame.points):
            violations.append(f"frame {frame.index}: labels missing or misaligned")
            continue
        pts_global = frame.ego_pose.apply(frame.points) if len(frame.points) else frame.points
        origin = frame.ego_pose.translation
        for track_id in np.unique(lab[lab >= 0]):
            ann = truth_by_frame.get(frame.index, {}).get(int(track_id))
            if ann is None:
                continue  # below the min_truth_points floor
            sel = lab == track_id
            obj_pts = pts_global[sel]
            checks += 1
            # containment within the true box, padded by the noise slack
            grown = OrientedBox3(center=ann.box.center,
                                 length=ann.box.length + 2 * slack,
                                 width=ann.box.width + 2 * slack,
                                 height=ann.box.height + 2 * slack,
                                 yaw=ann.box.yaw)
            outside = ~grown.contains_points(obj_pts)
            if outside.any():
                violations.append(
                    f"frame {frame.index} track {track_id}: "
                    f"{int(outside.sum())} points outside the true box")
            if noise_free:
                checks += 1
                bad = _visibility_violations(obj_pts, ann.box, origin)
                if bad:
                    violations.append(
                        f"frame {frame.index} track {track_id}: {bad} points on "
                        "faces turned away from the sensor")
            for view in frame.cameras:
                cue = next((c for c in view.cues if c.track_id == track_id), None)
                if cue is None:
                    continue
                checks += 1
                pts_sensor = frame.points[sel]
                uv, _, in_image = view.camera.project_points(pts_sensor)
                mask = cue.mask()
                miss = 0
                for ok_flag, (u, v) in zip(in_image, uv):
                    if not ok_flag:
                        continue
                    if not mask[int(v), int(u)]:
                        miss += 1
                if miss:
                    violations.append(
                        f"frame {frame.index} {view.name} track {track_id}: "
                        f"{miss} points project off the cue mask")

    for ann in truth.annotations:
        checks += 1
        if ann.ego_distance is None or ann.ego_distance < 0:
            violations.append(f"truth annotation frame {ann.frame} "
                              f"track {ann.track_id}: bad ego_distance")
    return OracleReport(ok=not violations, checks=checks, violations=violations)


def _visibility_violations(points: np.ndarray, box: OrientedBox3,
                           origin: np.ndarray) -> int:
    """Count points sitting on a box face whose normal points away from the sensor."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    local = (points - box.center) @ rot.T
    origin_local = rot @ (origin - box.center)
    half = np.array([box.length / 2.0, box.width / 2.0, box.height / 2.0])
    # face membership: the axis where the point sits closest to a face plane
    gaps = half[None, :] - np.abs(local)
    face_axis = np.argmin(gaps, axis=1)
    face_sign = np.sign(local[np.arange(len(local)), face_axis])
    face_sign[face_sign == 0] = 1.0
    # sensor must be on the outer side of that face plane
    sensor_coord = origin_local[face_axis]
    boundary = face_sign * half[face_axis]
    outward = (sensor_coord - boundary) * face_sign
    return int((outward < -1e-9).sum())
