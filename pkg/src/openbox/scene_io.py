"""Scene, cue, prior, and annotation formats.

On-disk layout of a scene directory:

    scene/
      frames/<t>/points.bin     float32 little-endian x,y,z triples (sensor frame)
      frames/<t>/pose.json      sensor-to-global rigid transform, 4x4 row-major
      frames/<t>/cam<j>/calib.json   pinhole intrinsics + sensor-to-camera extrinsics
      frames/<t>/cam<j>/cues.json    2D instance cues with run-length masks

Priors and annotations are standalone JSON files. Every file carries a
format_version field; loading is eager and fails with a SceneFormatError
naming the offending file rather than propagating bad data downstream.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AxisAlignedBox2, CameraModel, OrientedBox3, Pose, reorthonormalize

FORMAT_VERSION = 1

MOTION_STATES = ("static", "dynamic")
PHYSICAL_TYPES = ("static_rigid", "dynamic_rigid", "deformable")
RIGIDITIES = ("rigid", "deformable")

# Pose matrices are re-orthonormalized below this deviation and rejected above it.
POSE_ORTHO_TOLERANCE = 1e-3
# A cue mask may poke at most this many pixels outside its 2D box.
MASK_BOX_SLACK_PX = 2


class SceneFormatError(ValueError):
    """Raised for malformed or inconsistent scene files; message names the file."""


class NoFramesError(SceneFormatError):
    """Raised when a scene directory holds no frames at all."""


# ---------------------------------------------------------------------------
# Run-length masks (uncompressed counts, column-major, leading zero run)


def rle_encode(mask: np.ndarray) -> dict:
    """Encode a boolean (H, W) mask as column-major run lengths.

    The counts list always starts with the number of leading zeros (possibly
    0) and alternates zero/one runs from there.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    flat = mask.astype(bool).flatten(order="F")
    counts: list[int] = []
    if flat.size == 0:
        return {"size": [0, 0], "counts": []}
    changes = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        counts.append(0)
    counts.extend(int(r) for r in runs)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    """Decode run lengths produced by rle_encode back to a boolean (H, W) mask."""
    h, w = (int(v) for v in rle["size"])
    counts = [int(c) for c in rle["counts"]]
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
    if any(c < 0 for c in counts):
        raise ValueError("RLE counts must be non-negative")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    return flat.reshape((h, w), order="F")


def rle_popcount(rle: dict) -> int:
    """Number of set pixels, straight from the odd-indexed runs."""
    counts = rle["counts"]
    return int(sum(counts[1::2]))


def mask_bbox(mask: np.ndarray) -> AxisAlignedBox2 | None:
    """Tight pixel bounding box of the set pixels; None for an empty mask."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return AxisAlignedBox2(float(xs.min()), float(ys.min()),
                           float(xs.max() + 1), float(ys.max() + 1))


# ---------------------------------------------------------------------------
# Core record types


@dataclass(frozen=True)
class InstanceCue2D:
    """One 2D instance cue: class, track, detection score, box, RLE mask."""

    track_id: int
    class_label: str
    score: float
    box2d: AxisAlignedBox2
    mask_rle: dict

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_label", self.class_label.strip().lower())
        if not self.class_label:
            raise ValueError("cue class_label must be non-empty")
        if self.track_id < 0:
            raise ValueError("track_id must be non-negative")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"cue score must be in [0, 1], got {self.score}")
        counts = self.mask_rle.get("counts", [])
        h, w = self.mask_rle.get("size", (0, 0))
        if sum(int(c) for c in counts) != int(h) * int(w):
            raise ValueError("cue mask RLE does not cover the stated size")

    def mask(self) -> np.ndarray:
        return rle_decode(self.mask_rle)


@dataclass
class CameraView:
    """A calibrated camera and its cues for one frame."""

    name: str
    camera: CameraModel
    cues: list[InstanceCue2D] = field(default_factory=list)


@dataclass
class FrameBundle:
    """One LiDAR sweep: timestamp index, ego pose, points, per-camera cues."""

    index: int
    ego_pose: Pose
    points: np.ndarray
    cameras: list[CameraView] = field(default_factory=list)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"frame points must be (N, 3), got {pts.shape}")
        self.points = pts


@dataclass(frozen=True)
class ClassPrior:
    """Typical object size and rigidity for one class label."""

    class_label: str
    length: float
    width: float
    height: float
    rigidity: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_label", self.class_label.strip().lower())
        if not self.class_label:
            raise ValueError("prior class_label must be non-empty")
        for name in ("length", "width", "height"):
            if getattr(self, name) <= 0:
                raise ValueError(f"prior {name} must be positive")
        if self.rigidity not in RIGIDITIES:
            raise ValueError(f"rigidity must be one of {RIGIDITIES}, got {self.rigidity!r}")


@dataclass(frozen=True)
class Annotation:
    """One labeled box: frame, track, class, box, motion, type, provenance.

    ego_distance is the range from the ego position at this frame to the box
    center; the evaluator uses it for distance-band bucketing. score ranks
    predictions (references keep the default 1.0).
    """

    frame: int
    track_id: int
    class_label: str
    box: OrientedBox3
    motion_state: str
    physical_type: str
    provenance: str
    score: float = 1.0
    ego_distance: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_label", self.class_label.strip().lower())
        if self.motion_state not in MOTION_STATES:
            raise ValueError(f"motion_state must be one of {MOTION_STATES}")
        if self.physical_type not in PHYSICAL_TYPES:
            raise ValueError(f"physical_type must be one of {PHYSICAL_TYPES}")
        if self.physical_type == "static_rigid" and self.motion_state != "static":
            raise ValueError("static_rigid requires motion_state 'static'")
        if self.physical_type == "dynamic_rigid" and self.motion_state != "dynamic":
            raise ValueError("dynamic_rigid requires motion_state 'dynamic'")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("annotation score must be in [0, 1]")


@dataclass
class AnnotationSet:
    """Annotations plus the frame indices the file claims to cover."""

    annotations: list[Annotation]
    frames: list[int]


# ---------------------------------------------------------------------------
# JSON helpers


def _read_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SceneFormatError(f"{path}: missing file")
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid JSON ({exc})")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def _require(payload: dict, key: str, path: Path):
    if key not in payload:
        raise SceneFormatError(f"{path}: missing key {key!r}")
    return payload[key]


def _check_version(payload: dict, path: Path) -> None:
    version = _require(payload, "format_version", path)
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"{path}: unsupported format_version {version!r}")


# ---------------------------------------------------------------------------
# Scene loading


def _load_pose(path: Path) -> Pose:
    payload = _read_json(path)
    _check_version(payload, path)
    mat = np.asarray(_require(payload, "matrix", path), dtype=np.float64)
    if mat.shape != (4, 4):
        raise SceneFormatError(f"{path}: pose matrix must be 4x4, got {mat.shape}")
    if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise SceneFormatError(f"{path}: last pose row must be [0, 0, 0, 1]")
    rot = mat[:3, :3]
    deviation = float(np.abs(rot @ rot.T - np.eye(3)).max())
    if deviation > POSE_ORTHO_TOLERANCE or np.linalg.det(rot) <= 0:
        raise SceneFormatError(f"{path}: rotation deviates from orthonormal by {deviation:.2e}")
    if deviation > 1e-9:
        rot = reorthonormalize(rot)
    return Pose(rot, mat[:3, 3])


def _load_points(path: Path) -> np.ndarray:
    if not path.exists():
        raise SceneFormatError(f"{path}: missing file")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 3 != 0:
        raise SceneFormatError(f"{path}: byte length is not a multiple of 12")
    pts = raw.reshape(-1, 3).astype(np.float64)
    if pts.size and not np.isfinite(pts).all():
        raise SceneFormatError(f"{path}: points contain non-finite values")
    return pts


def _load_camera(cam_dir: Path) -> CameraView:
    calib_path = cam_dir / "calib.json"
    payload = _read_json(calib_path)
    _check_version(payload, calib_path)
    extr = np.asarray(_require(payload, "extrinsics", calib_path), dtype=np.float64)
    if extr.shape != (4, 4):
        raise SceneFormatError(f"{calib_path}: extrinsics must be 4x4")
    rot = extr[:3, :3]
    deviation = float(np.abs(rot @ rot.T - np.eye(3)).max())
    if deviation > POSE_ORTHO_TOLERANCE or np.linalg.det(rot) <= 0:
        raise SceneFormatError(f"{calib_path}: extrinsic rotation not orthonormal")
    if deviation > 1e-9:
        rot = reorthonormalize(rot)
    try:
        camera = CameraModel(
            fx=float(_require(payload, "fx", calib_path)),
            fy=float(_require(payload, "fy", calib_path)),
            cx=float(_require(payload, "cx", calib_path)),
            cy=float(_require(payload, "cy", calib_path)),
            width=int(_require(payload, "width", calib_path)),
            height=int(_require(payload, "height", calib_path)),
            extrinsics=Pose(rot, extr[:3, 3]),
        )
    except ValueError as exc:
        raise SceneFormatError(f"{calib_path}: {exc}")

    cues_path = cam_dir / "cues.json"
    cues: list[InstanceCue2D] = []
    payload = _read_json(cues_path)
    _check_version(payload, cues_path)
    seen_tracks: set[int] = set()
    for i, entry in enumerate(_require(payload, "cues", cues_path)):
        try:
            box_vals = entry["box2d"]
            cue = InstanceCue2D(
                track_id=int(entry["track_id"]),
                class_label=str(entry["class_label"]),
                score=float(entry["score"]),
                box2d=AxisAlignedBox2(*(float(v) for v in box_vals)),
                mask_rle={"size": [int(v) for v in entry["mask"]["size"]],
                          "counts": [int(c) for c in entry["mask"]["counts"]]},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"{cues_path}: cue {i}: {exc}")
        if cue.track_id in seen_tracks:
            raise SceneFormatError(f"{cues_path}: duplicate track_id {cue.track_id}")
        seen_tracks.add(cue.track_id)
        h, w = cue.mask_rle["size"]
        if (h, w) != (camera.height, camera.width):
            raise SceneFormatError(
                f"{cues_path}: cue {i}: mask size {(h, w)} does not match image "
                f"{(camera.height, camera.width)}")
        bbox = mask_bbox(cue.mask())
        if bbox is not None:
            slack = MASK_BOX_SLACK_PX
            if (bbox.x1 < cue.box2d.x1 - slack or bbox.y1 < cue.box2d.y1 - slack
                    or bbox.x2 > cue.box2d.x2 + slack or bbox.y2 > cue.box2d.y2 + slack):
                raise SceneFormatError(
                    f"{cues_path}: cue {i}: mask extends more than {slack}px outside box2d")
        cues.append(cue)
    return CameraView(name=cam_dir.name, camera=camera, cues=cues)


def load_sequence(scene_dir: str | Path) -> list[FrameBundle]:
    """Load every frame of a scene directory, sorted by frame index."""
    scene_dir = Path(scene_dir)
    frames_dir = scene_dir / "frames"
    if not frames_dir.is_dir():
        raise NoFramesError(f"{frames_dir}: no frames found")
    frame_dirs = []
    for child in frames_dir.iterdir():
        if child.is_dir():
            if not re.fullmatch(r"\d+", child.name):
                raise SceneFormatError(f"{child}: frame directory name is not an integer")
            frame_dirs.append((int(child.name), child))
    if not frame_dirs:
        raise NoFramesError(f"{frames_dir}: no frames found")
    frame_dirs.sort()
    frames = []
    for index, fdir in frame_dirs:
        pose = _load_pose(fdir / "pose.json")
        points = _load_points(fdir / "points.bin")
        cameras = []
        cam_dirs = sorted((d for d in fdir.iterdir() if d.is_dir() and d.name.startswith("cam")),
                          key=lambda d: d.name)
        for cam_dir in cam_dirs:
            cameras.append(_load_camera(cam_dir))
        frames.append(FrameBundle(index=index, ego_pose=pose, points=points, cameras=cameras))
    return frames


# ---------------------------------------------------------------------------
# Scene writing (used by the synthetic generator and round-trip tests)


def save_sequence(frames: list[FrameBundle], scene_dir: str | Path) -> None:
    """Write frames in the on-disk scene layout."""
    scene_dir = Path(scene_dir)
    for frame in frames:
        fdir = scene_dir / "frames" / str(frame.index)
        fdir.mkdir(parents=True, exist_ok=True)
        frame.points.astype("<f4").tofile(fdir / "points.bin")
        _write_json(fdir / "pose.json", {
            "format_version": FORMAT_VERSION,
            "matrix": [[float(v) for v in row] for row in frame.ego_pose.to_matrix()],
        })
        for view in frame.cameras:
            cam_dir = fdir / view.name
            cam = view.camera
            _write_json(cam_dir / "calib.json", {
                "format_version": FORMAT_VERSION,
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": cam.width, "height": cam.height,
                "extrinsics": [[float(v) for v in row] for row in cam.extrinsics.to_matrix()],
            })
            _write_json(cam_dir / "cues.json", {
                "format_version": FORMAT_VERSION,
                "cues": [
                    {
                        "track_id": cue.track_id,
                        "class_label": cue.class_label,
                        "score": cue.score,
                        "box2d": [cue.box2d.x1, cue.box2d.y1, cue.box2d.x2, cue.box2d.y2],
                        "mask": {"size": list(cue.mask_rle["size"]),
                                 "counts": list(cue.mask_rle["counts"])},
                    }
                    for cue in view.cues
                ],
            })


# ---------------------------------------------------------------------------
# Priors


def load_priors(path: str | Path) -> dict[str, ClassPrior]:
    path = Path(path)
    payload = _read_json(path)
    _check_version(payload, path)
    priors: dict[str, ClassPrior] = {}
    for i, entry in enumerate(_require(payload, "classes", path)):
        try:
            prior = ClassPrior(
                class_label=str(entry["class_label"]),
                length=float(entry["length"]),
                width=float(entry["width"]),
                height=float(entry["height"]),
                rigidity=str(entry["rigidity"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"{path}: class {i}: {exc}")
        if prior.class_label in priors:
            raise SceneFormatError(f"{path}: duplicate class {prior.class_label!r}")
        priors[prior.class_label] = prior
    return priors


def write_priors(priors: dict[str, ClassPrior], path: str | Path) -> None:
    path = Path(path)
    _write_json(path, {
        "format_version": FORMAT_VERSION,
        "classes": [
            {
                "class_label": p.class_label,
                "length": p.length, "width": p.width, "height": p.height,
                "rigidity": p.rigidity,
            }
            for p in sorted(priors.values(), key=lambda p: p.class_label)
        ],
    })


def default_priors() -> dict[str, ClassPrior]:
    """Per-class mean sizes compiled from public driving datasets.

    These are configuration defaults, not ground truth; override with a
    priors.json tuned to the deployment domain.
    """
    rows = [
        ("car", 4.63, 1.86, 1.73, "rigid"),
        ("truck", 8.20, 2.55, 3.20, "rigid"),
        ("bus", 11.10, 2.93, 3.47, "rigid"),
        ("construction vehicle", 6.50, 2.85, 3.20, "rigid"),
        ("trailer", 10.20, 2.66, 3.60, "rigid"),
        ("barrier", 2.00, 0.60, 1.00, "rigid"),
        ("traffic cone", 0.41, 0.41, 0.70, "rigid"),
        ("fire hydrant", 0.35, 0.35, 0.80, "rigid"),
        ("motorcycle", 2.10, 0.77, 1.40, "deformable"),
        ("bicycle", 1.75, 0.60, 1.45, "deformable"),
        ("person", 0.73, 0.67, 1.72, "deformable"),
        ("pedestrian", 0.73, 0.67, 1.72, "deformable"),
        ("dog", 0.80, 0.35, 0.60, "deformable"),
        ("stroller", 0.90, 0.55, 1.10, "deformable"),
    ]
    return {r[0]: ClassPrior(*r) for r in rows}


# ---------------------------------------------------------------------------
# Annotations


def _annotation_payload(ann: Annotation) -> dict:
    entry = {
        "frame": ann.frame,
        "track_id": ann.track_id,
        "class_label": ann.class_label,
        "box": {
            "center": [float(v) for v in ann.box.center],
            "length": ann.box.length,
            "width": ann.box.width,
            "height": ann.box.height,
            "yaw": ann.box.yaw,
        },
        "motion_state": ann.motion_state,
        "physical_type": ann.physical_type,
        "provenance": ann.provenance,
        "score": ann.score,
    }
    if ann.ego_distance is not None:
        entry["ego_distance"] = ann.ego_distance
    return entry


def write_annotations(annotations: list[Annotation], path: str | Path,
                      frames: list[int] | None = None) -> None:
    """Write annotations; frames defaults to the sorted indices present."""
    if frames is None:
        frames = sorted({a.frame for a in annotations})
    ordered = sorted(annotations, key=lambda a: (a.frame, a.track_id, a.class_label))
    _write_json(Path(path), {
        "format_version": FORMAT_VERSION,
        "frames": [int(f) for f in frames],
        "annotations": [_annotation_payload(a) for a in ordered],
    })


def read_annotations(path: str | Path) -> AnnotationSet:
    path = Path(path)
    payload = _read_json(path)
    _check_version(payload, path)
    frames = [int(f) for f in _require(payload, "frames", path)]
    annotations = []
    for i, entry in enumerate(_require(payload, "annotations", path)):
        try:
            box = entry["box"]
            ann = Annotation(
                frame=int(entry["frame"]),
                track_id=int(entry["track_id"]),
                class_label=str(entry["class_label"]),
                box=OrientedBox3(
                    center=np.asarray(box["center"], dtype=np.float64),
                    length=float(box["length"]),
                    width=float(box["width"]),
                    height=float(box["height"]),
                    yaw=float(box["yaw"]),
                ),
                motion_state=str(entry["motion_state"]),
                physical_type=str(entry["physical_type"]),
                provenance=str(entry["provenance"]),
                score=float(entry.get("score", 1.0)),
                ego_distance=(float(entry["ego_distance"])
                              if "ego_distance" in entry else None),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"{path}: annotation {i}: {exc}")
        annotations.append(ann)
    return AnnotationSet(annotations=annotations, frames=frames)
