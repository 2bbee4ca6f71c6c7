"""Motion state and physical type of tracked instances.

The persistence score asks, for each instance point, how evenly its spatial
neighborhood is populated across the scene's sweeps: a point on a parked
object has neighbors in every sweep (flat count profile, entropy near 1),
a point on a moving object only near its own sweep (peaked profile, entropy
near 0). The per-instance score is the median over points; the static call
additionally requires the centroid track to stay put.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gridindex import GridIndex
from .scene_io import ClassPrior

GENERIC_PRIOR = ClassPrior(class_label="unknown", length=1.0, width=1.0,
                           height=1.0, rigidity="rigid")

MOTION_UNKNOWN = "unknown"


@dataclass
class PersistenceScore:
    per_point: np.ndarray
    aggregate: float
    usable: bool
    sampled_frames: list[int]


def _entropy_normalized(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 1:
        return 0.0
    q = counts[counts > 0] / total
    h = float(-(q * np.log(q)).sum())
    denom = math.log(len(counts))
    if denom <= 0:
        return 0.0
    return h / denom


def persistence_scores(
    points_global: np.ndarray,
    frame_clouds: dict[int, "GridIndex | np.ndarray"],
    radius: float = 0.3,
    window: int = 10,
) -> PersistenceScore:
    """Neighborhood-persistence score of one instance.

    points_global: the instance's points in the global frame.
    frame_clouds: per sweep, the global-frame working cloud (or a prebuilt
    GridIndex over it at cell size `radius`). `window` sweeps are sampled
    with an even stride across the available range. With fewer than two
    sweeps the score is unusable and the instance should be treated as
    motion-unknown.
    """
    pts = np.asarray(points_global, dtype=np.float64).reshape(-1, 3)
    frames = sorted(frame_clouds)
    if len(frames) < 2 or len(pts) == 0:
        return PersistenceScore(per_point=np.zeros(len(pts)), aggregate=0.0,
                                usable=False, sampled_frames=[])
    k = min(window, len(frames))
    picks = np.unique(np.round(np.linspace(0, len(frames) - 1, k)).astype(int))
    sampled = [frames[i] for i in picks]

    counts = np.zeros((len(pts), len(sampled)), dtype=np.int64)
    for col, fidx in enumerate(sampled):
        cloud = frame_clouds[fidx]
        grid = cloud if isinstance(cloud, GridIndex) else GridIndex(
            np.asarray(cloud, dtype=np.float64), cell_size=radius)
        counts[:, col] = grid.count_batch(pts, radius)

    per_point = np.fromiter(
        (_entropy_normalized(row) for row in counts), dtype=np.float64, count=len(pts))
    return PersistenceScore(per_point=per_point, aggregate=float(np.median(per_point)),
                            usable=True, sampled_frames=sampled)


def centroid_displacement(centroids: dict[int, np.ndarray]) -> float | None:
    """Net displacement of the centroid track (first to last sweep), in BEV."""
    if len(centroids) < 2:
        return None
    frames = sorted(centroids)
    first = np.asarray(centroids[frames[0]], dtype=np.float64)
    last = np.asarray(centroids[frames[-1]], dtype=np.float64)
    return float(np.linalg.norm(last[:2] - first[:2]))


def classify_motion(
    score: PersistenceScore | None,
    centroids: dict[int, np.ndarray],
    pp_threshold: float = 0.7,
    displacement_min: float = 0.5,
) -> str:
    """Return 'static', 'dynamic', or 'unknown'.

    Static requires both a usable persistence score at or above pp_threshold
    and a centroid track that moved less than displacement_min overall. A
    missing score with a moving centroid is still a confident 'dynamic';
    with neither signal the instance is 'unknown' (callers route unknown
    through the dynamic path as the conservative choice).
    """
    displacement = centroid_displacement(centroids)
    score_ok = score is not None and score.usable
    if not score_ok and displacement is None:
        return MOTION_UNKNOWN
    if displacement is not None and displacement >= displacement_min:
        return "dynamic"
    if score_ok and score.aggregate >= pp_threshold:
        return "static"
    return "dynamic"


def assign_physical_type(
    class_label: str,
    motion_state: str,
    priors: dict[str, ClassPrior],
) -> tuple[str, ClassPrior, bool]:
    """Map (class, motion) to a physical type and its size prior.

    Deformable classes dominate regardless of motion. Unknown classes get
    the generic rigid 1x1x1 prior and a warning flag; unknown motion routes
    rigid objects to the dynamic path.
    """
    label = class_label.strip().lower()
    prior = priors.get(label)
    unknown_class = prior is None
    if unknown_class:
        prior = GENERIC_PRIOR
    if prior.rigidity == "deformable":
        return "deformable", prior, unknown_class
    if motion_state == "static":
        return "static_rigid", prior, unknown_class
    return "dynamic_rigid", prior, unknown_class
