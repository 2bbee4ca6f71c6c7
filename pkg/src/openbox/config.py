"""Pipeline configuration: every tunable threshold in one place.

Values can come from a JSON file (see PipelineConfig.from_file), be
overridden per key, and are dumped next to every run's outputs so results
are reproducible from the artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class PipelineConfig:
    # ground removal
    ground_threshold: float = 0.1       # RANSAC inlier distance, metres
    ground_iterations: int = 200        # RANSAC sample draws
    z_floor: float = 0.05               # drop points closer to the ground than this

    # clustering
    cluster_eps: float = 0.7            # density neighborhood radius
    cluster_min_pts: int = 5            # density core threshold

    # cluster-to-instance refinement
    refine_alpha: float = 0.3           # cluster-side overlap ratio bound
    refine_beta: float = 0.2            # instance-side inclusion ratio bound
    refine_delta: float = 0.1           # point-to-set inclusion radius
    symmetric_inclusion: bool = False   # count the inclusion ratio from the instance side

    # persistence / motion
    pp_radius: float = 0.3              # neighbor radius for persistence counts
    pp_window: int = 10                 # sweeps sampled across the scene
    pp_threshold: float = 0.7           # static requires at least this score
    displacement_min: float = 0.5       # and less net centroid travel than this

    # surface and box fitting
    vote_tau: float = 0.15              # surface voting ball radius
    coverage_gamma: float = 0.8         # normal alignment bound for face coverage
    coverage_min_vertices: int = 5      # vertices needed to call a face covered
    yaw_step_deg: float = 0.5           # L-shape direction grid step
    closeness_floor: float = 0.01       # per-point distance floor in the criterion
    voxel_size: float = 0.1             # TSDF voxel edge
    truncation: float = 0.3             # TSDF truncation band
    size_ratio: float = 0.8             # dimensions below ratio*prior trigger resizing
    iou_aggregate: str = "mean"         # cue agreement aggregation: mean | max
    min_surface_points: int = 10        # fewer aggregated points skip the surface path
    min_fit_points: int = 3             # fewer per-sweep points skip that sweep
    min_dynamic_displacement: float = 0.1   # per-sweep travel for a usable heading
    height_percentile: float = 0.01     # ground level rank in the local neighborhood
    height_min_points: int = 10         # neighborhood size demanded by the rank rule
    background_margin: float = 2.0      # background gathered within this of the instance

    # execution
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.iou_aggregate not in ("mean", "max"):
            raise ValueError("iou_aggregate must be 'mean' or 'max'")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        for name in ("ground_threshold", "z_floor", "cluster_eps", "refine_delta",
                     "pp_radius", "vote_tau", "voxel_size", "truncation",
                     "yaw_step_deg", "closeness_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name, lo, hi in (("refine_alpha", 0.0, 1.0), ("refine_beta", 0.0, 1.0),
                             ("pp_threshold", 0.0, 1.0), ("size_ratio", 0.0, 1.0),
                             ("coverage_gamma", -1.0, 1.0),
                             ("height_percentile", 0.0, 1.0)):
            if not (lo <= getattr(self, name) <= hi):
                raise ValueError(f"{name} must lie in [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(values: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return PipelineConfig(**values)

    @staticmethod
    def from_file(path: str | Path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if not isinstance(payload, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return PipelineConfig.from_dict(payload)

    def replaced(self, **overrides) -> "PipelineConfig":
        return dataclasses.replace(self, **overrides)

    def dump(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def parse_override(text: str) -> tuple[str, object]:
    """Parse a key=value override; values go through JSON first, then string."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


# One-line description per config key; the CLI help is generated from this.
# test_cli checks the keys stay in sync with the dataclass fields.
CONFIG_DOC: dict[str, str] = {
    "ground_threshold": "RANSAC inlier distance for the ground plane, metres",
    "ground_iterations": "RANSAC sample draws for the ground plane",
    "z_floor": "drop points closer to the fitted ground than this, metres",
    "cluster_eps": "density clustering neighborhood radius, metres",
    "cluster_min_pts": "density clustering core-point threshold",
    "refine_alpha": "cluster-side overlap ratio bound for refinement",
    "refine_beta": "instance-side inclusion ratio bound for refinement",
    "refine_delta": "point-to-set inclusion radius for refinement, metres",
    "symmetric_inclusion": "count the inclusion ratio from the instance side",
    "pp_radius": "neighbor radius for persistence counts, metres",
    "pp_window": "sweeps sampled across the scene for persistence",
    "pp_threshold": "minimum persistence score for a static call",
    "displacement_min": "net centroid travel at or above this is dynamic, metres",
    "vote_tau": "surface voting ball radius, metres",
    "coverage_gamma": "normal alignment bound for face coverage",
    "coverage_min_vertices": "vertices needed to call a face covered",
    "yaw_step_deg": "box direction grid step, degrees",
    "closeness_floor": "per-point distance floor in the direction criterion",
    "voxel_size": "signed-distance-field voxel edge, metres",
    "truncation": "signed-distance-field truncation band, metres",
    "size_ratio": "dimensions below ratio times the prior trigger resizing",
    "iou_aggregate": "cue agreement aggregation: mean or max",
    "min_surface_points": "fewer aggregated points skip the surface path",
    "min_fit_points": "fewer per-sweep points skip that sweep",
    "min_dynamic_displacement": "per-sweep travel needed for a usable heading, metres",
    "height_percentile": "ground level rank in the local neighborhood",
    "height_min_points": "neighborhood size demanded by the rank rule",
    "background_margin": "background gathered within this of the instance, metres",
    "seed": "random seed for every stochastic step",
    "workers": "parallel workers over tracks (results identical for any count)",
}
