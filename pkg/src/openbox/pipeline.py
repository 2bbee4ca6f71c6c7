"""End-to-end annotation: wiring alignment, motion, and fitting together.

Stage 1 (ground removal, clustering, cue lifting, refinement) runs per
sweep; stage 2 (motion, physical type, box fitting) runs per track and fans
out over a worker pool. Every reduction is keyed and sorted afterwards, so
outputs are byte-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .alignment import (ClusterSet, GroundModel, InstancePoints, RefineResult,
                        SkipRecord, cluster, context_aware_refine, erode_mask,
                        height_floor_mask, remove_ground, unproject_instances)
from .config import PipelineConfig
from .fitting import (CueObservation, deformable_fit, dynamic_orient_and_extend,
                      extract_surface, iou_align_select, lshape_fit,
                      refine_height, resize_candidates, side_coverage,
                      size_check, surface_vote, tsdf_integrate)
from .gridindex import GridIndex
from .motion import (MOTION_UNKNOWN, assign_physical_type, classify_motion,
                     persistence_scores)
from .scene_io import Annotation, ClassPrior, FrameBundle


@dataclass
class FrameAlignment:
    """Everything stage 1 produced for one sweep."""

    frame: FrameBundle
    ground: GroundModel | None
    working_points: np.ndarray          # sensor frame, ground and floor filtered
    working_raw_indices: np.ndarray     # map into the raw sweep cloud
    clusters: ClusterSet
    instances_initial: list[InstancePoints]
    refine: RefineResult
    skips: list[SkipRecord] = field(default_factory=list)

    @property
    def instances(self) -> list[InstancePoints]:
        return self.refine.instances


def align_frame(frame: FrameBundle, cfg: PipelineConfig) -> FrameAlignment:
    """Run stage 1 on a single sweep."""
    rng = np.random.default_rng([cfg.seed, frame.index])
    skips: list[SkipRecord] = []
    nonground, nonground_idx, ground = remove_ground(
        frame.points, threshold=cfg.ground_threshold,
        iterations=cfg.ground_iterations, rng=rng)
    floor_keep = height_floor_mask(nonground, ground, cfg.z_floor)
    working = nonground[floor_keep]
    working_raw = nonground_idx[floor_keep]
    if ground is None and len(frame.points) >= 3:
        skips.append(SkipRecord(frame=frame.index, track_id=-1,
                                reason="no_ground_plane",
                                detail="RANSAC found no near-horizontal plane"))

    clusters = cluster(working, eps=cfg.cluster_eps, min_pts=cfg.cluster_min_pts)

    eroded: dict[str, list[np.ndarray | None]] = {}
    for view in frame.cameras:
        masks: list[np.ndarray | None] = []
        for cue in view.cues:
            mask, fell_back = erode_mask(cue.mask(), cue.box2d.width,
                                         cue.box2d.height)
            if fell_back:
                skips.append(SkipRecord(frame=frame.index, track_id=cue.track_id,
                                        camera=view.name, reason="erosion_fallback",
                                        detail="erosion emptied the mask; using "
                                               "its centroid pixel"))
            masks.append(mask)
        eroded[view.name] = masks

    instances, unproj_skips = unproject_instances(frame, working, eroded)
    skips.extend(unproj_skips)

    refine = context_aware_refine(
        clusters, instances, alpha=cfg.refine_alpha, beta=cfg.refine_beta,
        delta=cfg.refine_delta, symmetric_inclusion=cfg.symmetric_inclusion)
    for inst in refine.instances:
        if not inst.refined:
            skips.append(SkipRecord(frame=frame.index, track_id=inst.track_id,
                                    reason="unrefined",
                                    detail="no cluster passed the overlap test; "
                                           "keeping lifted points"))
    return FrameAlignment(frame=frame, ground=ground, working_points=working,
                          working_raw_indices=working_raw, clusters=clusters,
                          instances_initial=instances, refine=refine, skips=skips)


@dataclass
class TrackContext:
    """Aggregated stage-1 output for one track, global frame throughout."""

    track_id: int
    class_label: str
    score: float
    # per sweep: instance points in the global frame and their source rows
    frame_points: dict[int, np.ndarray]
    frame_source_rows: dict[int, np.ndarray]
    refined_any: bool
    centroids: dict[int, np.ndarray]
    observations: list[CueObservation]


@dataclass
class TrackResult:
    annotations: list[Annotation]
    skips: list[SkipRecord]
    # aggregated foreground bookkeeping for diagnostics and tests
    foreground_frames: np.ndarray | None = None
    foreground_rows: np.ndarray | None = None
    foreground_keep: np.ndarray | None = None


@dataclass
class PipelineResult:
    annotations: list[Annotation]
    skips: list[SkipRecord]
    alignments: list[FrameAlignment]
    tracks: dict[int, TrackResult]


def _collect_tracks(alignments: list[FrameAlignment]) -> dict[int, TrackContext]:
    tracks: dict[int, TrackContext] = {}
    votes: dict[int, dict[str, float]] = {}
    scores: dict[int, list[float]] = {}
    for fa in alignments:
        pose = fa.frame.ego_pose
        for inst in fa.instances:
            ctx = tracks.get(inst.track_id)
            if ctx is None:
                ctx = TrackContext(track_id=inst.track_id, class_label=inst.class_label,
                                   score=0.0, frame_points={}, frame_source_rows={},
                                   refined_any=False, centroids={}, observations=[])
                tracks[inst.track_id] = ctx
                votes[inst.track_id] = {}
                scores[inst.track_id] = []
            pts_global = pose.apply(inst.points)
            ctx.frame_points[fa.frame.index] = pts_global
            ctx.frame_source_rows[fa.frame.index] = inst.source_indices
            ctx.centroids[fa.frame.index] = pts_global.mean(axis=0)
            ctx.refined_any = ctx.refined_any or inst.refined
            weight = votes[inst.track_id]
            weight[inst.class_label] = weight.get(inst.class_label, 0.0) + inst.score
            scores[inst.track_id].append(inst.score)
    # Second pass so cues in sweeps where the track won no points still count.
    for fa in alignments:
        for view in fa.frame.cameras:
            for cue in view.cues:
                if cue.track_id in tracks:
                    tracks[cue.track_id].observations.append(CueObservation(
                        camera=view.camera, box2d=cue.box2d,
                        ego_pose=fa.frame.ego_pose))
    for tid, ctx in tracks.items():
        weight = votes[tid]
        # Score-weighted class vote, ties to the alphabetically first label.
        ctx.class_label = max(sorted(weight), key=lambda k: weight[k])
        ctx.score = float(np.mean(scores[tid]))
    return tracks


def _background_for(ctx: TrackContext, tracks: dict[int, TrackContext],
                    alignments: list[FrameAlignment], margin: float) -> np.ndarray:
    """Global points near the track that belong to anything else.

    Includes other tracks' refined points and clusters nobody claimed,
    restricted to a sphere around the track's aggregate with a margin.
    """
    own = np.concatenate(list(ctx.frame_points.values()))
    center = own.mean(axis=0)
    radius = float(np.linalg.norm(own - center, axis=1).max()) + margin
    chunks = []
    for tid, other in tracks.items():
        if tid == ctx.track_id:
            continue
        for pts in other.frame_points.values():
            chunks.append(pts)
    for fa in alignments:
        rows = fa.refine.unassigned_points
        if len(rows):
            chunks.append(fa.frame.ego_pose.apply(fa.working_points[rows]))
    if not chunks:
        return np.zeros((0, 3))
    allpts = np.concatenate(chunks)
    keep = np.linalg.norm(allpts - center, axis=1) < radius
    return allpts[keep]


def _annotate_static(ctx: TrackContext, prior: ClassPrior, cfg: PipelineConfig,
                     background: np.ndarray,
                     sensor_origins: dict[int, np.ndarray],
                     frame_clouds: dict[int, np.ndarray],
                     grounds: dict[int, GroundModel | None]) -> TrackResult:
    frames = sorted(ctx.frame_points)
    fg_frames = np.concatenate([np.full(len(ctx.frame_points[f]), f, dtype=np.int64)
                                for f in frames])
    fg_rows = np.concatenate([ctx.frame_source_rows[f] for f in frames])
    foreground = np.concatenate([ctx.frame_points[f] for f in frames])
    anchor = max(frames, key=lambda f: (len(ctx.frame_points[f]), -f))
    skips: list[SkipRecord] = []
    flags: list[str] = []
    keep = np.ones(len(foreground), dtype=bool)

    if len(foreground) < cfg.min_surface_points:
        fit = lshape_fit(foreground, yaw_step_deg=cfg.yaw_step_deg,
                         closeness_floor=cfg.closeness_floor)
        box = fit.box
        provenance = "static_rigid/lshape_fallback"
        if fit.degenerate:
            flags.append("degenerate")
        skips.append(SkipRecord(frame=anchor, track_id=ctx.track_id,
                                reason="surface_fallback",
                                detail=f"only {len(foreground)} aggregated points"))
    else:
        sweeps = [(ctx.frame_points[f], sensor_origins[f]) for f in frames]
        grid = tsdf_integrate(sweeps, voxel_size=cfg.voxel_size,
                              truncation=cfg.truncation)
        origin_hint = np.mean([sensor_origins[f] for f in frames], axis=0)
        surface = extract_surface(grid, sensor_hint=origin_hint)
        vote = surface_vote(surface, foreground, background, tau=cfg.vote_tau)
        if vote.foreground_keep.sum() >= cfg.min_fit_points:
            fit_points = foreground[vote.foreground_keep]
            keep = vote.foreground_keep
        else:
            fit_points = foreground
            flags.append("vote_empty")
        fit = lshape_fit(fit_points, yaw_step_deg=cfg.yaw_step_deg,
                         closeness_floor=cfg.closeness_floor)
        box = fit.box
        if fit.degenerate:
            flags.append("degenerate")
        undersized = size_check(box, prior, ratio=cfg.size_ratio)
        if not undersized:
            provenance = "static_rigid/tight"
        else:
            coverage = side_coverage(vote.surface, box.yaw,
                                     gamma=cfg.coverage_gamma,
                                     min_vertices=cfg.coverage_min_vertices)
            candidates = resize_candidates(box, prior, coverage,
                                           sensor_origins[anchor])
            box, verified = iou_align_select(candidates, ctx.observations,
                                             reference_yaw=fit.box.yaw,
                                             aggregate=cfg.iou_aggregate)
            provenance = "static_rigid/iou_aligned"
            if not verified:
                flags.append("unverified")
                skips.append(SkipRecord(frame=anchor, track_id=ctx.track_id,
                                        reason="unverified",
                                        detail="no cue view qualified for "
                                               "candidate selection"))

    resized = provenance == "static_rigid/iou_aligned"
    box, used_plane = refine_height(
        box, frame_clouds[anchor], prior=prior, ground=grounds.get(anchor),
        enforce_height_floor=resized, min_points=cfg.height_min_points,
        percentile=cfg.height_percentile)
    if used_plane:
        flags.append("height_plane")

    if flags:
        provenance = provenance + "," + ",".join(flags)
    annotations = [Annotation(
        frame=f, track_id=ctx.track_id, class_label=ctx.class_label, box=box,
        motion_state="static", physical_type="static_rigid",
        provenance=provenance, score=ctx.score,
        ego_distance=float(np.linalg.norm(box.center - sensor_origins[f])))
        for f in frames]
    return TrackResult(annotations=annotations, skips=skips,
                       foreground_frames=fg_frames, foreground_rows=fg_rows,
                       foreground_keep=keep)


def _annotate_dynamic(ctx: TrackContext, prior: ClassPrior, cfg: PipelineConfig,
                      motion_state: str,
                      sensor_origins: dict[int, np.ndarray],
                      frame_clouds: dict[int, np.ndarray],
                      grounds: dict[int, GroundModel | None]) -> TrackResult:
    annotations: list[Annotation] = []
    skips: list[SkipRecord] = []
    for f in sorted(ctx.frame_points):
        pts = ctx.frame_points[f]
        if len(pts) < cfg.min_fit_points:
            skips.append(SkipRecord(frame=f, track_id=ctx.track_id,
                                    reason="too_few_points",
                                    detail=f"{len(pts)} points in sweep"))
            continue
        fit = dynamic_orient_and_extend(
            pts, ctx.centroids, prior, sensor_origins[f], frame=f,
            min_step=cfg.min_dynamic_displacement,
            yaw_step_deg=cfg.yaw_step_deg, closeness_floor=cfg.closeness_floor)
        flags = []
        if fit.yaw_fallback:
            flags.append("yaw_fallback")
        if fit.degenerate:
            flags.append("degenerate")
        box, used_plane = refine_height(
            fit.box, frame_clouds[f], prior=prior, ground=grounds.get(f),
            enforce_height_floor=True, min_points=cfg.height_min_points,
            percentile=cfg.height_percentile)
        if used_plane:
            flags.append("height_plane")
        provenance = "dynamic_rigid/visibility_extended"
        if flags:
            provenance += "," + ",".join(flags)
        annotations.append(Annotation(
            frame=f, track_id=ctx.track_id, class_label=ctx.class_label, box=box,
            motion_state="dynamic", physical_type="dynamic_rigid",
            provenance=provenance, score=ctx.score,
            ego_distance=float(np.linalg.norm(box.center - sensor_origins[f]))))
    return TrackResult(annotations=annotations, skips=skips)


def _annotate_deformable(ctx: TrackContext, prior: ClassPrior, cfg: PipelineConfig,
                         motion_state: str,
                         sensor_origins: dict[int, np.ndarray],
                         frame_clouds: dict[int, np.ndarray],
                         grounds: dict[int, GroundModel | None]) -> TrackResult:
    annotations: list[Annotation] = []
    skips: list[SkipRecord] = []
    state = "static" if motion_state == "static" else "dynamic"
    for f in sorted(ctx.frame_points):
        pts = ctx.frame_points[f]
        if len(pts) < cfg.min_fit_points:
            skips.append(SkipRecord(frame=f, track_id=ctx.track_id,
                                    reason="too_few_points",
                                    detail=f"{len(pts)} points in sweep"))
            continue
        fit = deformable_fit(pts, yaw_step_deg=cfg.yaw_step_deg,
                             closeness_floor=cfg.closeness_floor)
        flags = ["degenerate"] if fit.degenerate else []
        box, used_plane = refine_height(
            fit.box, frame_clouds[f], prior=prior, ground=grounds.get(f),
            enforce_height_floor=False, min_points=cfg.height_min_points,
            percentile=cfg.height_percentile)
        if used_plane:
            flags.append("height_plane")
        provenance = "deformable/single_frame"
        if flags:
            provenance += "," + ",".join(flags)
        annotations.append(Annotation(
            frame=f, track_id=ctx.track_id, class_label=ctx.class_label, box=box,
            motion_state=state, physical_type="deformable",
            provenance=provenance, score=ctx.score,
            ego_distance=float(np.linalg.norm(box.center - sensor_origins[f]))))
    return TrackResult(annotations=annotations, skips=skips)


def annotate_scene(frames: list[FrameBundle], priors: dict[str, ClassPrior],
                   cfg: PipelineConfig | None = None) -> PipelineResult:
    """Run the full two-stage pipeline over a loaded scene."""
    if cfg is None:
        cfg = PipelineConfig()
    alignments = [align_frame(frame, cfg) for frame in frames]
    skips: list[SkipRecord] = [s for fa in alignments for s in fa.skips]

    sensor_origins = {fa.frame.index: fa.frame.ego_pose.translation
                      for fa in alignments}
    frame_clouds = {fa.frame.index: fa.frame.ego_pose.apply(fa.frame.points)
                    if len(fa.frame.points) else fa.frame.points
                    for fa in alignments}
    grounds = {fa.frame.index: fa.ground for fa in alignments}
    working_global = {fa.frame.index: fa.frame.ego_pose.apply(fa.working_points)
                      if len(fa.working_points) else fa.working_points
                      for fa in alignments}
    persistence_grids = {f: GridIndex(pts, cell_size=cfg.pp_radius)
                         for f, pts in working_global.items()}

    tracks = _collect_tracks(alignments)

    def process(track_id: int) -> TrackResult:
        ctx = tracks[track_id]
        own_points = np.concatenate(list(ctx.frame_points.values()))
        score = persistence_scores(own_points, persistence_grids,
                                   radius=cfg.pp_radius, window=cfg.pp_window)
        motion = classify_motion(score, ctx.centroids,
                                 pp_threshold=cfg.pp_threshold,
                                 displacement_min=cfg.displacement_min)
        local_skips: list[SkipRecord] = []
        if motion == MOTION_UNKNOWN:
            local_skips.append(SkipRecord(
                frame=min(ctx.frame_points), track_id=track_id,
                reason="unknown_motion",
                detail="too few sweeps for a persistence score; treating as dynamic"))
        physical, prior, unknown_class = assign_physical_type(
            ctx.class_label, motion, priors)
        if unknown_class:
            local_skips.append(SkipRecord(
                frame=min(ctx.frame_points), track_id=track_id,
                reason="unknown_class",
                detail=f"class {ctx.class_label!r} has no prior; "
                       "using the generic rigid prior"))
        if physical == "static_rigid":
            background = _background_for(ctx, tracks, alignments,
                                         cfg.background_margin)
            result = _annotate_static(ctx, prior, cfg, background,
                                      sensor_origins, frame_clouds, grounds)
        elif physical == "dynamic_rigid":
            result = _annotate_dynamic(ctx, prior, cfg, motion,
                                       sensor_origins, frame_clouds, grounds)
        else:
            result = _annotate_deformable(ctx, prior, cfg, motion,
                                          sensor_origins, frame_clouds, grounds)
        result.skips = local_skips + result.skips
        return result

    track_ids = sorted(tracks)
    results: dict[int, TrackResult] = {}
    if cfg.workers == 1 or len(track_ids) <= 1:
        for tid in track_ids:
            results[tid] = process(tid)
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for tid, result in zip(track_ids, pool.map(process, track_ids)):
                results[tid] = result

    annotations: list[Annotation] = []
    for tid in track_ids:
        annotations.extend(results[tid].annotations)
        skips.extend(results[tid].skips)
    annotations.sort(key=lambda a: (a.frame, a.track_id))
    skips.sort(key=lambda s: (s.frame, s.track_id, s.reason, s.camera))
    return PipelineResult(annotations=annotations, skips=skips,
                          alignments=alignments, tracks=results)
