import math

import numpy as np
import pytest

from openbox.alignment import GroundModel
from openbox.fitting import (
    CueObservation,
    SurfaceVertexSet,
    deformable_fit,
    dynamic_orient_and_extend,
    extract_surface,
    iou_align_select,
    lshape_fit,
    refine_height,
    resize_candidates,
    side_coverage,
    size_check,
    surface_vote,
    tight_box_at_yaw,
    trajectory_yaw,
    tsdf_integrate,
    visible_sides,
)
from openbox.fitting import TsdfGrid
from openbox.geometry import AxisAlignedBox2, CameraModel, OrientedBox3, Pose
from openbox.scene_io import ClassPrior

from helpers import brute_vote, grid_direction_oracle, yaw_gap_deg

CAR = ClassPrior("car", 4.63, 1.86, 1.73, "rigid")


def l_view_points(length=4.0, width=2.0, yaw=0.0, center=(0.0, 0.0),
                  step=0.03, noise=0.0, rng=None):
    """Points along two perpendicular rectangle edges (a corner view)."""
    rng = rng or np.random.default_rng(0)
    along = np.arange(-length / 2.0, length / 2.0 + step / 2.0, step)
    across = np.arange(-width / 2.0, width / 2.0 + step / 2.0, step)
    edge_a = np.column_stack([along, np.full(len(along), -width / 2.0)])
    edge_b = np.column_stack([np.full(len(across), -length / 2.0), across])
    xy = np.vstack([edge_a, edge_b])
    if noise > 0:
        xy = xy + rng.normal(0.0, noise, size=xy.shape)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    xy = xy @ rot.T + np.asarray(center)
    z = rng.uniform(0.0, 1.5, size=len(xy))
    return np.column_stack([xy, z])


class TestLShapeFit:
    def test_axis_aligned_edges(self):
        pts = l_view_points(yaw=0.0)
        result = lshape_fit(pts, yaw_step_deg=0.5)
        assert yaw_gap_deg(result.yaw_raw, 0.0) <= 0.5
        assert not result.degenerate

    def test_thirty_degree_rotation(self):
        pts = l_view_points(yaw=np.deg2rad(30.0))
        result = lshape_fit(pts, yaw_step_deg=0.5)
        assert yaw_gap_deg(result.yaw_raw, np.deg2rad(30.0)) <= 0.5

    def test_translation_leaves_direction_unchanged(self):
        pts = l_view_points(yaw=np.deg2rad(20.0))
        moved = pts + np.array([113.0, -47.0, 5.0])
        a = lshape_fit(pts, yaw_step_deg=0.5)
        b = lshape_fit(moved, yaw_step_deg=0.5)
        assert a.yaw_raw == pytest.approx(b.yaw_raw, abs=1e-12)

    def test_rotation_equivariance(self):
        base = l_view_points(yaw=0.0)
        ref = lshape_fit(base, yaw_step_deg=0.5).yaw_raw
        for phi_deg in (10.0, 33.3, 61.0, 88.0):
            c, s = math.cos(np.deg2rad(phi_deg)), math.sin(np.deg2rad(phi_deg))
            rot = np.array([[c, -s], [s, c]])
            turned = base.copy()
            turned[:, :2] = base[:, :2] @ rot.T
            got = lshape_fit(turned, yaw_step_deg=0.5).yaw_raw
            assert yaw_gap_deg(got, ref + np.deg2rad(phi_deg)) <= 0.5 + 1e-9

    def test_matches_fine_grid_oracle(self):
        rng = np.random.default_rng(40)
        for case in range(10):
            yaw = float(rng.uniform(0.0, math.pi / 2.0))
            pts = l_view_points(yaw=yaw, noise=0.01, rng=rng)
            got = lshape_fit(pts, yaw_step_deg=0.5).yaw_raw
            want = grid_direction_oracle(pts[:, :2], step_deg=0.1)
            assert yaw_gap_deg(got, want) <= 0.6, case

    def test_footprint_extents_near_truth(self):
        rng = np.random.default_rng(41)
        pts = l_view_points(length=4.0, width=2.0, yaw=np.deg2rad(25.0),
                            noise=0.01, rng=rng)
        box = lshape_fit(pts).box
        assert box.length == pytest.approx(4.0, abs=0.05)
        assert box.width == pytest.approx(2.0, abs=0.05)

    def test_contains_nearly_all_points_in_plan_view(self):
        rng = np.random.default_rng(42)
        for seed in range(5):
            pts = l_view_points(yaw=float(rng.uniform(0, 1.5)), noise=0.01,
                                rng=np.random.default_rng(seed))
            box = lshape_fit(pts).box
            grown = OrientedBox3(center=box.center, length=box.length + 0.02,
                                 width=box.width + 0.02, height=box.height + 0.02,
                                 yaw=box.yaw)
            flat = pts.copy()
            flat[:, 2] = box.center[2]
            inside = grown.contains_points(flat)
            assert inside.mean() >= 0.99

    def test_collinear_degenerate(self):
        pts = np.column_stack([np.linspace(0, 3, 20), np.zeros(20), np.zeros(20)])
        result = lshape_fit(pts)
        assert result.degenerate
        assert result.box.width == pytest.approx(0.05)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            lshape_fit(np.zeros((2, 3)))

    def test_height_from_z_extent(self):
        pts = l_view_points()
        pts[:, 2] = np.linspace(0.2, 1.7, len(pts))
        box = lshape_fit(pts).box
        assert box.height == pytest.approx(1.5)
        assert box.bottom_z == pytest.approx(0.2)

    def test_tight_box_at_fixed_yaw(self):
        pts = l_view_points(yaw=np.deg2rad(15.0))
        result = tight_box_at_yaw(pts, np.deg2rad(15.0))
        assert result.box.length == pytest.approx(4.0, abs=0.03)
        assert result.box.width == pytest.approx(2.0, abs=0.03)


class TestSizeCheck:
    def test_full_size_box_ok(self):
        box = OrientedBox3((0, 0, 0), 4.63, 1.86, 1.73, 0.0)
        assert size_check(box, CAR) == []

    def test_exactly_eighty_percent_ok(self):
        box = OrientedBox3((0, 0, 0), 0.8 * 4.63, 0.8 * 1.86, 0.8 * 1.73, 0.0)
        assert size_check(box, CAR) == []

    def test_just_below_threshold_flagged(self):
        box = OrientedBox3((0, 0, 0), 0.79 * 4.63, 1.86, 1.73, 0.0)
        assert size_check(box, CAR) == ["length"]

    def test_multiple_flags(self):
        box = OrientedBox3((0, 0, 0), 2.0, 1.0, 0.9, 0.0)
        assert size_check(box, CAR) == ["length", "width", "height"]


def plane_sweep(x0=1.0, span=1.2, step=0.04):
    ys = np.arange(-span, span + step / 2.0, step)
    zs = np.arange(-span, span + step / 2.0, step)
    g = np.meshgrid(ys, zs, indexing="ij")
    return np.column_stack([np.full(g[0].size, x0), g[0].ravel(), g[1].ravel()])


class TestTsdf:
    def test_plane_vertices_and_normals(self):
        pts = plane_sweep()
        origin = np.array([-3.0, 0.0, 0.0])
        grid = tsdf_integrate([(pts, origin)], voxel_size=0.1, truncation=0.3)
        surface = extract_surface(grid, sensor_hint=origin)
        assert len(surface) > 50
        assert np.all(np.abs(surface.vertices[:, 0] - 1.0) <= 0.1)
        toward_sensor = surface.normals @ np.array([-1.0, 0.0, 0.0])
        assert (toward_sensor > 0.9).mean() >= 0.95
        assert (toward_sensor > 0.0).all()

    def test_normals_unit_length(self):
        pts = plane_sweep()
        grid = tsdf_integrate([(pts, np.array([-3.0, 0.0, 0.0]))])
        surface = extract_surface(grid)
        assert np.allclose(np.linalg.norm(surface.normals, axis=1), 1.0, atol=1e-6)

    def test_sphere_radius_recovered(self):
        rng = np.random.default_rng(50)
        dirs = rng.normal(size=(4000, 3))
        dirs /= np.linalg.norm(dirs, axis=1)[:, None]
        pts = 2.0 * dirs
        grid = tsdf_integrate([(pts, np.zeros(3))], voxel_size=0.1)
        surface = extract_surface(grid, sensor_hint=np.zeros(3))
        assert len(surface) > 100
        radii = np.linalg.norm(surface.vertices, axis=1)
        assert np.all(np.abs(radii - 2.0) <= 0.1)

    def test_no_points_is_none(self):
        assert tsdf_integrate([]) is None
        assert tsdf_integrate([(np.zeros((0, 3)), np.zeros(3))]) is None

    def test_unobserved_grid_has_no_surface(self):
        grid = TsdfGrid(origin=np.zeros(3), voxel_size=0.1, truncation=0.3,
                        distances=np.zeros((4, 4, 4)),
                        weights=np.zeros((4, 4, 4), dtype=np.int64))
        assert len(extract_surface(grid)) == 0

    def test_stored_distances_within_truncation(self):
        grid = tsdf_integrate([(plane_sweep(), np.array([-3.0, 0.0, 0.0]))],
                              voxel_size=0.1, truncation=0.3)
        assert np.all(np.abs(grid.distances) <= 0.3 + 1e-12)
        assert np.all(grid.weights >= 0)


def vertex_set(vertices, normals=None):
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if normals is None:
        normals = np.tile([1.0, 0.0, 0.0], (len(verts), 1))
    return SurfaceVertexSet(vertices=verts, normals=np.asarray(normals, float))


class TestSurfaceVote:
    def test_single_vertex_worked_case(self):
        surface = vertex_set([[0.0, 0.0, 0.0]])
        fg = np.array([[0.1, 0.0, 0.0]])
        bg = np.array([[0.2, 0.0, 0.0]])
        result = surface_vote(surface, fg, bg, tau=0.15)
        assert list(result.vertex_keep) == [True]
        assert list(result.foreground_keep) == [True]
        assert np.allclose(result.surface.vertices, surface.vertices)

    def test_equal_counts_discard_vertex(self):
        surface = vertex_set([[0.0, 0.0, 0.0]])
        fg = np.array([[0.1, 0.0, 0.0]])
        bg = np.array([[0.14, 0.0, 0.0]])
        result = surface_vote(surface, fg, bg, tau=0.15)
        assert list(result.vertex_keep) == [False]
        assert not result.foreground_keep.any()

    def test_radius_is_strict(self):
        surface = vertex_set([[0.0, 0.0, 0.0]])
        fg = np.array([[0.15, 0.0, 0.0]])  # exactly tau away: outside
        result = surface_vote(surface, fg, np.zeros((0, 3)), tau=0.15)
        assert list(result.vertex_keep) == [False]

    def test_no_background_keeps_supported_vertices(self):
        surface = vertex_set([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        fg = np.array([[0.05, 0.0, 0.0]])
        result = surface_vote(surface, fg, np.zeros((0, 3)), tau=0.15)
        assert list(result.vertex_keep) == [True, False]
        assert list(result.foreground_keep) == [True]

    def test_kept_foreground_is_subset(self):
        rng = np.random.default_rng(60)
        for _ in range(10):
            surface = vertex_set(rng.uniform(-1, 1, size=(30, 3)))
            fg = rng.uniform(-1, 1, size=(80, 3))
            bg = rng.uniform(-1, 1, size=(40, 3))
            result = surface_vote(surface, fg, bg, tau=0.15)
            kept = result.foreground_keep
            # every kept point is within tau of some kept vertex
            for p in fg[kept]:
                d = np.linalg.norm(result.surface.vertices - p, axis=1)
                assert (d < 0.15).any()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(61)
        for case in range(20):
            surface = vertex_set(rng.uniform(-0.8, 0.8, size=(25, 3)))
            fg = rng.uniform(-0.8, 0.8, size=(60, 3))
            bg = rng.uniform(-0.8, 0.8, size=(45, 3))
            result = surface_vote(surface, fg, bg, tau=0.15)
            want_keep, want_fg = brute_vote(surface.vertices, fg, bg, tau=0.15)
            assert np.array_equal(result.vertex_keep, want_keep), case
            assert np.array_equal(result.foreground_keep, want_fg), case


class TestSideCoverage:
    def test_aligned_normals_cover_one_side(self):
        surface = vertex_set(np.zeros((6, 3)), np.tile([1.0, 0.0, 0.0], (6, 1)))
        assert side_coverage(surface, yaw=0.0) == frozenset({"+x"})

    def test_below_min_vertices_not_covered(self):
        surface = vertex_set(np.zeros((4, 3)), np.tile([1.0, 0.0, 0.0], (4, 1)))
        assert side_coverage(surface, yaw=0.0) == frozenset()

    def test_diagonal_normals_cover_nothing(self):
        d = math.sqrt(2) / 2.0
        surface = vertex_set(np.zeros((10, 3)), np.tile([d, d, 0.0], (10, 1)))
        assert side_coverage(surface, yaw=0.0, gamma=0.8) == frozenset()

    def test_perpendicular_planes_cover_two_adjacent_sides(self):
        normals = np.vstack([np.tile([-1.0, 0.0, 0.0], (8, 1)),
                             np.tile([0.0, -1.0, 0.0], (8, 1))])
        surface = vertex_set(np.zeros((16, 3)), normals)
        assert side_coverage(surface, yaw=0.0) == frozenset({"-x", "-y"})

    def test_rotated_frame(self):
        yaw = np.deg2rad(30.0)
        n = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        surface = vertex_set(np.zeros((6, 3)), np.tile(n, (6, 1)))
        assert side_coverage(surface, yaw=yaw) == frozenset({"+x"})

    def test_empty_surface(self):
        surface = vertex_set(np.zeros((0, 3)), np.zeros((0, 3)))
        assert side_coverage(surface, yaw=0.0) == frozenset()


def face_min_along(box, direction):
    return float(min(box.bev_corners() @ np.asarray(direction)))


def face_max_along(box, direction):
    return float(max(box.bev_corners() @ np.asarray(direction)))


class TestResizeCandidates:
    BOX = OrientedBox3((10.0, 0.0, 0.75), 2.0, 1.5, 1.0, 0.0)

    def test_full_coverage_is_identity(self):
        out = resize_candidates(self.BOX, CAR,
                                frozenset({"+x", "-x", "+y", "-y"}),
                                np.zeros(3))
        assert out == [self.BOX]

    def test_two_candidates_with_quarter_turn(self):
        out = resize_candidates(self.BOX, CAR, frozenset({"-x"}), np.zeros(3))
        assert len(out) == 2
        gap = abs((out[0].yaw - out[1].yaw) % math.pi)
        assert min(gap, math.pi - gap) == pytest.approx(math.pi / 2.0, abs=1e-9)

    def test_covered_face_never_moves(self):
        for coverage in ({"-x"}, {"+x"}, {"-y"}, {"+y"}):
            out = resize_candidates(self.BOX, CAR, frozenset(coverage),
                                    np.zeros(3))
            side = next(iter(coverage))
            direction = {"-x": [1, 0], "+x": [1, 0],
                         "-y": [0, 1], "+y": [0, 1]}[side]
            want = (face_min_along(self.BOX, direction) if side.startswith("-")
                    else face_max_along(self.BOX, direction))
            for cand in out:
                got = (face_min_along(cand, direction) if side.startswith("-")
                       else face_max_along(cand, direction))
                assert got == pytest.approx(want, abs=1e-6), (coverage, cand)

    def test_dimensions_never_shrink(self):
        out = resize_candidates(self.BOX, CAR, frozenset({"-x"}), np.zeros(3))
        for cand in out:
            # per world axis: the extent along x and along y may only grow
            assert (face_max_along(cand, [1, 0]) - face_min_along(cand, [1, 0])
                    >= 2.0 - 1e-9)
            assert (face_max_along(cand, [0, 1]) - face_min_along(cand, [0, 1])
                    >= 1.5 - 1e-9)

    def test_observed_oversize_kept(self):
        big = OrientedBox3((10.0, 0.0, 0.75), 6.0, 1.5, 1.0, 0.0)
        out = resize_candidates(big, CAR, frozenset({"-x"}), np.zeros(3))
        for cand in out:
            extent_x = face_max_along(cand, [1, 0]) - face_min_along(cand, [1, 0])
            assert extent_x == pytest.approx(6.0, abs=1e-9)

    def test_height_floor_and_bottom_held(self):
        out = resize_candidates(self.BOX, CAR, frozenset({"-x"}), np.zeros(3))
        for cand in out:
            assert cand.height == pytest.approx(0.8 * CAR.height)
            assert cand.bottom_z == pytest.approx(self.BOX.bottom_z)

    def test_uncovered_axis_grows_away_from_sensor(self):
        # sensor below the box: the -y face is nearer, growth goes to +y
        out = resize_candidates(self.BOX, CAR, frozenset({"-x"}),
                                np.array([10.0, -10.0, 0.0]))
        for cand in out:
            assert face_min_along(cand, [0, 1]) == pytest.approx(-0.75, abs=1e-6)
        # sensor above: the +y face is anchored instead
        out = resize_candidates(self.BOX, CAR, frozenset({"-x"}),
                                np.array([10.0, 10.0, 0.0]))
        for cand in out:
            assert face_max_along(cand, [0, 1]) == pytest.approx(0.75, abs=1e-6)


def forward_camera():
    # sensor +x becomes camera +z (optical axis): pitch the frame so the
    # camera looks down the sensor's x axis
    rot = np.array([[0.0, -1.0, 0.0],
                    [0.0, 0.0, -1.0],
                    [1.0, 0.0, 0.0]])
    return CameraModel(fx=400.0, fy=400.0, cx=320.0, cy=240.0,
                       width=640, height=480,
                       extrinsics=Pose(rotation=rot, translation=np.zeros(3)))


def hull_of(box, camera, ego_pose):
    corners = ego_pose.inverse().apply(box.corners())
    uv, depth, _ = camera.project_points(corners)
    front = depth > 0
    return AxisAlignedBox2(float(uv[front, 0].min()), float(uv[front, 1].min()),
                           float(uv[front, 0].max()), float(uv[front, 1].max()))


class TestIouAlignSelect:
    def test_single_candidate_passes_through(self):
        box = OrientedBox3((10.0, 0.0, 1.0), 4.6, 1.9, 1.7, 0.2)
        chosen, verified = iou_align_select([box], [], reference_yaw=0.0)
        assert chosen == box
        assert verified

    def test_true_orientation_wins(self):
        cam = forward_camera()
        ego = Pose.identity()
        true_box = OrientedBox3((12.0, 0.0, 1.0), 4.63, 1.86, 1.73, 0.15)
        wrong = OrientedBox3(true_box.center, 4.63, 1.86, 1.73,
                             0.15 + math.pi / 2.0)
        cue = CueObservation(camera=cam, box2d=hull_of(true_box, cam, ego),
                             ego_pose=ego)
        chosen, verified = iou_align_select([wrong, true_box], [cue],
                                            reference_yaw=0.15)
        assert verified
        assert chosen == true_box

    def test_no_qualifying_view_flags_unverified(self):
        cam = forward_camera()
        ego = Pose.identity()
        behind = OrientedBox3((-12.0, 0.0, 1.0), 4.63, 1.86, 1.73, 0.0)
        also_behind = OrientedBox3((-12.0, 0.0, 1.0), 4.63, 1.86, 1.73, 0.4)
        cue = CueObservation(camera=cam, box2d=AxisAlignedBox2(0, 0, 50, 50),
                             ego_pose=ego)
        chosen, verified = iou_align_select([behind, also_behind], [cue],
                                            reference_yaw=0.0)
        assert not verified
        assert chosen == behind

    def test_tie_prefers_yaw_near_reference(self):
        # a square footprint projects identically at yaw 0 and yaw 90
        cam = forward_camera()
        ego = Pose.identity()
        a = OrientedBox3((12.0, 0.0, 1.0), 2.0, 2.0, 1.5, 0.0)
        b = OrientedBox3((12.0, 0.0, 1.0), 2.0, 2.0, 1.5, math.pi / 2.0)
        cue = CueObservation(camera=cam, box2d=hull_of(a, cam, ego), ego_pose=ego)
        chosen, _ = iou_align_select([b, a], [cue], reference_yaw=0.1)
        assert chosen.yaw == pytest.approx(0.0)

    def test_mean_vs_max_aggregation(self):
        with pytest.raises(ValueError):
            iou_align_select(
                [OrientedBox3((0, 0, 0), 2, 1, 1, 0),
                 OrientedBox3((0, 0, 0), 2, 1, 1, 0.3)],
                [], reference_yaw=0.0, aggregate="median")


class TestTrajectoryYaw:
    def test_straight_line_heading(self):
        track = {0: np.array([0.0, 0.0, 0.0]),
                 1: np.array([0.0, 2.0, 0.0]),
                 2: np.array([0.0, 4.0, 0.0])}
        assert trajectory_yaw(track, 1) == pytest.approx(math.pi / 2.0)

    def test_end_frames_use_bracketing_step(self):
        track = {0: np.array([0.0, 0.0, 0.0]),
                 1: np.array([1.0, 0.0, 0.0]),
                 2: np.array([2.0, 0.0, 0.0])}
        assert trajectory_yaw(track, 0) == pytest.approx(0.0)
        assert trajectory_yaw(track, 2) == pytest.approx(0.0)

    def test_smoothing_damps_zigzag(self):
        track = {0: np.array([0.0, 0.0, 0.0]),
                 1: np.array([1.0, 0.3, 0.0]),
                 2: np.array([2.0, 0.0, 0.0]),
                 3: np.array([3.0, 0.3, 0.0]),
                 4: np.array([4.0, 0.0, 0.0])}
        yaw = trajectory_yaw(track, 2)
        assert abs(yaw) < np.deg2rad(10.0)

    def test_slow_track_returns_none(self):
        track = {0: np.zeros(3), 1: np.array([0.05, 0.0, 0.0])}
        assert trajectory_yaw(track, 0, min_step=0.1) is None

    def test_missing_frame_returns_none(self):
        track = {0: np.zeros(3), 1: np.array([1.0, 0.0, 0.0])}
        assert trajectory_yaw(track, 7) is None


class TestVisibleSides:
    BOX = OrientedBox3((10.0, 0.0, 1.0), 4.0, 2.0, 1.5, 0.0)

    def test_sensor_behind_sees_rear(self):
        assert visible_sides(self.BOX, np.zeros(3)) == frozenset({"-x"})

    def test_sensor_beside_sees_flank(self):
        assert visible_sides(self.BOX, np.array([10.0, 50.0, 0.0])) == (
            frozenset({"+y"}))

    def test_corner_view_sees_two(self):
        assert visible_sides(self.BOX, np.array([-10.0, -10.0, 0.0])) == (
            frozenset({"-x", "-y"}))


def rear_face_points(x0=8.0, depth=0.1, half_w=0.9):
    xs = np.linspace(x0, x0 + depth, 4)
    ys = np.linspace(-half_w, half_w, 12)
    zs = np.linspace(0.0, 1.4, 6)
    g = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.column_stack([g[0].ravel(), g[1].ravel(), g[2].ravel()])


class TestDynamicOrientAndExtend:
    TRACK = {0: np.array([9.0, 0.0, 0.7]),
             1: np.array([10.0, 0.0, 0.7]),
             2: np.array([11.0, 0.0, 0.7])}

    def test_single_visible_face_extends_one_side(self):
        pts = rear_face_points()
        fit = dynamic_orient_and_extend(pts, self.TRACK, CAR,
                                        sensor_origin=np.zeros(3), frame=1)
        assert not fit.yaw_fallback
        assert fit.extended_sides == frozenset({"+x"})
        # anchored rear face still at x = 8
        assert face_min_along(fit.box, [1, 0]) == pytest.approx(8.0, abs=1e-6)
        assert (face_max_along(fit.box, [1, 0])
                == pytest.approx(8.0 + CAR.length, abs=1e-6))
        # the flank axis saw no face: observed extent kept
        assert face_min_along(fit.box, [0, 1]) == pytest.approx(-0.9, abs=1e-6)
        assert face_max_along(fit.box, [0, 1]) == pytest.approx(0.9, abs=1e-6)

    def test_corner_view_extends_two_sides(self):
        pts = rear_face_points()
        fit = dynamic_orient_and_extend(pts, self.TRACK, CAR,
                                        sensor_origin=np.array([0.0, -6.0, 0.0]),
                                        frame=1)
        assert fit.extended_sides == frozenset({"+x", "+y"})
        assert face_min_along(fit.box, [1, 0]) == pytest.approx(8.0, abs=1e-6)
        assert face_min_along(fit.box, [0, 1]) == pytest.approx(-0.9, abs=1e-6)
        assert (face_max_along(fit.box, [0, 1])
                == pytest.approx(-0.9 + CAR.width, abs=1e-6))

    def test_heading_comes_from_trajectory(self):
        # rear slab of a car driving +y at x = 10
        xs = np.linspace(9.1, 10.9, 12)
        ys = np.linspace(8.0, 8.1, 4)
        zs = np.linspace(0.0, 1.4, 6)
        g = np.meshgrid(xs, ys, zs, indexing="ij")
        pts = np.column_stack([g[0].ravel(), g[1].ravel(), g[2].ravel()])
        sideways = {0: np.array([10.0, 9.0, 0.7]),
                    1: np.array([10.0, 10.0, 0.7]),
                    2: np.array([10.0, 11.0, 0.7])}
        fit = dynamic_orient_and_extend(pts, sideways, CAR,
                                        sensor_origin=np.zeros(3), frame=1)
        assert not fit.yaw_fallback
        assert yaw_gap_deg(fit.box.yaw, math.pi / 2.0, period=math.pi) < 1e-6
        # grown along the heading away from the visible rear face
        assert face_min_along(fit.box, [0, 1]) == pytest.approx(8.0, abs=1e-6)
        assert (face_max_along(fit.box, [0, 1])
                == pytest.approx(8.0 + CAR.length, abs=1e-6))

    def test_flat_trajectory_falls_back_to_lshape(self):
        pts = l_view_points(yaw=np.deg2rad(20.0), center=(10.0, 0.0))
        crawl = {0: np.array([10.0, 0.0, 0.7]), 1: np.array([10.02, 0.0, 0.7])}
        fit = dynamic_orient_and_extend(pts, crawl, CAR,
                                        sensor_origin=np.zeros(3), frame=1)
        assert fit.yaw_fallback
        assert yaw_gap_deg(fit.box.yaw, np.deg2rad(20.0)) <= 0.5 + 1e-9

    def test_oversize_observation_not_shrunk(self):
        pts = rear_face_points(depth=6.0)  # longer than the prior already
        fit = dynamic_orient_and_extend(pts, self.TRACK, CAR,
                                        sensor_origin=np.zeros(3), frame=1)
        extent = face_max_along(fit.box, [1, 0]) - face_min_along(fit.box, [1, 0])
        assert extent == pytest.approx(6.0, abs=1e-9)
        assert fit.extended_sides == frozenset()


class TestDeformableFit:
    def test_tight_blob(self):
        rng = np.random.default_rng(70)
        pts = rng.uniform(-0.25, 0.25, size=(60, 3)) + np.array([3.0, 1.0, 0.9])
        box = deformable_fit(pts).box
        assert box.length <= 0.55
        assert box.width <= 0.55
        flat = pts.copy()
        flat[:, 2] = box.center[2]
        grown = OrientedBox3(box.center, box.length + 0.02, box.width + 0.02,
                             box.height + 0.02, box.yaw)
        assert grown.contains_points(flat).all()

    def test_frames_fit_independently(self):
        rng = np.random.default_rng(71)
        a = rng.uniform(-0.3, 0.3, size=(40, 3))
        b = a + np.array([0.8, 0.1, 0.0])
        box_a = deformable_fit(a).box
        box_b = deformable_fit(b).box
        assert np.allclose(box_b.center - box_a.center,
                           [0.8, 0.1, 0.0], atol=1e-9)
        assert box_a.length == pytest.approx(box_b.length, abs=1e-9)


class TestRefineHeight:
    def column(self, n, z, xy=(0.0, 0.0)):
        pts = np.zeros((n, 3))
        pts[:, 0] = xy[0]
        pts[:, 1] = xy[1]
        pts[:, 2] = z
        return pts

    def test_percentile_skips_single_outlier(self):
        box = OrientedBox3((0.0, 0.0, 0.8), 4.0, 2.0, 1.2, 0.0)
        cloud = np.vstack([self.column(99, 0.0, xy=(0.5, 0.0)),
                           self.column(1, -0.5, xy=(0.5, 0.0))])
        out, flagged = refine_height(box, cloud)
        assert not flagged
        assert out.bottom_z == pytest.approx(0.0)

    def test_uniform_ground_level(self):
        box = OrientedBox3((0.0, 0.0, 1.0), 4.0, 2.0, 1.0, 0.0)
        cloud = self.column(50, 0.25, xy=(1.0, 0.5))
        out, _ = refine_height(box, cloud)
        assert out.bottom_z == pytest.approx(0.25)

    def test_top_face_held(self):
        box = OrientedBox3((0.0, 0.0, 1.0), 4.0, 2.0, 1.0, 0.0)
        cloud = self.column(50, 0.0)
        out, _ = refine_height(box, cloud)
        assert out.top_z == pytest.approx(box.top_z)
        assert out.height == pytest.approx(1.5)

    def test_neighborhood_radius_is_footprint_circumradius(self):
        # half diagonal of a 4 x 2 footprint is sqrt(20)/2 ~ 2.2361
        box = OrientedBox3((0.0, 0.0, 1.0), 4.0, 2.0, 1.0, 0.0)
        inside = self.column(50, 0.1, xy=(2.23, 0.0))
        outside = self.column(50, -9.0, xy=(2.24, 0.0))
        out, flagged = refine_height(box, np.vstack([inside, outside]))
        assert not flagged
        assert out.bottom_z == pytest.approx(0.1)

    def test_sparse_neighborhood_uses_ground_plane(self):
        box = OrientedBox3((0.0, 0.0, 1.0), 4.0, 2.0, 1.0, 0.0)
        cloud = self.column(9, 0.0)  # one short of the minimum
        model = GroundModel(coefficients=np.array([0.0, 0.0, 1.0, -0.3]),
                            inlier_threshold=0.1)
        out, flagged = refine_height(box, cloud, ground=model)
        assert flagged
        assert out.bottom_z == pytest.approx(0.3)

    def test_no_data_leaves_box_untouched(self):
        box = OrientedBox3((0.0, 0.0, 1.0), 4.0, 2.0, 1.0, 0.0)
        out, flagged = refine_height(box, np.zeros((0, 3)))
        assert not flagged
        assert out == box

    def test_height_floor_applies_on_request(self):
        # ground close under the top: bare refinement leaves a squat box,
        # the floor keeps the bottom grounded and regrows height upward
        prior = CAR
        box = OrientedBox3((0.0, 0.0, 1.0), 4.0, 2.0, 0.5, 0.0)
        cloud = self.column(50, 0.9)
        floored, _ = refine_height(box, cloud, prior=prior,
                                   enforce_height_floor=True)
        assert floored.height == pytest.approx(0.8 * prior.height)
        assert floored.bottom_z == pytest.approx(0.9)
        free, _ = refine_height(box, cloud, prior=prior,
                                enforce_height_floor=False)
        assert free.height == pytest.approx(0.35, abs=1e-9)
        assert free.top_z == pytest.approx(box.top_z)
