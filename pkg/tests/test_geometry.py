"""Tests for camera math, ground-truth tracks, alignment and the evaluation metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

import oracles
from mvmim.errors import AlignmentError, DimensionError, EmptyDenominatorError, InvalidSampleError
from mvmim.geometry import (Camera, TrackSet, bilinear_depth, gt_tracks, intrinsics, invert_pose, pointmap_metrics,
                            pose_metrics, project, rotation_angle_deg, track_metrics, transform_points, umeyama_align,
                            unproject)
from mvmim.synthdata import SceneSpec, generate_scene


def rz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def pose(R=np.eye(3), t=(0, 0, 0)):
    T = np.eye(4)
    T[:3, :3], T[:3, 3] = R, t
    return T


def cams_from(Ks, depths):
    return [Camera(K, np.eye(4), d) for K, d in zip(Ks, depths)]


class TestProjection:
    def test_identity_intrinsics(self):
        assert unproject((2, 3), 2.0, np.eye(3)).tolist() == [4.0, 6.0, 2.0]

    def test_general_intrinsics(self):
        K = intrinsics(2.0, 1.0, 1.0, 0.0)
        assert unproject((3, 5), 4.0, K).tolist() == [4.0, 20.0, 4.0]

    def test_round_trip_10k(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(-50, 150, size=(10_000, 2))
        d = rng.uniform(0.1, 20.0, size=10_000)
        K = intrinsics(80.0, 75.0, 31.5, 30.0)
        assert np.abs(project(unproject(p, d, K), K) - p).max() < 1e-9

    def test_nonpositive_depth(self):
        with pytest.raises(InvalidSampleError):
            unproject((1, 1), 0.0, np.eye(3))

    def test_invert_pose(self):
        T = oracles.random_pose(np.random.default_rng(1))
        np.testing.assert_allclose(invert_pose(T) @ T, np.eye(4), atol=1e-12)

    def test_camera_validate(self):
        Camera(np.eye(3), oracles.random_pose(np.random.default_rng(2))).validate()
        with pytest.raises(InvalidSampleError):
            Camera(np.eye(3), np.diag([1.0, 1.0, -1.0, 1.0])).validate()
        with pytest.raises(InvalidSampleError):
            Camera(intrinsics(-1, 1, 0, 0), np.eye(4)).validate()


class TestBilinearDepth:
    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        d = rng.uniform(1, 2, size=(7, 9))
        d[rng.random(d.shape) < 0.2] = 0
        for u, v in rng.uniform(-0.5, 9.5, size=(300, 2)):
            assert bilinear_depth(d, u, v) == pytest.approx(oracles.bilinear(d.tolist(), u, v), abs=1e-12)

    def test_integer_pixel_exact(self):
        d = np.arange(12.0).reshape(3, 4) + 1
        assert bilinear_depth(d, 3, 2) == d[2, 3]


class TestGtTracks:
    def plane_cam(self, t=(0, 0, 0), d=4.0, size=32):
        return Camera(np.eye(3), pose(t=t), np.full((size, size), d))

    def test_identical_cameras(self):
        cams = [self.plane_cam() for _ in range(3)]
        seeds = np.array([[5.0, 7.0], [20.0, 3.0]])
        tr = gt_tracks(cams, seeds)
        assert tr.visibility.all()
        for v in range(3):
            np.testing.assert_allclose(tr.points[:, v], seeds, atol=1e-12)

    def test_translation_shift(self):
        # K = I, fronto-parallel plane at depth d: a +tx camera move shifts pixels by -tx / d
        d, txs = 4.0, [0.0, 1.0, 2.0]
        cams = [self.plane_cam(t=(tx, 0, 0), d=d) for tx in txs]
        seeds = np.array([[10.0, 10.0], [15.0, 12.0]])
        tr = gt_tracks(cams, seeds)
        for v, tx in enumerate(txs):
            np.testing.assert_allclose(tr.points[:, v, 0], seeds[:, 0] - tx / d, atol=1e-12)
            np.testing.assert_allclose(tr.points[:, v, 1], seeds[:, 1], atol=1e-12)
        assert tr.visibility.all()

    def test_out_of_bounds_invisible(self):
        cams = [self.plane_cam(), self.plane_cam(t=(200.0, 0, 0))]
        tr = gt_tracks(cams, np.array([[10.0, 10.0]]))
        assert not tr.visibility[0, 1]

    def test_seed_on_invalid_depth(self):
        cam = self.plane_cam()
        cam.depth[5, 5] = 0.0
        with pytest.raises(InvalidSampleError, match="seed 1"):
            gt_tracks([cam, cam], np.array([[1.0, 1.0], [5.0, 5.0]]))

    def test_two_plane_occlusion_matches_zbuffer(self):
        spec = SceneSpec(kind="two_plane", n_views=4, arc_span_deg=90.0, jitter_deg=0.0, seed=4, fg_size=1.0)
        batch = generate_scene(spec)
        vv, uu = np.nonzero(batch.depths[0] > 0)
        seeds = np.stack([uu, vv], axis=1).astype(float)[::7]
        tr = gt_tracks(batch.cameras, seeds)
        world = batch.points[0][vv[::7], uu[::7]]
        n_occluded = 0
        for v in range(1, 4):
            cam = batch.cameras[v]
            z = transform_points(cam.world_to_camera, world)[:, 2]
            hit, depth = batch.surface.cast(cam, tr.points[:, v])
            inside = (tr.points[:, v] >= 0).all(1) & (tr.points[:, v] <= spec.image_size - 1).all(1)
            occluded = inside & (depth > 0) & (depth < 0.9 * z)
            n_occluded += int(occluded.sum())
            assert not tr.visibility[occluded, v].any()
            # bilinear lookups that straddle an occlusion edge are legitimately ambiguous; skip them
            smooth = np.array([self.one_surface(batch.depths[v], batch.points[v], u, w) for u, w in tr.points[:, v]])
            clear = inside & smooth & (np.linalg.norm(hit - world, axis=1) < 1e-6)
            assert clear.sum() > 20 and tr.visibility[clear, v].all()
        assert n_occluded > 0

    @staticmethod
    def one_surface(depth, points, u, v):
        """All four bilinear neighbors hit the same plane (equal world z)."""
        if not (0 <= u <= depth.shape[1] - 1 and 0 <= v <= depth.shape[0] - 1):
            return False
        r0, c0 = int(v), int(u)
        z = points[r0:r0 + 2, c0:c0 + 2, 2]
        return bool((depth[r0:r0 + 2, c0:c0 + 2] > 0).all() and np.ptp(z) < 1e-9)


class TestTrackMetrics:
    def test_identity(self):
        rng = np.random.default_rng(0)
        pred, gt, vis, Ks, depths = oracles.random_track_instance(rng)
        gts = TrackSet(gt, vis)
        rep = track_metrics(gts, gts, cams_from(Ks, depths))
        assert rep.ate2d_px == 0 and rep.ate3d_cm == 0
        assert all(v == 100.0 for v in rep.acc_at_px.values())

    def test_direct_substitution(self):
        K, d = np.eye(3), np.ones((20, 20))
        cams = [Camera(K, np.eye(4), d)] * 2
        gt = np.zeros((3, 2, 2))
        gt[:, :, 0] = 5.0
        pred = gt.copy()
        pred[:, 1, 0] += [3.0, 4.0, 7.0]
        vis = np.array([[True, True], [True, True], [True, False]])
        rep = track_metrics(TrackSet(pred, vis), TrackSet(gt, vis), cams)
        assert rep.ate2d_px == 3.5 and rep.n_visible == 2
        vis[2, 1] = True
        rep = track_metrics(TrackSet(pred, vis), TrackSet(gt, vis), cams)
        assert rep.acc_at_px[5] == pytest.approx(200 / 3, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle(self, seed):
        pred, gt, vis, Ks, depths = oracles.random_track_instance(np.random.default_rng(seed))
        rep = track_metrics(TrackSet(pred, vis), TrackSet(gt, vis), cams_from(Ks, depths))
        ref = oracles.track_metrics(pred.tolist(), gt.tolist(), vis.tolist(), [K.tolist() for K in Ks], depths)
        assert rep.ate2d_px == pytest.approx(ref["ate2d"], abs=1e-12)
        assert rep.ate3d_cm == pytest.approx(ref["ate3d_cm"], abs=1e-10)
        assert rep.acc_at_px == ref["acc_px"] and rep.acc_at_cm == ref["acc_cm"]

    def test_no_visible_points(self):
        pred, gt, vis, Ks, depths = oracles.random_track_instance(np.random.default_rng(0))
        vis[:, 1:] = False
        with pytest.raises(EmptyDenominatorError):
            track_metrics(TrackSet(pred, vis), TrackSet(gt, vis), cams_from(Ks, depths))

    def test_order_invariant(self):
        pred, gt, vis, Ks, depths = oracles.random_track_instance(np.random.default_rng(7), S=8)
        cams = cams_from(Ks, depths)
        perm = np.random.default_rng(8).permutation(8)
        a = track_metrics(TrackSet(pred, vis), TrackSet(gt, vis), cams)
        b = track_metrics(TrackSet(pred[perm], vis[perm]), TrackSet(gt[perm], vis[perm]), cams)
        assert a.to_json() == b.to_json()


class TestUmeyama:
    def test_identity(self):
        X = np.random.default_rng(0).normal(size=(20, 3))
        sim = umeyama_align(X, X)
        assert sim.s == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(sim.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(sim.t, 0, atol=1e-12)

    def test_constructed_similarity(self):
        X = np.random.default_rng(1).normal(size=(30, 3))
        Y = 2.0 * X @ rz(30).T + np.array([1.0, 2.0, 3.0])
        sim = umeyama_align(X, Y)
        assert abs(sim.s - 2.0) < 1e-9
        assert np.abs(sim.R - rz(30)).max() < 1e-9
        assert np.abs(sim.t - [1, 2, 3]).max() < 1e-9

    def test_reflection_gives_best_proper_rotation(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(25, 3)) * [3.0, 2.0, 1.0]
        Y = X * [1.0, 1.0, -1.0]
        sim = umeyama_align(X, Y)
        assert np.linalg.det(sim.R) == pytest.approx(1.0, abs=1e-12)
        ours = ((sim.apply(X) - Y) ** 2).sum()

        def cost(z):
            R = Rotation.from_rotvec(z[:3]).as_matrix()
            return ((np.exp(z[3]) * X @ R.T + z[4:] - Y) ** 2).sum()

        best = min(minimize(cost, np.concatenate([rng.normal(size=3), [0.0], np.zeros(3)]), method="BFGS").fun
                   for _ in range(8))
        assert ours <= best + 1e-8
        assert ours == pytest.approx(best, rel=1e-6)

    def test_beats_random_similarities(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(15, 3))
        Y = 1.5 * X @ oracles.random_rotation(rng).T + rng.normal(size=3) + rng.normal(scale=0.1, size=X.shape)
        sim = umeyama_align(X, Y)
        ours = ((sim.apply(X) - Y) ** 2).sum()
        for _ in range(1000):
            s = rng.uniform(0.5, 3.0)
            R = oracles.random_rotation(rng)
            t = rng.normal(size=3)
            assert ours <= ((s * X @ R.T + t - Y) ** 2).sum()

    def test_without_scale(self):
        X = np.random.default_rng(4).normal(size=(10, 3))
        sim = umeyama_align(X, 3.0 * X, with_scale=False)
        assert sim.s == 1.0

    def test_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(AlignmentError):
            umeyama_align(line, line)
        with pytest.raises(AlignmentError):
            umeyama_align(np.eye(3)[:2], np.eye(3)[:2])


class TestPointmapMetrics:
    def test_identity(self):
        X = np.random.default_rng(0).normal(size=(50, 3))
        rep = pointmap_metrics(X, X)
        assert (rep.accuracy, rep.completeness, rep.overall, rep.l1) == (0, 0, 0, 0)

    def test_shifted_square(self):
        gt = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        rep = pointmap_metrics(gt + [0.1, 0, 0], gt)
        assert rep.accuracy == pytest.approx(0.1, abs=1e-12)
        assert rep.completeness == pytest.approx(0.1, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        pred, gt = rng.normal(size=(200, 3)), rng.normal(size=(200, 3))
        rep = pointmap_metrics(pred, gt)
        acc, comp = oracles.chamfer(pred.tolist(), gt.tolist())
        assert rep.accuracy == pytest.approx(acc, abs=1e-12)
        assert rep.completeness == pytest.approx(comp, abs=1e-12)
        assert rep.l1 == pytest.approx(oracles.mean_abs(pred.tolist(), gt.tolist()), abs=1e-12)
        assert abs(rep.overall - (rep.accuracy + rep.completeness) / 2) <= 1e-12

    def test_alignment_removes_similarity(self):
        rng = np.random.default_rng(5)
        gt = rng.normal(size=(40, 3))
        pred = 0.5 * gt @ rz(40).T + 3.0
        assert pointmap_metrics(pred, gt, align=True).overall < 1e-9
        assert pointmap_metrics(pred, gt).overall > 0.1

    def test_validity_mask(self):
        gt = np.random.default_rng(6).normal(size=(10, 3))
        pred = gt.copy()
        pred[3] = 100.0
        valid = np.ones(10, dtype=bool)
        valid[3] = False
        rep = pointmap_metrics(pred, gt, pred_valid=valid)
        assert rep.accuracy == 0 and rep.l1 == 0 and rep.completeness > 0

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            pointmap_metrics(np.zeros((4, 3)), np.zeros((5, 3)))
        rep = pointmap_metrics(np.zeros((4, 3)), np.zeros((5, 3)), compute_l1=False)
        assert rep.l1 is None

    def test_empty(self):
        with pytest.raises(EmptyDenominatorError):
            pointmap_metrics(np.zeros((0, 3)), np.zeros((5, 3)))


class TestPoseMetrics:
    def random_poses(self, seed, n=4):
        rng = np.random.default_rng(seed)
        return [oracles.random_pose(rng) for _ in range(n)]

    def test_identity(self):
        P = self.random_poses(0)
        rep = pose_metrics(P, P)
        for k in (5, 15, 30):
            assert rep.r_at[k] == rep.t_at[k] == rep.auc_at[k] == 100.0

    def test_three_view_construction(self):
        # views 1 and 2 turn 4.5 degrees in opposite senses: pair (1, 2) is 9 degrees off, the rest 4.5
        gt = [pose(t=(0, 0, 0)), pose(t=(1, 0, 0)), pose(t=(0, 1, 0))]
        pred = [gt[0], pose(rz(4.5), (1, 0, 0)), pose(rz(-4.5), (0, 1, 0))]
        rep = pose_metrics(pred, gt)
        assert rep.r_at[5] == pytest.approx(200 / 3, abs=1e-12)
        assert rep.r_at[15] == 100.0
        ref = oracles.pose_metrics(pred, gt)
        assert rep.r_at == pytest.approx(ref["r"], abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        gt = self.random_poses(seed)
        rng = np.random.default_rng(100 + seed)
        pred = [g @ pose(Rotation.from_rotvec(rng.normal(scale=0.15, size=3)).as_matrix(), rng.normal(scale=0.2, size=3))
                for g in gt]
        rep = pose_metrics(pred, gt)
        ref = oracles.pose_metrics(pred, gt)
        np.testing.assert_allclose(rep.rot_errors, ref["rot"], atol=1e-6)
        np.testing.assert_allclose(rep.trans_errors, ref["trans"], atol=1e-9)
        assert rep.r_at == ref["r"] and rep.t_at == ref["t"] and rep.auc_at == pytest.approx(ref["auc"], abs=1e-12)

    @pytest.mark.parametrize("which", ["pred", "gt"])
    def test_global_se3_invariance(self, which):
        gt = self.random_poses(9)
        pred = self.random_poses(10)
        G = oracles.random_pose(np.random.default_rng(11))
        moved = [G @ p for p in (pred if which == "pred" else gt)]
        a = pose_metrics(pred, gt)
        b = pose_metrics(moved, gt) if which == "pred" else pose_metrics(pred, moved)
        assert a.r_at == b.r_at and a.t_at == b.t_at
        np.testing.assert_allclose(a.rot_errors, b.rot_errors, atol=1e-6)

    def test_zero_baseline_pair_skipped(self):
        gt = [pose(), pose(), pose(t=(1, 0, 0))]
        rep = pose_metrics(gt, gt)
        assert rep.n_skipped == 2 and rep.n_pairs == 4

    def test_errors(self):
        with pytest.raises(DimensionError):
            pose_metrics([pose()], [pose()])
        with pytest.raises(EmptyDenominatorError):
            pose_metrics([pose(), pose()], [pose(), pose()])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_percentages_bounded(self, seed):
        rep = pose_metrics(self.random_poses(seed, 3), self.random_poses(seed + 1, 3))
        for d in (rep.r_at, rep.t_at, rep.auc_at):
            assert all(0.0 <= x <= 100.0 for x in d.values())
        for k in (5, 15, 30):
            # every curve sample at t <= k counts a subset of the pairs under k in both errors
            assert rep.auc_at[k] <= min(rep.r_at[k], rep.t_at[k]) + 1e-12

    def test_rotation_angle_small(self):
        assert rotation_angle_deg(rz(1e-6), np.eye(3)) == pytest.approx(1e-6, rel=1e-6)
        assert rotation_angle_deg(rz(170), np.eye(3)) == pytest.approx(170, abs=1e-9)
