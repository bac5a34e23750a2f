"""Tests for the synthetic scene generator and training stream."""

from collections import Counter
from dataclasses import replace
from itertools import islice

import numpy as np
import pytest
from scipy import ndimage

from mvmim.errors import ConfigError, GenerationError
from mvmim.geometry import gt_tracks, transform_points
from mvmim.synthdata import SceneSpec, generate_scene, make_training_stream, scene_seed

FAST = SceneSpec(image_size=2, texture="checker")


def plane_homography(cam):
    """Pixel of the world point (x, y, 0) as H @ (x, y, 1)."""
    W = cam.world_to_camera
    return cam.K @ np.column_stack([W[:3, 0], W[:3, 1], W[:3, 3]])


def integer_seeds(rng, n, size):
    return np.stack([rng.integers(0, size, n), rng.integers(0, size, n)], axis=1).astype(float)


@pytest.fixture(scope="module")
def plane_scenes():
    return [generate_scene(SceneSpec(kind="plane", n_views=4, seed=s)) for s in range(4)]


class TestGeometry:
    def test_nadir_plane_has_constant_depth(self):
        batch = generate_scene(SceneSpec(kind="plane", n_views=2, arc_span_deg=180.0, radius=2.5, seed=1))
        assert np.all(batch.depths == 2.5)

    def test_two_plane_foreground_is_closer(self):
        spec = SceneSpec(kind="two_plane", n_views=3, seed=2, fg_size=1.0)
        batch = generate_scene(spec)
        n_fg = 0
        for v, cam in enumerate(batch.cameras):
            on_fg = np.abs(batch.points[v][..., 2] - spec.fg_height) < 1e-9
            on_fg &= batch.depths[v] > 0
            n_fg += int(on_fg.sum())
            # depth of the ground plane along the same rays, from the plane equation
            vv, uu = np.nonzero(on_fg)
            rays = np.stack([(uu - cam.K[0, 2]) / cam.K[0, 0], (vv - cam.K[1, 2]) / cam.K[1, 1], np.ones(len(uu))], 1)
            dz = rays @ cam.R[2]
            ground = -cam.t[2] / dz
            assert np.all(batch.depths[v][on_fg] < ground)
        assert n_fg > 0

    def test_height_field_points_on_surface(self):
        batch = generate_scene(SceneSpec(kind="height_field", n_views=2, image_size=24, seed=3))
        pts = batch.points[0][batch.depths[0] > 0]
        assert np.abs(pts[:, 2] - batch.surface.height(pts[:, :2])).max() < 1e-5

    def test_depth_is_camera_z(self):
        batch = generate_scene(SceneSpec(kind="two_plane", n_views=2, image_size=16, seed=4))
        for v, cam in enumerate(batch.cameras):
            z = transform_points(cam.world_to_camera, batch.points[v].reshape(-1, 3))[:, 2]
            valid = batch.depths[v].ravel() > 0
            np.testing.assert_allclose(z[valid], batch.depths[v].ravel()[valid], rtol=1e-12)

    def test_homography_agrees_with_gt_tracks(self, plane_scenes):
        rng = np.random.default_rng(0)
        for batch in plane_scenes:
            seeds = integer_seeds(rng, 50, 64)
            tr = gt_tracks(batch.cameras, seeds)
            H0inv = np.linalg.inv(plane_homography(batch.cameras[0]))
            for v in range(1, batch.n_views):
                h = (plane_homography(batch.cameras[v]) @ H0inv @ np.column_stack([seeds, np.ones(50)]).T).T
                assert np.abs(h[:, :2] / h[:, 2:] - tr.points[:, v]).max() < 1e-6

    def test_cameras_are_proper(self, plane_scenes):
        for cam in plane_scenes[0].cameras:
            cam.validate()

    def test_non_overlap_footprints_disjoint(self):
        batch = generate_scene(SceneSpec(kind="plane", n_views=3, arc_span_deg=200.0, seed=5))
        xs = [batch.points[v][..., 0] for v in range(3)]
        for a in range(2):
            assert xs[a].max() < xs[a + 1].min()

    def test_camera_inside_geometry(self):
        with pytest.raises(GenerationError):
            generate_scene(SceneSpec(kind="plane", n_views=2, arc_center_deg=180.0, image_size=8))

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            generate_scene(SceneSpec(kind="sphere"))
        with pytest.raises(ConfigError):
            generate_scene(SceneSpec(texture="marble"))


class TestPhotoConsistency:
    def correspondences(self, batch, seed):
        seeds = integer_seeds(np.random.default_rng(seed), 200, 64)
        tr = gt_tracks(batch.cameras, seeds)
        src = batch.images[0][seeds[:, 1].astype(int), seeds[:, 0].astype(int)]
        return tr, src

    def test_rendered_color_matches_exactly(self, plane_scenes):
        for i, batch in enumerate(plane_scenes):
            tr, src = self.correspondences(batch, i)
            for v in range(1, batch.n_views):
                m = tr.visibility[:, v]
                pts, depth = batch.surface.cast(batch.cameras[v], tr.points[m, v])
                assert np.abs(batch.surface.color(pts, depth) - src[m]).max() < 1e-12

    def test_bilinear_image_lookup(self, plane_scenes):
        # resampling the rendered image adds interpolation error on top of the exact colors
        diffs = []
        for i, batch in enumerate(plane_scenes):
            tr, src = self.correspondences(batch, i)
            for v in range(1, batch.n_views):
                m = tr.visibility[:, v]
                uv = tr.points[m, v]
                col = np.stack([ndimage.map_coordinates(batch.images[v][..., k], [uv[:, 1], uv[:, 0]], order=1)
                                for k in range(3)], axis=1)
                diffs.append(np.abs(col - src[m]).max(axis=1))
        d = np.concatenate(diffs)
        assert np.mean(d < 2 / 255) > 0.99
        assert d.max() < 4 / 255


class TestDeterminism:
    def test_same_seed_same_scene(self):
        spec = SceneSpec(kind="two_plane", image_size=16, seed=9)
        assert generate_scene(spec).digest() == generate_scene(spec).digest()

    def test_stream_first_ten_bit_exact(self):
        tmpl = SceneSpec(image_size=16)
        a = [b.digest() for b in islice(make_training_stream(tmpl, seed=3), 10)]
        b = [b.digest() for b in islice(make_training_stream(tmpl, seed=3), 10)]
        assert a == b

    def test_distinct_scenes(self):
        tmpl = SceneSpec(image_size=8)
        digests = [b.digest() for b in islice(make_training_stream(tmpl, seed=0), 100)]
        digests += [b.digest() for b in islice(make_training_stream(tmpl, seed=1), 100)]
        assert len(set(digests)) == 200

    def test_scene_seed_mixing(self):
        seeds = {scene_seed(b, i) for b in range(10) for i in range(100)}
        assert len(seeds) == 1000


class TestStream:
    def test_view_count_histogram(self):
        counts = Counter(b.n_views for b in islice(make_training_stream(FAST, seed=0), 10_000))
        assert set(counts) == set(range(2, 9))
        for k in range(2, 9):
            assert abs(counts[k] / 10_000 - 1 / 7) < 0.02

    def test_views_are_contiguous_on_the_arc(self):
        tmpl = replace(SceneSpec(image_size=8), jitter_deg=0.0)
        for batch in islice(make_training_stream(tmpl, seed=2), 20):
            if batch.n_views > 1:
                assert batch.spec.arc_span_deg == pytest.approx(40.0 / 7 * (batch.n_views - 1))
                assert abs(batch.spec.arc_center_deg) + batch.spec.arc_span_deg / 2 <= 20.0 + 1e-9

    def test_bad_view_range(self):
        with pytest.raises(ConfigError):
            next(make_training_stream(FAST, batch_views=(0, 4)))
        with pytest.raises(ConfigError):
            next(make_training_stream(FAST, batch_views=(2, 9)))

    def test_subset_and_patch_points(self):
        batch = generate_scene(SceneSpec(kind="plane", n_views=3, image_size=16, seed=1))
        sub = batch.subset([2, 0])
        assert sub.n_views == 2 and np.array_equal(sub.images[0], batch.images[2])
        pts, valid = batch.patch_points(8)
        assert pts.shape == (3, 4, 3) and valid.all()
        np.testing.assert_allclose(pts[..., 2], 0.0, atol=1e-12)
