import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from priqa.geometry import (
    confidence_filter,
    perturb_camera,
    pixel_grid,
    project,
    rotation_angle_deg,
    unproject,
    warp_to_query,
)
from priqa.scenekit import NEAR_PLANE_DEPTH, NEAR_PLANE_HALF_EXTENT, PLANE_DEPTH, pointmap_from_depth
from priqa.types import Camera, FeatureMap, PointMap

from _oracles import matrix_project as _matrix_project, ray_plane_world as _ray_plane_world
from conftest import random_rotation


def _camera(R=np.eye(3), t=np.zeros(3), f=50.0, size=64):
    return Camera(fx=f, fy=f * 1.1, cx=31.5, cy=30.0, rotation=R, translation=t, width=size, height=size)


class TestProject:
    def test_optical_axis(self):
        pix, z, ok = project(np.array([[0.0, 0.0, 1.0]]), _camera())
        np.testing.assert_allclose(pix[0], [31.5, 30.0])
        assert z[0] == 1.0 and ok[0]

    def test_behind_camera_flagged(self):
        pix, z, ok = project(np.array([[0.0, 0.0, -1.0]]), _camera())
        assert not ok[0]
        assert np.isnan(pix[0]).all()

    def test_matches_matrix_oracle(self, rng):
        for _ in range(20):
            cam = _camera(random_rotation(rng), rng.normal(size=3))
            pts = cam.center + rng.normal(size=(50, 3)) + 5 * cam.rotation[2]
            pix, z, ok = project(pts, cam)
            opix, oz = _matrix_project(pts, cam)
            np.testing.assert_allclose(z, oz, atol=1e-9)
            np.testing.assert_allclose(pix[ok], opix[ok], atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_unproject_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        cam = _camera(random_rotation(rng), rng.normal(size=3))
        pix = rng.uniform(0, 63, size=(40, 2))
        depth = rng.uniform(0.5, 20, size=40)
        back, z, ok = project(unproject(pix, depth, cam), cam)
        assert ok.all()
        np.testing.assert_allclose(back, pix, atol=1e-4)
        np.testing.assert_allclose(z, depth, rtol=1e-9)


class TestPointmapFromDepth:
    def test_principal_point_identity_pose(self):
        from priqa.types import Frame

        cam = Camera(fx=40, fy=40, cx=8, cy=8, rotation=np.eye(3), translation=np.zeros(3), width=16, height=16)
        depth = np.full((16, 16), 3.0)
        pm = pointmap_from_depth(Frame(np.zeros((16, 16, 3)), cam, depth=depth))
        np.testing.assert_allclose(pm.points[8, 8], [0.0, 0.0, 3.0])
        assert (pm.confidence == 1).all()

    def test_translated_camera_matrix_oracle(self):
        from priqa.types import Frame

        cam = Camera(fx=40, fy=40, cx=8, cy=8, rotation=np.eye(3), translation=np.array([1.0, 0, 0]),
                     width=16, height=16)
        pm = pointmap_from_depth(Frame(np.zeros((16, 16, 3)), cam, depth=np.full((16, 16), 2.0)))
        # x_world = T_wc^-1 @ [0, 0, 2, 1]
        expected = (np.linalg.inv(cam.world_to_camera) @ np.array([0, 0, 2.0, 1.0]))[:3]
        np.testing.assert_allclose(pm.points[8, 8], expected)
        np.testing.assert_allclose(expected, [-1.0, 0.0, 2.0])

    def test_roundtrip_through_projection(self, planar2):
        f = planar2[1]
        pm = pointmap_from_depth(f)
        pix, _, ok = project(pm.points.reshape(-1, 3), f.camera)
        assert ok.all()
        np.testing.assert_allclose(pix, pixel_grid(*f.shape), atol=1e-4)

    def test_missing_depth_is_state_error(self, planar2):
        from priqa.errors import StateError
        from priqa.types import Frame

        with pytest.raises(StateError):
            pointmap_from_depth(Frame(planar2[0].image, planar2[0].camera))


class TestWarp:
    def test_identity_warp_is_exact(self, planar2, provider):
        f = planar2[0]
        feats = provider(f)
        w = warp_to_query(feats, pointmap_from_depth(f), f.camera)
        assert w.valid.all()
        np.testing.assert_array_equal(w.warped, feats.data)
        np.testing.assert_array_equal(w.src_index[..., 0], np.arange(64)[:, None] * np.ones((1, 64), int))

    def test_cross_view_correspondence_oracle(self, planar2, provider):
        ref, qry = planar2[0], planar2[1]
        w = warp_to_query(provider(ref), pointmap_from_depth(ref), qry.camera)
        rows, cols = np.nonzero(w.valid)
        src = w.src_index[rows, cols]
        src_pix = np.stack([src[:, 1], src[:, 0]], axis=1).astype(float)
        world = _ray_plane_world(ref.camera, src_pix, PLANE_DEPTH)
        expected, _ = _matrix_project(world, qry.camera)
        err = np.linalg.norm(expected - np.stack([cols, rows], 1), axis=1)
        assert w.valid.mean() > 0.5
        assert np.mean(err <= 1.0) >= 0.99

    def test_two_plane_zbuffer(self, twoplane, provider):
        ref, qry = twoplane[0], twoplane[2]
        w = warp_to_query(provider(ref), pointmap_from_depth(ref), qry.camera)
        # analytic visibility at each query pixel center
        pix = pixel_grid(64, 64)
        near = _ray_plane_world(qry.camera, pix, NEAR_PLANE_DEPTH)
        on_near = ((np.abs(near[:, 0]) <= NEAR_PLANE_HALF_EXTENT) & (np.abs(near[:, 1]) <= NEAR_PLANE_HALF_EXTENT))
        on_near = on_near.reshape(64, 64)
        # label of each warp winner from its source point's world z
        pm = pointmap_from_depth(ref)
        sr, sc = w.src_index[..., 0], w.src_index[..., 1]
        winner_z = np.where(w.valid, pm.points[np.maximum(sr, 0), np.maximum(sc, 0), 2], np.nan)
        winner_near = np.abs(winner_z - NEAR_PLANE_DEPTH) < 1e-6
        interior = ndimage.binary_erosion(on_near, iterations=2)
        exterior = ndimage.binary_erosion(~on_near, iterations=2)
        assert interior.sum() > 20
        # occluded far-plane points never win where the near plane is visible
        assert winner_near[interior & w.valid].all()
        assert not winner_near[exterior & w.valid].any()
        # winner depth equals analytic visible depth in the query camera
        assert (interior & w.valid).sum() >= 0.8 * interior.sum()
        cam_z = (near @ qry.camera.rotation.T + qry.camera.translation)[:, 2].reshape(64, 64)
        sel = interior & w.valid
        np.testing.assert_allclose(w.depth[sel], cam_z[sel], rtol=0.05)

    def test_unfiltered_splat_lets_background_through_holes(self, twoplane, provider):
        ref, qry = twoplane[0], twoplane[2]
        raw = warp_to_query(provider(ref), pointmap_from_depth(ref), qry.camera, bleed_margin=None)
        filt = warp_to_query(provider(ref), pointmap_from_depth(ref), qry.camera)
        assert raw.valid.sum() > filt.valid.sum()
        # the filter only removes pixels, never changes a surviving winner
        np.testing.assert_array_equal(raw.src_index[filt.valid], filt.src_index[filt.valid])

    def test_zbuffer_matches_brute_force(self, rng):
        cam = Camera(fx=6, fy=6, cx=3.5, cy=3.5, rotation=np.eye(3), translation=np.zeros(3), width=8, height=8)
        pts = np.concatenate([rng.uniform(-1, 1, size=(6, 6, 2)), rng.uniform(1, 3, size=(6, 6, 1))], axis=2)
        pm = PointMap(pts, np.ones((6, 6)))
        data = rng.normal(size=(6, 6, 3))
        w = warp_to_query(FeatureMap(data), pm, cam.scaled(6, 6).scaled(6, 6), depth_eps=0.0, bleed_margin=None)
        c6 = cam.scaled(6, 6)
        best = {}
        for r in range(6):
            for c in range(6):
                (u, v), z, ok = (a[0] for a in project(pts[r, c][None], c6))
                col, row = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
                if ok and 0 <= col < 6 and 0 <= row < 6:
                    key = (row, col)
                    if key not in best or z < best[key][0]:
                        best[key] = (z, (r, c))
        assert set(map(tuple, np.argwhere(w.valid))) == set(best)
        for (row, col), (z, src) in best.items():
            assert tuple(w.src_index[row, col]) == src
            assert w.depth[row, col] == z
            np.testing.assert_array_equal(w.warped[row, col], data[src])

    def test_min_conf_keep_excludes_quadrant(self, planar2, provider):
        f = planar2[0]
        pm = pointmap_from_depth(f)
        conf = pm.confidence.copy()
        conf[32:, :32] = 0.1
        w = warp_to_query(provider(f), PointMap(pm.points, conf), f.camera, min_conf_keep=0.8)
        src = w.src_index[w.valid]
        assert not np.any((src[:, 0] >= 32) & (src[:, 1] < 32))
        assert not w.valid[32:, :32].any()

    def test_tie_break_lowest_source_index(self):
        cam = Camera(fx=10, fy=10, cx=1.5, cy=1.5, rotation=np.eye(3), translation=np.zeros(3), width=4, height=4)
        pts = np.zeros((4, 4, 3))
        pts[...] = [0.0, 0.0, 5.0]  # every source lands on the same pixel at equal depth
        data = np.arange(16, dtype=float).reshape(4, 4, 1) + 1
        w = warp_to_query(FeatureMap(data), PointMap(pts, np.ones((4, 4))), cam)
        assert w.valid.sum() == 1
        r, c = np.argwhere(w.valid)[0]
        assert tuple(w.src_index[r, c]) == (0, 0)
        assert w.warped[r, c, 0] == 1.0

    def test_nearer_point_wins(self):
        cam = Camera(fx=10, fy=10, cx=1.5, cy=1.5, rotation=np.eye(3), translation=np.zeros(3), width=4, height=4)
        pts = np.zeros((1, 2, 3))
        pts[0, 0] = [0.0, 0.0, 5.0]
        pts[0, 1] = [0.0, 0.0, 3.0]
        data = np.array([[[1.0], [2.0]]])
        w = warp_to_query(FeatureMap(data), PointMap(pts, np.ones((1, 2))), cam.scaled(1, 2).scaled(1, 2))
        assert w.warped[w.valid][0, 0] == 2.0

    def test_invalid_min_conf(self, planar2, provider):
        f = planar2[0]
        with pytest.raises(ValueError):
            warp_to_query(provider(f), pointmap_from_depth(f), f.camera, min_conf_keep=0.0)


class TestConfidenceFilter:
    def _pm(self, conf):
        conf = np.asarray(conf, dtype=float).reshape(10, -1)
        return PointMap(np.zeros(conf.shape + (3,)), conf)

    def test_zero_drop_is_identity(self, rng):
        pm = self._pm(rng.uniform(size=100))
        assert confidence_filter(pm, 0.0) is pm

    def test_bottom_twenty_percent(self, rng):
        conf = rng.permutation(np.linspace(0.01, 1.0, 100))
        out = confidence_filter(self._pm(conf), 0.2)
        dropped = out.confidence == 0
        assert dropped.sum() == 20
        assert out.confidence[~dropped].min() > self._pm(conf).confidence[dropped].max()

    def test_uniform_confidence_all_dropped(self):
        out = confidence_filter(self._pm(np.full(100, 0.5)), 0.2)
        assert (out.confidence == 0).all()

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(0.0, 0.9), b=st.floats(0.0, 0.9))
    def test_monotone(self, seed, a, b):
        lo, hi = sorted((a, b))
        pm = self._pm(np.random.default_rng(seed).uniform(size=100))
        kept_lo = confidence_filter(pm, lo).confidence > 0
        kept_hi = confidence_filter(pm, hi).confidence > 0
        assert not np.any(kept_hi & ~kept_lo)


class TestPerturbCamera:
    def test_level_zero_identity(self):
        cam = _camera()
        assert perturb_camera(cam, 0.0, 3) is cam

    def test_deterministic(self, rng):
        cam = _camera(random_rotation(rng), rng.normal(size=3))
        a, b = perturb_camera(cam, 0.05, 7), perturb_camera(cam, 0.05, 7)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
        assert (a.fx, a.cx) == (b.fx, b.cx)

    def test_mean_rotation_near_five_degrees(self):
        cam = _camera(t=np.array([0.1, 0.2, 3.0]))
        angles = [rotation_angle_deg(perturb_camera(cam, 0.05, s).rotation, cam.rotation) for s in range(1000)]
        assert 3.5 <= np.mean(angles) <= 6.5

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), level=st.floats(0.0, 0.3))
    def test_output_is_valid_camera(self, seed, level):
        cam = perturb_camera(_camera(t=np.array([0.0, 0.0, 2.0])), level, seed)
        assert isinstance(cam, Camera)
