import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from aocnn import geometry as g
from aocnn.geometry import Cube, OrientedPoint, Plane

from conftest import sym_eigh_oracle


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def residual(points, n, d):
    return float(((points @ n + d) ** 2).sum())


class TestFitPlane:
    def test_unit_square(self):
        pts = [OrientedPoint(p, (0, 0, 1)) for p in [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)]]
        pl = g.fit_plane(pts)
        np.testing.assert_allclose(pl.n, [0, 0, 1], atol=1e-12)
        assert abs(pl.d) < 1e-12

    def test_tilted_plane_with_outward_normals(self):
        rng = np.random.default_rng(1)
        n = unit([1, 1, 1])
        uv = rng.uniform(-1, 1, size=(50, 2))
        u, v = g.plane_basis(n)
        pts = n / math.sqrt(3) + uv[:, :1] * u + uv[:, 1:] * v
        pl = g.fit_plane(pts, np.tile(n, (50, 1)))
        np.testing.assert_allclose(pl.n, n, atol=1e-10)
        assert pl.d == pytest.approx(-1 / math.sqrt(3), abs=1e-10)

    def test_noisy_plane_matches_polynomial_oracle(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(-1, 1, (100, 2)), 0.5 + rng.normal(0, 0.01, 100)])
        pl = g.fit_plane(pts, np.tile([0, 0, 1.0], (100, 1)))
        assert np.linalg.norm(pl.n - [0, 0, 1]) < 0.02
        c = pts - pts.mean(axis=0)
        _, v = sym_eigh_oracle(c.T @ c)
        v = v if v[2] > 0 else -v
        np.testing.assert_allclose(pl.n, v, atol=1e-6)

    def test_residual_optimal_against_random_probes(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            m = int(rng.integers(4, 65))
            pts = rng.normal(size=(m, 3)) * rng.uniform(0.01, 1, 3)
            pl = g.fit_plane(pts, rng.normal(size=(m, 3)))
            best = residual(pts, pl.n, pl.d)
            probes = rng.normal(size=(1000, 3))
            probes /= np.linalg.norm(probes, axis=1, keepdims=True)
            cen = pts.mean(axis=0)
            dev = (pts - cen) @ probes.T
            assert best <= (dev**2).sum(axis=0).min() * (1 + 1e-9) + 1e-15

    def test_translation_equivariance(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(30, 3)) * [1, 0.5, 0.05]
        nrm = np.tile([0, 0, 1.0], (30, 1))
        t = np.array([0.3, -0.2, 0.7])
        a = g.fit_plane(pts, nrm)
        b = g.fit_plane(pts + t, nrm)
        np.testing.assert_allclose(a.n, b.n, atol=1e-9)
        assert b.d == pytest.approx(a.d - a.n @ t, abs=1e-9)

    def test_two_points_fall_back_to_mean_normal(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0]])
        pl = g.fit_plane(pts, np.array([[0, 1.0, 0], [0, 1.0, 0]]))
        np.testing.assert_allclose(pl.n, [0, 1, 0])
        assert pl.d == pytest.approx(0.0)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            g.fit_plane(np.zeros((0, 3)), np.zeros((0, 3)))


class TestOrientPlane:
    def test_agreeing_plane_unchanged(self):
        pl = Plane((0, 0, 1), 0.0)
        out = g.orient_plane(pl, np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)))
        assert out is pl

    def test_flip(self):
        out = g.orient_plane(Plane((0, 0, -1), 0.3), np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1)))
        np.testing.assert_allclose(out.n, [0, 0, 1])
        assert out.d == pytest.approx(-0.3)

    def test_random_agreement_and_idempotence(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            pl = Plane(unit(rng.normal(size=3)), float(rng.normal()))
            nrm = rng.normal(size=(5, 3))
            out = g.orient_plane(pl, np.zeros((5, 3)), nrm)
            assert out.n @ nrm.mean(axis=0) >= 0
            again = g.orient_plane(out, np.zeros((5, 3)), nrm)
            np.testing.assert_array_equal(again.n, out.n)
            assert again.d == out.d

    def test_zero_mean_normal_keeps_orientation(self):
        before = g.ZERO_NORMAL_EVENTS
        pl = Plane((0, 0, -1), 0.2)
        out = g.orient_plane(pl, np.zeros((2, 3)), np.array([[0, 0, 1.0], [0, 0, -1.0]]))
        assert out is pl
        assert g.ZERO_NORMAL_EVENTS == before + 1


class TestClipPlaneToCube:
    big = Cube(np.array([-1.0, -1, -1]), 2.0)

    def test_square(self):
        poly = g.clip_plane_to_cube(Plane((0, 0, 1), 0.0), self.big)
        assert len(poly.vertices) == 4
        np.testing.assert_allclose(np.sort(np.abs(poly.vertices), axis=0), np.tile([1.0, 1, 0], (4, 1)))
        assert poly.area == pytest.approx(4.0)

    def test_disjoint(self):
        assert g.clip_plane_to_cube(Plane((0, 0, 1), -2.0), self.big) is None

    def test_corner_touch_is_empty(self):
        cube = Cube(np.zeros(3), 1.0)
        pl = Plane(unit([1, 1, 1]), 0.0)
        assert g.clip_plane_to_cube(pl, cube) is None
        # the hull area oracle agrees that the touching set has no area
        touching = cube.corners()[np.abs(cube.corners() @ pl.n) < 1e-12]
        assert len(touching) == 1

    def test_hexagon_area_matches_hull(self):
        cube = Cube(np.zeros(3), 1.0)
        pl = Plane(unit([1, 1, 1]), -1.5 / math.sqrt(3))
        poly = g.clip_plane_to_cube(pl, cube)
        assert len(poly.vertices) == 6
        u, v = g.plane_basis(pl.n)
        hull = ConvexHull(np.column_stack([poly.vertices @ u, poly.vertices @ v]))
        assert poly.area == pytest.approx(hull.volume, rel=1e-12)
        assert poly.area == pytest.approx(3 * math.sqrt(3) / 4, rel=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(
        st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1),
        st.floats(-1.2, 1.2),
    )
    def test_polygon_is_planar_convex_and_inside(self, nvec, d):
        pl = Plane(unit(nvec), d)
        cube = Cube(np.array([-0.5, -0.5, -0.5]), 1.0)
        poly = g.clip_plane_to_cube(pl, cube)
        if poly is None:
            return
        verts = poly.vertices
        assert 3 <= len(verts) <= 6
        assert np.all(np.abs(verts @ pl.n + pl.d) < 1e-6)
        assert np.all(cube.contains(verts, tol=1e-6))
        # counter-clockwise about n: every turn has a non-negative component along n
        e = np.roll(verts, -1, axis=0) - verts
        turns = np.cross(e, np.roll(e, -1, axis=0)) @ pl.n
        assert np.all(turns > -1e-9)


def hausdorff_brute(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


class TestPatchFitError:
    cube = Cube(np.zeros(3), 1.0)

    def test_points_on_plane(self):
        pl = Plane((0, 0, 1), -0.5)
        xy = np.stack(np.meshgrid(np.linspace(0, 1, 41), np.linspace(0, 1, 41)), -1).reshape(-1, 2)
        pts = np.column_stack([xy, np.full(len(xy), 0.5)])
        assert g.patch_fit_error(pts, pl, self.cube) <= g.patch_spacing(self.cube)

    def test_offset_point_lower_bound(self):
        pl = Plane((0, 0, 1), -0.5)
        assert g.patch_fit_error(np.array([[0.5, 0.5, 0.6]]), pl, self.cube) >= 0.1

    def test_missing_plane_is_infinite(self):
        assert g.patch_fit_error(np.array([[0.5, 0.5, 0.5]]), Plane((0, 0, 1), -3.0), self.cube) == math.inf

    def test_matches_brute_force_hausdorff(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            pl = Plane(unit(rng.normal(size=3)), 0.0)
            pl = Plane(pl.n, -float(pl.n @ (0.5 + rng.uniform(-0.1, 0.1, 3))))
            pts = rng.uniform(0, 1, size=(int(rng.integers(5, 80)), 3))
            poly = g.clip_plane_to_cube(pl, self.cube)
            samples = g.patch_samples(poly, g.patch_spacing(self.cube))
            assert abs(g.patch_fit_error(pts, pl, self.cube) - hausdorff_brute(pts, samples)) < 1e-12

    def test_symmetric_and_zero_on_coincident_sets(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
        assert g.hausdorff(a, b) == g.hausdorff(b, a)
        assert g.hausdorff(a, a) == 0.0


class TestSamplePatch:
    square = g.PatchPolygon(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]]), Plane((0, 0, 1), 0.0))

    def test_one_cell(self):
        pts = g.sample_patch(self.square, 1.0, 0)
        assert len(pts) == 1
        assert np.all((pts[:, :2] >= 0) & (pts[:, :2] <= 1))

    def test_quadrants(self):
        pts = g.sample_patch(self.square, 0.5, 0)
        assert len(pts) == 4
        quadrant = (pts[:, 0] >= 0.5).astype(int) * 2 + (pts[:, 1] >= 0.5)
        assert sorted(quadrant) == [0, 1, 2, 3]

    def test_triangle_count_tracks_area(self):
        tri = np.array([[0, 0, 0.2], [1, 0, 0.2], [0, 0.8, 0.2]])
        poly = g.PatchPolygon(tri, Plane((0, 0, 1), -0.2))
        x, y = tri[:, 0], tri[:, 1]
        area = 0.5 * abs(x @ np.roll(y, -1) - y @ np.roll(x, -1))
        for seed in range(5):
            pts = g.sample_patch(poly, 0.1, seed)
            assert abs(len(pts) - area / 0.01) <= 0.2 * area / 0.01
            assert np.all(np.abs(pts[:, 2] - 0.2) < 1e-9)
            assert np.all((pts[:, 0] >= -1e-9) & (pts[:, 1] >= -1e-9) & (pts[:, 0] / 1 + pts[:, 1] / 0.8 <= 1 + 1e-9))

    def test_deterministic(self):
        np.testing.assert_array_equal(g.sample_patch(self.square, 0.2, 3), g.sample_patch(self.square, 0.2, 3))

    def test_degenerate_returns_centroid(self):
        flat = g.PatchPolygon(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), Plane((0, 0, 1), 0.0))
        assert len(g.sample_patch(flat, 0.1)) == 1

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            g.sample_patch(self.square, 0.0)
