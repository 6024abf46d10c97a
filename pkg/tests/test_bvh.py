"""BVH construction, traversal, and visibility tests against brute force."""

import math

import numpy as np
import pytest

from meshtie.bench.oracles import intersect_ray_brute, visible_brute
from meshtie.bvh import build_bvh, is_visible, ray_intersect
from meshtie.mesh import TexturedMesh


def triangle_soup(rng, n, extent=10.0, size=0.4):
    centers = rng.uniform(0, extent, (n, 3))
    verts = []
    for c in centers:
        verts.append(c + rng.uniform(-size, size, 3))
        verts.append(c + rng.uniform(-size, size, 3))
        verts.append(c + rng.uniform(-size, size, 3))
    verts = np.asarray(verts)
    tris = np.arange(3 * n, dtype=np.int32).reshape(n, 3)
    uvs = np.zeros((n, 3, 2))
    tex = np.zeros((4, 4, 3), dtype=np.uint8)
    return TexturedMesh(verts, tris, uvs, tex)


def single_triangle():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    return TexturedMesh(verts, np.array([[0, 1, 2]], dtype=np.int32),
                        np.zeros((1, 3, 2)), np.zeros((4, 4, 3), dtype=np.uint8))


def two_box_scene():
    from meshtie.bench.scene import SceneParams, gen_scene
    return gen_scene(0, SceneParams(tex_tile=32, blobs_per_face=4)).mesh


class TestBuild:
    def test_single_triangle_single_leaf(self):
        mesh = single_triangle()
        bvh = build_bvh(mesh)
        assert bvh.n_nodes == 1
        assert bvh.count[0] == 1
        np.testing.assert_array_equal(bvh.bounds_min[0], [0, 0, 0])
        np.testing.assert_array_equal(bvh.bounds_max[0], [1, 1, 0])

    def test_leaf_partition_is_permutation(self):
        mesh = triangle_soup(np.random.default_rng(0), 1000)
        bvh = build_bvh(mesh)
        seen = []
        for node in range(bvh.n_nodes):
            c = bvh.count[node]
            if c > 0:
                s = bvh.start[node]
                seen.extend(bvh.order[s:s + c].tolist())
        assert sorted(seen) == list(range(1000))

    def test_leaf_size_bound(self):
        mesh = triangle_soup(np.random.default_rng(1), 500)
        bvh = build_bvh(mesh, max_leaf_triangles=4)
        leaf_counts = bvh.count[bvh.count > 0]
        assert leaf_counts.max() <= 4

    def test_depth_bound_on_scattered_triangles(self):
        rng = np.random.default_rng(2)
        for n in (100, 1000):
            mesh = triangle_soup(rng, n)
            bvh = build_bvh(mesh, max_leaf_triangles=4)
            bound = 2 * math.ceil(math.log2(n / 4)) + 4
            assert bvh.depth() <= bound

    def test_child_boxes_inside_parent(self):
        mesh = triangle_soup(np.random.default_rng(3), 200)
        bvh = build_bvh(mesh)
        for node in range(bvh.n_nodes):
            if bvh.count[node] == 0:
                for child in (bvh.left[node], bvh.right[node]):
                    assert np.all(bvh.bounds_min[child] >= bvh.bounds_min[node] - 1e-12)
                    assert np.all(bvh.bounds_max[child] <= bvh.bounds_max[node] + 1e-12)

    def test_empty_mesh_rejected(self):
        mesh = TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32),
                            np.zeros((0, 3, 2)), np.zeros((4, 4, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            build_bvh(mesh)


class TestRayIntersect:
    def test_centroid_hit_barycentrics(self):
        mesh = single_triangle()
        bvh = build_bvh(mesh)
        centroid = mesh.vertices.mean(axis=0)
        hit = ray_intersect(bvh, mesh, centroid + [0, 0, 5.0], np.array([0, 0, -1.0]))
        assert hit is not None
        assert abs(hit.t - 5.0) < 1e-12
        np.testing.assert_allclose(hit.barycentric, [1 / 3, 1 / 3], atol=1e-9)

    def test_parallel_ray_misses(self):
        mesh = single_triangle()
        bvh = build_bvh(mesh)
        hit = ray_intersect(bvh, mesh, np.array([0.0, 0, 1.0]), np.array([1.0, 0, 0]))
        assert hit is None

    def test_t_max_cuts_hits(self):
        mesh = single_triangle()
        bvh = build_bvh(mesh)
        origin = np.array([0.2, 0.2, 5.0])
        direction = np.array([0.0, 0, -1.0])
        assert ray_intersect(bvh, mesh, origin, direction, t_max=4.0) is None
        assert ray_intersect(bvh, mesh, origin, direction, t_max=6.0) is not None

    def test_zero_direction_rejected(self):
        mesh = single_triangle()
        bvh = build_bvh(mesh)
        with pytest.raises(ValueError):
            ray_intersect(bvh, mesh, np.zeros(3), np.zeros(3))

    def test_axis_parallel_rays(self):
        mesh = single_triangle()
        bvh = build_bvh(mesh)
        # direction with exact zeros in two components
        hit = ray_intersect(bvh, mesh, np.array([0.25, 0.25, -3.0]),
                            np.array([0.0, 0.0, 1.0]))
        assert hit is not None and abs(hit.t - 3.0) < 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        mesh = triangle_soup(rng, 2000)
        bvh = build_bvh(mesh)
        disagree = 0
        for _ in range(500):
            origin = rng.uniform(-2, 12, 3)
            direction = rng.normal(0, 1, 3)
            direction /= np.linalg.norm(direction)
            mine = ray_intersect(bvh, mesh, origin, direction)
            brute = intersect_ray_brute(mesh, origin, direction)
            if mine is None or brute is None:
                assert mine is None and brute is None
                continue
            assert abs(mine.t - brute[0]) < 1e-9
            if mine.triangle_index != brute[1]:
                disagree += 1  # co-planar tie, t already checked equal
        assert disagree <= 2


class TestVisibility:
    def test_front_point_visible_camera_in_front(self):
        mesh = two_box_scene()
        # facade of box 1 faces +y; camera out at +y sees it
        X = np.array([-6.67, 3.5, 4.0])
        C = np.array([-6.67, 20.0, 4.0])
        bvh = build_bvh(mesh)
        assert is_visible(bvh, mesh, X, C)

    def test_point_hidden_behind_box(self):
        mesh = two_box_scene()
        bvh = build_bvh(mesh)
        X = np.array([-6.67, 3.5, 4.0])     # front facade point
        C = np.array([-6.67, -20.0, 4.0])   # camera behind the box
        assert not is_visible(bvh, mesh, X, C)

    def test_monotone_in_eps_self(self):
        mesh = two_box_scene()
        bvh = build_bvh(mesh)
        rng = np.random.default_rng(5)
        lo, hi = mesh.aabb()
        for _ in range(200):
            X = rng.uniform(lo, hi)
            C = rng.uniform(lo - 5, hi + 5)
            if np.linalg.norm(X - C) < 1e-6:
                continue
            flags = [is_visible(bvh, mesh, X, C, eps) for eps in (1e-4, 1e-3, 1e-2)]
            # visibility never decreases as the guard grows
            for a, b in zip(flags, flags[1:]):
                assert b or not a

    def test_matches_brute_force_oracle(self):
        mesh = two_box_scene()
        bvh = build_bvh(mesh)
        rng = np.random.default_rng(6)
        lo, hi = mesh.aabb()
        checked = 0
        for _ in range(1000):
            X = rng.uniform(lo, hi)
            C = rng.uniform(lo - 10, hi + 10)
            if np.linalg.norm(X - C) < 1e-3:
                continue
            checked += 1
            assert is_visible(bvh, mesh, X, C) == visible_brute(mesh, X, C)
        assert checked > 900
