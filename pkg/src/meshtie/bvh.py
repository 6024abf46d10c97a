"""Bounding volume hierarchy for ray-mesh intersection and occlusion tests.

Median-split build on the longest node axis, iterative stack traversal, and
Moller-Trumbore triangle tests vectorized over each visited leaf. The tree
and mesh are immutable after construction, so queries are safe to issue from
any number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from meshtie.mesh import TexturedMesh

__all__ = ["BvhAccel", "RayHit", "build_bvh", "ray_intersect", "is_visible"]

DET_EPS = 1e-9
DEFAULT_SELF_OCCLUSION_EPS = 1e-3


@dataclass(frozen=True)
class RayHit:
    """Nearest intersection: ray parameter, triangle, barycentric (u, v)."""

    t: float
    triangle_index: int
    barycentric: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "barycentric", np.asarray(self.barycentric, dtype=np.float64))
        u, v = self.barycentric
        if self.t < 0 or u < -1e-9 or v < -1e-9 or u + v > 1 + 1e-9:
            raise ValueError("invalid ray hit parameters")


@dataclass(frozen=True)
class BvhAccel:
    """Packed binary AABB tree over a triangle permutation.

    Leaves are runs [start, start+count) of `order`; internal nodes store
    child indices and have count 0.
    """

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    max_leaf_triangles: int
    # Precomputed triangle data in traversal order.
    tri_v0: np.ndarray
    tri_e1: np.ndarray
    tri_e2: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.bounds_min)

    def depth(self) -> int:
        depths = {0: 1}
        best = 1
        stack = [0]
        while stack:
            n = stack.pop()
            if self.count[n] == 0:
                for child in (self.left[n], self.right[n]):
                    depths[child] = depths[n] + 1
                    best = max(best, depths[child])
                    stack.append(child)
        return best


def build_bvh(mesh: TexturedMesh, max_leaf_triangles: int = 4) -> BvhAccel:
    """Median-split BVH on the longest AABB axis of each node."""
    if mesh.n_triangles == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    if max_leaf_triangles < 1:
        raise ValueError("max_leaf_triangles must be >= 1")

    corners = mesh.corners()
    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    centroids = corners.mean(axis=1)

    bounds_min: list[np.ndarray] = []
    bounds_max: list[np.ndarray] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []

    order = np.arange(mesh.n_triangles, dtype=np.int64)

    def new_node(lo: np.ndarray, hi: np.ndarray) -> int:
        bounds_min.append(lo)
        bounds_max.append(hi)
        left.append(-1)
        right.append(-1)
        start.append(-1)
        count.append(0)
        return len(bounds_min) - 1

    # Iterative build; each work item is (node index, slice into `order`).
    root = new_node(tri_min[order].min(axis=0), tri_max[order].max(axis=0))
    stack = [(root, 0, mesh.n_triangles)]
    while stack:
        node, lo, hi = stack.pop()
        seg = order[lo:hi]
        n = hi - lo
        if n <= max_leaf_triangles:
            start[node], count[node] = lo, n
            continue
        cen = centroids[seg]
        extent = cen.max(axis=0) - cen.min(axis=0)
        axis = int(np.argmax(extent))
        if extent[axis] == 0.0:
            # All centroids coincide: splitting cannot separate them.
            start[node], count[node] = lo, n
            continue
        keys = cen[:, axis]
        mid = n // 2
        part = np.argsort(keys, kind="stable")
        order[lo:hi] = seg[part]
        lseg, rseg = order[lo:lo + mid], order[lo + mid:hi]
        lnode = new_node(tri_min[lseg].min(axis=0), tri_max[lseg].max(axis=0))
        rnode = new_node(tri_min[rseg].min(axis=0), tri_max[rseg].max(axis=0))
        left[node], right[node] = lnode, rnode
        stack.append((lnode, lo, lo + mid))
        stack.append((rnode, lo + mid, hi))

    ordered = corners[order]
    return BvhAccel(
        bounds_min=np.asarray(bounds_min),
        bounds_max=np.asarray(bounds_max),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        order=order,
        max_leaf_triangles=max_leaf_triangles,
        tri_v0=np.ascontiguousarray(ordered[:, 0]),
        tri_e1=np.ascontiguousarray(ordered[:, 1] - ordered[:, 0]),
        tri_e2=np.ascontiguousarray(ordered[:, 2] - ordered[:, 0]),
    )


def _leaf_hits(bvh: BvhAccel, s: int, e: int, origin: np.ndarray, direction: np.ndarray):
    """Moller-Trumbore over leaf triangles [s, e); returns best (t, idx, u, v)."""
    v0 = bvh.tri_v0[s:e]
    e1 = bvh.tri_e1[s:e]
    e2 = bvh.tri_e2[s:e]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > DET_EPS
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv_det
    t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t >= 0.0)
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    best = idx[np.argmin(t[idx])]
    return t[best], s + best, u[best], v[best]


def ray_intersect(
    bvh: BvhAccel,
    mesh: TexturedMesh,
    origin: np.ndarray,
    direction: np.ndarray,
    t_max: float = np.inf,
) -> RayHit | None:
    """Nearest hit with 0 <= t <= t_max, or None.

    `direction` need not be unit length; t is expressed in units of its
    norm. Both triangle faces are hit (no winding cull).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if np.linalg.norm(direction) == 0.0:
        raise ValueError("ray direction must be nonzero")

    # Axes the ray is parallel to contribute a containment test instead of
    # slab distances; splitting them out keeps the hot path NaN-free.
    ax = np.flatnonzero(direction != 0.0)
    par = np.flatnonzero(direction == 0.0)
    inv_dir = 1.0 / direction[ax]
    org = origin[ax]

    best_t = t_max
    best = None
    stack = [0]
    bmin, bmax = bvh.bounds_min, bvh.bounds_max
    while stack:
        node = stack.pop()
        if par.size and (
            np.any(origin[par] < bmin[node][par]) or np.any(origin[par] > bmax[node][par])
        ):
            continue
        t1 = (bmin[node][ax] - org) * inv_dir
        t2 = (bmax[node][ax] - org) * inv_dir
        tn = np.minimum(t1, t2).max()
        tf = np.maximum(t1, t2).min()
        if tn > tf or tf < 0.0 or tn > best_t:
            continue
        c = bvh.count[node]
        if c > 0:
            s = bvh.start[node]
            hit = _leaf_hits(bvh, s, s + c, origin, direction)
            if hit is not None and hit[0] < best_t:
                best_t = hit[0]
                best = hit
        else:
            stack.append(bvh.left[node])
            stack.append(bvh.right[node])

    if best is None:
        return None
    t, packed_idx, u, v = best
    return RayHit(
        t=float(t),
        triangle_index=int(bvh.order[packed_idx]),
        barycentric=np.array([u, v]),
    )


def is_visible(
    bvh: BvhAccel,
    mesh: TexturedMesh,
    X: np.ndarray,
    C_cam: np.ndarray,
    eps_self: float = DEFAULT_SELF_OCCLUSION_EPS,
) -> bool:
    """True when nothing occludes X from a camera at C_cam.

    The occlusion ray stops eps_self short of the target point (a relative
    back-off from X) so that the surface X lies on does not occlude itself
    at grazing angles.
    """
    X = np.asarray(X, dtype=np.float64)
    C_cam = np.asarray(C_cam, dtype=np.float64)
    delta = X - C_cam
    dist = float(np.linalg.norm(delta))
    if dist == 0.0:
        raise ValueError("target point coincides with the camera center")
    t_max = dist - eps_self
    if t_max <= 0.0:
        return True
    hit = ray_intersect(bvh, mesh, C_cam, delta / dist, t_max=t_max)
    return hit is None
