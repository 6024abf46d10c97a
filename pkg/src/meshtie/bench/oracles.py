"""Deliberately naive reference implementations used to check the main path.

Nothing here imports from the production modules' algorithm internals: ray
casting goes plane-then-barycentric over all triangles, neighbor searches
are explicit distance sorts, the segment sweep is all-pairs, NCC follows its
textbook definition term by term, and the plane transfer walks an explicit
ray-plane intersection instead of a homography. All are O(n^2)-ish and meant
for desk-scale inputs only.
"""

from __future__ import annotations

import math

import numpy as np

from meshtie.geometry import CameraIntrinsics, CameraPose
from meshtie.mesh import TexturedMesh

__all__ = [
    "intersect_ray_brute",
    "intersect_batch_brute",
    "visible_brute",
    "intersection_sweep_oracle",
    "direction_oracle",
    "nearest_two_oracle",
    "plane_transfer_oracle",
    "ncc_oracle",
    "brown_distort_oracle",
    "radial_undistort_bisection",
    "raycast_view",
]


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def _plane_barycentric(corners, origin, direction):
    """Per-triangle plane hit + inside test via barycentric dot products.

    corners: (M, 3, 3). Returns (t, u, v, hit_mask) arrays over triangles.
    """
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    denom = n @ direction
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("ij,ij->i", n, a - origin) / denom
    hit = np.isfinite(t) & (np.abs(denom) > 1e-300) & (t >= 0.0)
    p = origin + t[:, None] * direction
    ap = p - a
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    d20 = np.einsum("ij,ij->i", ap, ab)
    d21 = np.einsum("ij,ij->i", ap, ac)
    det = d00 * d11 - d01 * d01
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (d11 * d20 - d01 * d21) / det
        v = (d00 * d21 - d01 * d20) / det
    hit &= np.isfinite(u) & np.isfinite(v)
    hit &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return t, u, v, hit


def intersect_ray_brute(mesh: TexturedMesh, origin, direction, t_max=np.inf):
    """Nearest hit over all triangles: (t, triangle_index, u, v) or None."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t, u, v, hit = _plane_barycentric(mesh.corners(), origin, direction)
    hit &= t <= t_max
    if not hit.any():
        return None
    idx = np.flatnonzero(hit)
    best = idx[np.argmin(t[idx])]
    return float(t[best]), int(best), float(u[best]), float(v[best])


def intersect_batch_brute(mesh: TexturedMesh, origins, directions):
    """Nearest hits for many rays: loops triangles, vectorizes over rays.

    Returns (t, tri, u, v) arrays; t = +inf and tri = -1 where nothing hits.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    corners = mesh.corners()
    for m in range(mesh.n_triangles):
        a, b, c = corners[m]
        ab, ac = b - a, c - a
        nrm = np.cross(ab, ac)
        denom = directions @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((a - origins) @ nrm) / denom
        ok = np.isfinite(t) & (t >= 0.0) & (t < best_t)
        if not ok.any():
            continue
        p = origins[ok] + t[ok, None] * directions[ok]
        ap = p - a
        d00 = ab @ ab
        d01 = ab @ ac
        d11 = ac @ ac
        det = d00 * d11 - d01 * d01
        if det <= 0:
            continue
        d20 = ap @ ab
        d21 = ap @ ac
        u = (d11 * d20 - d01 * d21) / det
        v = (d00 * d21 - d01 * d20) / det
        inside = (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
        rows = np.flatnonzero(ok)[inside]
        best_t[rows] = t[rows]
        best_tri[rows] = m
        best_u[rows] = u[inside]
        best_v[rows] = v[inside]
    return best_t, best_tri, best_u, best_v


def visible_brute(mesh: TexturedMesh, X, C, eps_self: float = 1e-3) -> bool:
    """Occlusion test by brute-force ray casting from the camera center."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    delta = X - C
    dist = float(np.linalg.norm(delta))
    t_max = dist - eps_self
    if t_max <= 0:
        return True
    return intersect_ray_brute(mesh, C, delta / dist, t_max=t_max) is None


# ---------------------------------------------------------------------------
# Segment-filter oracles
# ---------------------------------------------------------------------------

def _orient(o, p, q):
    return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])


def _crosses(a1, a2, b1, b2):
    d1 = _orient(a1, a2, b1)
    d2 = _orient(a1, a2, b2)
    d3 = _orient(b1, b2, a1)
    d4 = _orient(b1, b2, a2)
    return d1 * d2 < 0 and d3 * d4 < 0


def intersection_sweep_oracle(p: np.ndarray, q: np.ndarray, K: int) -> np.ndarray:
    """All-pairs greedy crossing removal; returns the surviving index set.

    Same ascending-length sweep as the production filter, but neighbors come
    from an explicit (distance, index) sort instead of a KD-tree.
    """
    n = len(p)
    m = p - q
    lengths = np.linalg.norm(m, axis=1)
    mids = 0.5 * (p + q)
    order = sorted(range(n), key=lambda i: (lengths[i], i))
    rank = {idx: r for r, idx in enumerate(order)}
    removed = [False] * n
    for i in order:
        if removed[i]:
            continue
        dists = sorted(
            ((np.linalg.norm(mids[j] - mids[i]), j) for j in range(n)
             if j != i and not removed[j]),
        )
        for _, j in dists[:K]:
            if _crosses(p[i], q[i], p[j], q[j]):
                loser = i if rank[i] > rank[j] else j
                removed[loser] = True
                if loser == i:
                    break
    return np.flatnonzero(~np.asarray(removed))


def direction_oracle(p: np.ndarray, q: np.ndarray, K: int, tau_a: float) -> np.ndarray:
    """Single-pass dominant-direction filter; returns surviving indices."""
    n = len(p)
    m = p - q
    mids = 0.5 * (p + q)
    keep = []
    for i in range(n):
        dists = sorted(
            ((np.linalg.norm(mids[j] - mids[i]), j) for j in range(n) if j != i)
        )
        neighbors = [j for _, j in dists[:min(K, n - 1)]]
        dominant = m[neighbors].sum(axis=0) if neighbors else np.zeros(2)
        lm = np.linalg.norm(m[i])
        ld = np.linalg.norm(dominant)
        if lm == 0.0 or ld < 1e-9:
            keep.append(i)
            continue
        cosang = min(1.0, max(-1.0, float(m[i] @ dominant) / (lm * ld)))
        if math.acos(cosang) <= tau_a:
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def nearest_two_oracle(a: np.ndarray, b: np.ndarray):
    """Double-loop nearest and second-nearest neighbor search.

    Returns (j1, j2, d1, d2) arrays per row of `a`; j2 = -1 when `b` has a
    single element.
    """
    n, k = len(a), len(b)
    j1 = np.full(n, -1, dtype=np.int64)
    j2 = np.full(n, -1, dtype=np.int64)
    d1 = np.full(n, np.inf)
    d2 = np.full(n, np.inf)
    for i in range(n):
        for j in range(k):
            d = math.sqrt(float(((a[i] - b[j]) ** 2).sum()))
            if d < d1[i] or (d == d1[i] and j < j1[i]):
                j2[i], d2[i] = j1[i], d1[i]
                j1[i], d1[i] = j, d
            elif d < d2[i] or (d == d2[i] and j < j2[i]):
                j2[i], d2[i] = j, d
    return j1, j2, d1, d2


# ---------------------------------------------------------------------------
# Geometry oracles
# ---------------------------------------------------------------------------

def plane_transfer_oracle(
    cam_a: CameraIntrinsics,
    pose_a: CameraPose,
    cam_g: CameraIntrinsics,
    pose_g: CameraPose,
    plane_point: np.ndarray,
    plane_normal: np.ndarray,
    pixel_a: np.ndarray,
) -> np.ndarray:
    """Transfer an aerial pixel to the ground image through an explicit
    ray-plane intersection (no homography involved), distortion-free."""
    pixel_a = np.asarray(pixel_a, dtype=np.float64)
    ray_cam = np.array([
        (pixel_a[0] - cam_a.x0[0]) / cam_a.f,
        (pixel_a[1] - cam_a.x0[1]) / cam_a.f,
        1.0,
    ])
    ray_world = pose_a.R.T @ ray_cam
    denom = float(np.asarray(plane_normal) @ ray_world)
    if abs(denom) < 1e-15:
        raise ValueError("ray parallel to the plane")
    t = float(np.asarray(plane_normal) @ (np.asarray(plane_point) - pose_a.C)) / denom
    X = pose_a.C + t * ray_world
    Xc = pose_g.R @ (X - pose_g.C)
    return cam_g.f * Xc[:2] / Xc[2] + cam_g.x0


def ncc_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Textbook normalized cross-correlation, scalar accumulation."""
    am = float(np.mean(a))
    bm = float(np.mean(b))
    num = float(((a - am) * (b - bm)).sum())
    den = math.sqrt(float(((a - am) ** 2).sum()) * float(((b - bm) ** 2).sum()))
    return 0.0 if den == 0.0 else num / den


def brown_distort_oracle(coeffs, v):
    """Five-parameter Brown polynomial, written out in plain scalars."""
    k1, k2, k3, p1, p2 = [float(c) for c in coeffs]
    x, y = float(v[0]), float(v[1])
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.array([xd, yd])


def radial_undistort_bisection(k1: float, xd: float, lo=0.0, hi=2.0, iters=200) -> float:
    """Invert x * (1 + k1 x^2) = xd on [lo, hi] by bisection."""
    def f(x):
        return x * (1.0 + k1 * x * x) - xd

    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise ValueError("bisection bracket does not straddle the root")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Per-pixel ray-cast rendering oracle
# ---------------------------------------------------------------------------

def _texture_lookup(texture: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Own bilinear texture fetch (clamp-to-edge, texel centers at i+0.5)."""
    th, tw = texture.shape[:2]
    x = np.clip(u * tw - 0.5, 0.0, tw - 1.0)
    y = np.clip(v * th - 0.5, 0.0, th - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    tex = texture.astype(np.float64)
    return ((tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx) * (1 - fy)
            + (tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx) * fy)


def raycast_view(mesh: TexturedMesh, cam: CameraIntrinsics, pose: CameraPose):
    """Render a view by casting one ray through every pixel center.

    Returns (depth, color, hit) with eye-space depth (+inf on miss), float
    RGB in 0..255, and a hit mask. Distortion-free, like the rasterizer.
    """
    w, h = cam.w, cam.h
    xs = (np.arange(w) + 0.5 - cam.x0[0]) / cam.f
    ys = (np.arange(h) + 0.5 - cam.x0[1]) / cam.f
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ pose.R  # R^T applied to rows
    origins = np.broadcast_to(pose.C, dirs_world.shape)

    # Rays keep camera depth 1 in their direction, so t equals eye depth.
    t, tri, u, v = intersect_batch_brute(mesh, origins, dirs_world)
    hit = tri >= 0
    t = np.where((t >= cam.z_near) & (t <= cam.z_far) & hit, t, np.inf)
    hit = np.isfinite(t)

    color = np.zeros((w * h, 3))
    if hit.any():
        uv = mesh.uvs[tri[hit]]
        bu = u[hit][:, None]
        bv = v[hit][:, None]
        interp = uv[:, 0] * (1 - bu - bv) + uv[:, 1] * bu + uv[:, 2] * bv
        color[hit] = _texture_lookup(mesh.texture, interp[:, 0], interp[:, 1])
    return t.reshape(h, w), color.reshape(h, w, 3), hit.reshape(h, w)
