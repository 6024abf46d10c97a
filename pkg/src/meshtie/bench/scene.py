"""Synthetic scenes and camera rigs with exactly known ground truth.

A scene is a textured ground plane plus axis-aligned box "buildings". Each
face carries procedural noise texture with planted high-contrast blobs; the
blob centers are the scene landmarks and their world positions are known in
closed form. Rigs model a nadir/oblique aerial strip plus a terrestrial
camera line, and pose perturbation emulates coarse-registration error on
the ground set only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from meshtie.geometry import CameraIntrinsics, CameraPose, project_point
from meshtie.mesh import TexturedMesh
from meshtie.outlier import DisparitySegment

__all__ = [
    "SceneParams",
    "RigParams",
    "SyntheticScene",
    "CameraRig",
    "gen_scene",
    "gen_rig",
    "perturb_poses",
    "pose_looking_at",
    "sigma_for_disparity",
    "gen_disparity_field",
]


@dataclass
class SceneParams:
    extent: float = 40.0          # ground plane side, meters
    n_boxes: int = 2
    box_base: float = 7.0         # box footprint side, meters
    box_height: float = 8.0
    tex_tile: int = 256           # texels per atlas tile
    blobs_per_face: int = 36
    blob_sigma: float = 1.7       # texels
    noise_sigma: float = 2.5      # texels


@dataclass
class RigParams:
    width: int = 640
    height: int = 480
    f_aerial: float = 1600.0
    f_ground: float = 800.0
    aerial_height: float = 30.0
    n_aerial: int = 8
    n_ground: int = 8
    ground_distance: float = 10.0  # from the instrumented facade
    ground_height: float = 1.8


@dataclass(frozen=True)
class SyntheticScene:
    mesh: TexturedMesh
    landmarks: np.ndarray          # (L, 3) world positions on surfaces
    landmark_ids: tuple[str, ...]
    landmark_normals: np.ndarray = None   # (L, 3) face normals
    landmark_sigmas: np.ndarray = None    # (L,) blob radii, world units
    world_scale: float = 1.0       # meters per unit


@dataclass(frozen=True)
class CameraRig:
    aerial: dict[str, tuple[CameraIntrinsics, CameraPose]]
    ground_true: dict[str, tuple[CameraIntrinsics, CameraPose]]
    ground_estimated: dict[str, tuple[CameraIntrinsics, CameraPose]]
    sigma_t: float = 0.0
    sigma_r: float = 0.0


def pose_looking_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose for a camera at `eye` looking at `target`.

    Image x runs along the horizon, image y points downward on screen
    (world-down projected into the view plane).
    """
    eye = np.asarray(eye, dtype=np.float64)
    z_c = np.asarray(target, dtype=np.float64) - eye
    z_c = z_c / np.linalg.norm(z_c)
    up = np.asarray(up, dtype=np.float64)
    x_c = np.cross(z_c, up)
    if np.linalg.norm(x_c) < 1e-9:
        x_c = np.cross(z_c, np.array([0.0, 1.0, 0.0]))
    x_c = x_c / np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    return CameraPose(R=np.stack([x_c, y_c, z_c]), C=eye)


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------

def _tile_texture(rng: np.random.Generator, params: SceneParams):
    """One atlas tile of band-limited noise, plus planted blob centers.

    Returns (tile float in [0,1], list of (u, v, sign) blob slots in
    tile-normalized coordinates).
    """
    ts = params.tex_tile

    def band(sigma):
        n = gaussian_filter(rng.standard_normal((ts, ts)), sigma)
        peak = np.abs(n).max()
        return n / max(peak, 1e-9)

    # Noise bands cover the detector's octaves and keep LSM gradients alive.
    tile = (0.5 + 0.3 * band(params.noise_sigma) + 0.26 * band(1.4)
            + 0.14 * band(0.8))

    slots = []
    min_dist = 0.8 * ts / math.sqrt(max(params.blobs_per_face, 1))
    attempts = 0
    while len(slots) < params.blobs_per_face and attempts < 60 * params.blobs_per_face:
        attempts += 1
        x = rng.uniform(0.14 * ts, 0.86 * ts)
        y = rng.uniform(0.14 * ts, 0.86 * ts)
        if all((x - sx) ** 2 + (y - sy) ** 2 >= min_dist**2 for sx, sy, _ in slots):
            slots.append((x, y, 1.0 if len(slots) % 2 == 0 else -1.0))

    yy, xx = np.mgrid[0:ts, 0:ts].astype(np.float64)
    spots = np.zeros((ts, ts))
    envelope = np.zeros((ts, ts))
    sigmas = []
    for x, y, sign in slots:
        sb = rng.uniform(0.76, 1.24) * params.blob_sigma
        sigmas.append(sb)
        r2 = (xx - x) ** 2 + (yy - y) ** 2
        spots += sign * 0.55 * np.exp(-r2 / (2.0 * sb**2))
        envelope = np.maximum(envelope, np.exp(-r2 / (2.0 * (2.0 * sb) ** 2)))
        # One strong counter-spot anchors the dominant orientation (a bare
        # radially symmetric blob gets an arbitrary, view-unstable one);
        # weaker satellites make each blob's descriptor signature unique.
        # All sit outside the core so its sub-pixel centroid stays put.
        aa = rng.uniform(0.0, 2.0 * math.pi)
        ax, ay = x + 3.0 * sb * math.cos(aa), y + 3.0 * sb * math.sin(aa)
        spots += -sign * 0.55 * np.exp(
            -((xx - ax) ** 2 + (yy - ay) ** 2) / (2.0 * (0.8 * sb) ** 2)
        )
        for _ in range(3):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            rad = rng.uniform(4.5, 7.0) * sb
            amp = rng.uniform(0.25, 0.4) * (1.0 if rng.random() < 0.5 else -1.0)
            ssig = rng.uniform(0.6, 1.0) * sb
            sx, sy = x + rad * math.cos(ang), y + rad * math.sin(ang)
            s2 = (xx - sx) ** 2 + (yy - sy) ** 2
            spots += amp * np.exp(-s2 / (2.0 * ssig**2))
    # Attenuate (not silence) the noise near blobs: the sub-pixel center
    # stays clean while the neighborhood keeps some individuality.
    tile = 0.5 + (tile - 0.5) * (1.0 - 0.97 * envelope) + spots
    tile = np.clip(tile, 0.0, 1.0)
    # Texel index i samples continuous coordinate i + 0.5, so the drawn blob
    # peaks at (x + 0.5, y + 0.5) in texture coordinates.
    return tile, [((x + 0.5) / ts, (y + 0.5) / ts, sb) for (x, y, _), sb in
                  zip(slots, sigmas)]


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    """Deterministic textured scene: ground plane plus closed boxes.

    Every face owns one atlas tile; blob centers become landmarks with
    world coordinates computed from the face parametrization, so they lie
    exactly on the mesh surface.
    """
    rng = np.random.default_rng(seed)
    half = params.extent / 2.0

    # Quads as (origin, edge_u, edge_v) with outward CCW winding.
    quads: list[tuple[np.ndarray, np.ndarray, np.ndarray, bool]] = []

    def add_box(cx, cy, sx, sy, sz):
        x0, x1 = cx - sx / 2, cx + sx / 2
        y0, y1 = cy - sy / 2, cy + sy / 2
        quads.extend([
            # side facing +y (the instrumented facade when cy is smallest)
            (np.array([x0, y1, 0.0]), np.array([x1 - x0, 0, 0]), np.array([0, 0, sz]), True),
            (np.array([x1, y0, 0.0]), np.array([x0 - x1, 0, 0]), np.array([0, 0, sz]), True),
            (np.array([x0, y0, 0.0]), np.array([0, y1 - y0, 0]), np.array([0, 0, sz]), True),
            (np.array([x1, y1, 0.0]), np.array([0, y0 - y1, 0]), np.array([0, 0, sz]), True),
            # top and bottom close the solid
            (np.array([x0, y0, sz]), np.array([x1 - x0, 0, 0]), np.array([0, y1 - y0, 0]), True),
            (np.array([x0, y0, 0.0]), np.array([0, y1 - y0, 0]), np.array([x1 - x0, 0, 0]), False),
        ])

    quads.append((np.array([-half, -half, 0.0]), np.array([params.extent, 0, 0]),
                  np.array([0, params.extent, 0]), True))
    spacing = params.extent / (params.n_boxes + 1)
    for b in range(params.n_boxes):
        cx = -half + spacing * (b + 1)
        add_box(cx, 0.0, params.box_base, params.box_base, params.box_height)

    n_tiles = len(quads)
    cols = int(math.ceil(math.sqrt(n_tiles)))
    rows = int(math.ceil(n_tiles / cols))
    ts = params.tex_tile
    atlas = np.zeros((rows * ts, cols * ts), dtype=np.float64)

    vertices: list[np.ndarray] = []
    triangles: list[list[int]] = []
    uvs: list[np.ndarray] = []
    landmarks: list[np.ndarray] = []
    lm_normals: list[np.ndarray] = []
    lm_sigmas: list[float] = []

    margin = 2.0 / ts  # keep bilinear lookups from bleeding across tiles
    for tile_idx, (origin, eu, ev, with_blobs) in enumerate(quads):
        tile, slots = _tile_texture(rng, params)
        r, c = divmod(tile_idx, cols)
        atlas[r * ts:(r + 1) * ts, c * ts:(c + 1) * ts] = tile

        def to_atlas_uv(a, b):
            u = (c + margin + a * (1 - 2 * margin)) / cols
            v = (r + margin + b * (1 - 2 * margin)) / rows
            return np.array([u, v])

        base = len(vertices)
        vertices.extend([origin, origin + eu, origin + eu + ev, origin + ev])
        quad_uv = [to_atlas_uv(0, 0), to_atlas_uv(1, 0), to_atlas_uv(1, 1), to_atlas_uv(0, 1)]
        triangles.append([base, base + 1, base + 2])
        uvs.append(np.stack([quad_uv[0], quad_uv[1], quad_uv[2]]))
        triangles.append([base, base + 2, base + 3])
        uvs.append(np.stack([quad_uv[0], quad_uv[2], quad_uv[3]]))

        if with_blobs:
            n = np.cross(eu, ev)
            n = n / np.linalg.norm(n)
            texel_world = 0.5 * (np.linalg.norm(eu) + np.linalg.norm(ev)) \
                / (ts * (1 - 2 * margin))
            for bu, bv, sb_tex in slots:
                # Undo the margin inset to express the blob in face coords.
                a = (bu - margin) / (1 - 2 * margin)
                bq = (bv - margin) / (1 - 2 * margin)
                landmarks.append(origin + a * eu + bq * ev)
                lm_normals.append(n)
                lm_sigmas.append(sb_tex * texel_world)

    gray = np.clip(np.rint(atlas * 255.0), 0, 255).astype(np.uint8)
    texture = np.stack([gray, gray, gray], axis=-1)
    mesh = TexturedMesh(
        np.asarray(vertices), np.asarray(triangles, dtype=np.int32),
        np.asarray(uvs), texture,
    )
    ids = tuple(f"L{i:04d}" for i in range(len(landmarks)))
    return SyntheticScene(mesh=mesh, landmarks=np.asarray(landmarks),
                          landmark_ids=ids,
                          landmark_normals=np.asarray(lm_normals),
                          landmark_sigmas=np.asarray(lm_sigmas),
                          world_scale=1.0)


# ---------------------------------------------------------------------------
# Camera rigs
# ---------------------------------------------------------------------------

def _intrinsics(f, params: RigParams, z_near, z_med, z_far) -> CameraIntrinsics:
    return CameraIntrinsics(
        f=f, x0=np.array([params.width / 2.0, params.height / 2.0]),
        w=params.width, h=params.height,
        distortion=np.zeros(5), z_near=z_near, z_med=z_med, z_far=z_far,
    )


def gen_rig(scene_params: SceneParams, rig_params: RigParams = RigParams()) -> CameraRig:
    """Aerial strip (nadir + facade-tilted oblique) and a terrestrial line.

    Ground cameras stand along the +y side of the scene and look at the
    instrumented facade; half the aerial cameras fly nadir over the strip,
    half look obliquely at the same facade so wall patches have compatible
    aerial views.
    """
    half_extent = scene_params.extent / 2.0
    spacing = scene_params.extent / (scene_params.n_boxes + 1)
    facade_y = scene_params.box_base / 2.0
    zc = scene_params.box_height / 2.0
    centers_x = [-half_extent + spacing * (b + 1) for b in range(scene_params.n_boxes)]

    aerial: dict[str, tuple[CameraIntrinsics, CameraPose]] = {}
    hA = rig_params.aerial_height
    n_nadir = rig_params.n_aerial // 2
    n_oblique = rig_params.n_aerial - n_nadir
    cam_a = _intrinsics(rig_params.f_aerial, rig_params,
                        z_near=1.0, z_med=hA, z_far=30.0 * hA)
    for i in range(n_nadir):
        x = centers_x[i % len(centers_x)] + (i // len(centers_x)) * 4.0 - 2.0
        pose = pose_looking_at((x, 2.0, hA), (x, 2.0, 0.0))
        aerial[f"A{i:03d}"] = (cam_a, pose)
    for i in range(n_oblique):
        x = centers_x[i % len(centers_x)] + ((i // len(centers_x)) - 0.5) * 5.0
        eye = np.array([x, facade_y + 0.9 * hA, hA])
        target = np.array([centers_x[i % len(centers_x)], facade_y, zc])
        pose = pose_looking_at(eye, target)
        aerial[f"A{n_nadir + i:03d}"] = (cam_a, pose)

    ground: dict[str, tuple[CameraIntrinsics, CameraPose]] = {}
    gy = facade_y + rig_params.ground_distance
    cam_g = _intrinsics(rig_params.f_ground, rig_params,
                        z_near=0.5, z_med=rig_params.ground_distance,
                        z_far=20.0 * rig_params.ground_distance)
    for i in range(rig_params.n_ground):
        frac = i / max(rig_params.n_ground - 1, 1)
        box = centers_x[min(int(frac * len(centers_x)), len(centers_x) - 1)]
        x = box + (frac * len(centers_x) % 1.0 - 0.5) * 0.8 * scene_params.box_base
        eye = np.array([x, gy, rig_params.ground_height])
        target = np.array([x * 0.9 + box * 0.1, facade_y, zc * 0.8])
        ground[f"G{i:03d}"] = (cam_g, pose_looking_at(eye, target))

    return CameraRig(aerial=aerial, ground_true=ground,
                     ground_estimated=dict(ground))


def _small_rotation(rng: np.random.Generator, sigma_r: float) -> np.ndarray:
    if sigma_r <= 0:
        return np.eye(3)
    axis = rng.normal(0.0, 1.0, 3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal(0.0, sigma_r)
    K = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def perturb_poses(rig: CameraRig, sigma_t: float, sigma_r: float, seed: int) -> CameraRig:
    """Gaussian position noise and small-angle attitude noise on the ground
    poses only; the true poses stay available for scoring.

    Coarse registration error is mostly a block-level misalignment, so the
    noise splits into one shared rigid component (80% of each sigma) plus
    independent per-camera jitter (the rest), both Gaussian.
    """
    if sigma_t < 0 or sigma_r < 0:
        raise ValueError("perturbation sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    dC_shared = rng.normal(0.0, 0.8 * sigma_t, 3) if sigma_t > 0 else np.zeros(3)
    dR_shared = _small_rotation(rng, 0.8 * sigma_r)
    estimated: dict[str, tuple[CameraIntrinsics, CameraPose]] = {}
    for image_id, (cam, pose) in rig.ground_true.items():
        dC = dC_shared + (rng.normal(0.0, 0.2 * sigma_t, 3) if sigma_t > 0 else 0.0)
        dR = _small_rotation(rng, 0.2 * sigma_r) @ dR_shared
        # Re-orthonormalize so the pose invariant holds to 1e-9.
        U, _, Vt = np.linalg.svd(dR @ pose.R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        estimated[image_id] = (cam, CameraPose(R=R, C=pose.C + dC))
    return CameraRig(aerial=rig.aerial, ground_true=rig.ground_true,
                     ground_estimated=estimated, sigma_t=sigma_t, sigma_r=sigma_r)


def sigma_for_disparity(target_px: float, f: float, depth: float) -> tuple[float, float]:
    """Split a target pixel disparity between translation and rotation noise.

    Returns (sigma_t, sigma_r) sized so a typical draw induces a median
    disparity near `target_px` for points at `depth`; individual draws
    still scatter widely (half-normal magnitudes), so harnesses needing a
    calibrated run should verify the realized disparity and redraw.
    """
    return target_px * depth / f, target_px / f


# ---------------------------------------------------------------------------
# Labeled disparity fields for the outlier-filter stage
# ---------------------------------------------------------------------------

def gen_disparity_field(
    seed: int,
    n_inliers: int = 140,
    n_outliers: int = 60,
    image_size: tuple[int, int] = (640, 480),
    disparity_px: float = 6.4,
    noise_px: float = 0.25,
):
    """Two-view synthetic match field with known inlier labels.

    Inliers are projections of 3D points through a true and a perturbed
    ground camera (translation-dominant perturbation, so a genuine epipolar
    geometry exists). Injected outliers split evenly between uniform random
    rematches (caught by the length gate) and local random-direction fakes
    with inlier-scale lengths (caught only by the direction constraint and
    the epipolar model).

    Returns (segments, labels) with labels[i] True for inliers.
    """
    rng = np.random.default_rng(seed)
    w, h = image_size
    f = 800.0
    cam = CameraIntrinsics(f=f, x0=np.array([w / 2, h / 2]), w=w, h=h,
                           z_near=0.5, z_med=10.0, z_far=100.0)
    pose_true = pose_looking_at((0.0, 0.0, 1.8), (0.0, 10.0, 1.8))

    depth_med = 10.0
    t_shift = disparity_px * depth_med / f
    direction = rng.normal(0, 1.0, 3)
    direction /= np.linalg.norm(direction)
    pose_est = CameraPose(R=pose_true.R, C=pose_true.C + t_shift * direction)

    segments: list[DisparitySegment] = []
    labels: list[bool] = []
    idx = 0
    while idx < n_inliers + n_outliers:
        # Points across a depth range in front of the camera.
        depth = rng.uniform(6.0, 20.0)
        px = rng.uniform(0.08 * w, 0.92 * w)
        py = rng.uniform(0.08 * h, 0.92 * h)
        ray = np.array([(px - w / 2) / f, (py - h / 2) / f, 1.0])
        X = pose_true.cam_to_world(ray * depth)
        try:
            p = project_point(cam, pose_true, X) + rng.normal(0, noise_px, 2)
            q = project_point(cam, pose_est, X) + rng.normal(0, noise_px, 2)
        except ValueError:
            continue
        if not (0 <= q[0] < w and 0 <= q[1] < h and 0 <= p[0] < w and 0 <= p[1] < h):
            continue
        inlier = idx < n_inliers
        if not inlier:
            if (idx - n_inliers) % 2 == 0:
                q = rng.uniform([0.0, 0.0], [w, h])
            else:
                angle = rng.uniform(0, 2 * math.pi)
                length = rng.uniform(0.2, 1.6) * disparity_px
                q = p - length * np.array([math.cos(angle), math.sin(angle)])
        segments.append(DisparitySegment(p=p, q=q, index=idx))
        labels.append(inlier)
        idx += 1
    return segments, np.asarray(labels, dtype=bool)
