"""Propagation of ground-synthesized matches to the original aerial images.

Each surviving match lifts to an oriented 3D patch (point + normal + world
window) from the synthesized depth and normal buffers. Aerial views that
contain the patch, face it, and see it unoccluded are selected; for each,
the local aerial neighborhood is rectified into the ground image frame
through the plane-induced homography, located by integer NCC search, and
polished by least-squares matching (affine + gain/bias Gauss-Newton). The
refined position maps back through the homography, with lens distortion
re-applied, to give the final aerial-image coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from meshtie.bvh import BvhAccel, is_visible
from meshtie.geometry import (
    CameraIntrinsics,
    CameraPose,
    Homography,
    PointBehindCameraError,
    apply_homography,
    camera_matrix,
    compute_homography,
    distort,
    project_point,
    relative_transform,
)
from meshtie.mesh import TexturedMesh
from meshtie.outlier import DisparitySegment
from meshtie.render import FrameBuffers, depth_to_xyz, gsd_at

__all__ = [
    "OrientedPatch",
    "ViewSelection",
    "RefinedCorrespondence",
    "RectifiedPatch",
    "AerialView",
    "PropagateConfig",
    "PropagationStats",
    "FullyInvalidWindowError",
    "build_patch",
    "patch_corners",
    "select_views",
    "warp_patch",
    "extract_template",
    "ncc_search",
    "lsm_refine",
    "back_project",
    "propagate_all",
]


class FullyInvalidWindowError(ValueError):
    """The warped window contains no valid aerial samples at all."""


@dataclass(frozen=True)
class OrientedPatch:
    """Oriented object-space patch: center X, unit normal toward the ground
    camera, world-size window, and the pixel footprint it came from."""

    X: np.ndarray
    n: np.ndarray
    size: float
    delta: float
    ground_px: np.ndarray
    synth_px: np.ndarray
    match_index: int = -1

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "n", np.asarray(self.n, dtype=np.float64))
        object.__setattr__(self, "ground_px", np.asarray(self.ground_px, dtype=np.float64))
        object.__setattr__(self, "synth_px", np.asarray(self.synth_px, dtype=np.float64))
        if abs(np.linalg.norm(self.n) - 1.0) > 1e-6:
            raise ValueError("patch normal must be unit length")
        if self.size <= 0 or self.delta <= 0:
            raise ValueError("patch size and GSD must be positive")


@dataclass(frozen=True)
class ViewSelection:
    """Aerial view verdicts for one patch; accepted + per-view reject reason."""

    patch: OrientedPatch
    accepted: tuple[str, ...]
    rejected: dict[str, str]


@dataclass(frozen=True)
class RefinedCorrespondence:
    """Final ground-aerial correspondence; only LSM-converged matches exist."""

    ground_image_id: str
    ground_px: np.ndarray
    aerial_image_id: str
    aerial_px: np.ndarray
    ncc: float
    lsm_status: str
    iterations: int
    match_index: int = -1

    def __post_init__(self):
        object.__setattr__(self, "ground_px", np.asarray(self.ground_px, dtype=np.float64))
        object.__setattr__(self, "aerial_px", np.asarray(self.aerial_px, dtype=np.float64))
        if self.lsm_status != "converged":
            raise ValueError("correspondences are exported only after LSM convergence")
        if not (-1.0 <= self.ncc <= 1.0):
            raise ValueError("NCC score must lie in [-1, 1]")


@dataclass(frozen=True)
class RectifiedPatch:
    """Aerial content resampled onto a unit-spaced ground-frame grid.

    data/valid are (window, window); grid position (col, row) corresponds to
    ground-frame pixel center_ground + (col - c, row - c), c = (window-1)/2.
    """

    data: np.ndarray
    valid: np.ndarray
    center_ground: np.ndarray
    homography: Homography


@dataclass(frozen=True)
class AerialView:
    image_id: str
    image: np.ndarray  # grayscale, unit range
    cam: CameraIntrinsics
    pose: CameraPose


@dataclass
class PropagateConfig:
    w_s: int = 31           # object-space patch window, pixels of GSD
    w_c: int = 15           # correlation template width, ground pixels
    search_radius: int = 8  # integer NCC search radius, ground pixels
    tau_c: float = 0.75     # minimum NCC score
    tau_n: float = math.pi / 2  # patch-vs-view consistency angle
    eps_self: float = 1e-3  # self-occlusion guard, world units
    max_lsm_iters: int = 20
    lsm_conv_tol: float = 0.01   # px, translation update
    lsm_div_step: float = 2.0    # px, single-step divergence bound
    lsm_margin: int = 4     # extra rectified border so LSM can warp freely
    debug_transfer_check: bool = False

    def __post_init__(self):
        if self.w_s % 2 == 0 or self.w_c % 2 == 0:
            raise ValueError("window sizes must be odd so a center pixel exists")


@dataclass
class PropagationStats:
    n_matches: int = 0
    masked: int = 0
    template_out_of_bounds: int = 0
    views_accepted: int = 0
    rejected_containment: int = 0
    rejected_consistency: int = 0
    rejected_visibility: int = 0
    degenerate_homography: int = 0
    warp_invalid: int = 0
    pruned: int = 0
    diverged: int = 0
    emitted: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Patch construction and view selection
# ---------------------------------------------------------------------------

def build_patch(
    segment: DisparitySegment,
    buffers: FrameBuffers,
    w_s: int = 31,
) -> OrientedPatch | None:
    """Lift a surviving match into an oriented patch, or None when the
    synthesized pixel under the match carries no geometry."""
    i = int(segment.q[0])
    j = int(segment.q[1])
    if not (0 <= i < buffers.cam.w and 0 <= j < buffers.cam.h):
        return None
    X = depth_to_xyz(buffers, (i, j))
    if X is None:
        return None
    depth = float(buffers.depth[j, i])
    delta = gsd_at(depth, buffers.cam.f)
    return OrientedPatch(
        X=X,
        n=buffers.normal[j, i],
        size=w_s * delta,
        delta=delta,
        ground_px=segment.p,
        synth_px=segment.q,
        match_index=segment.index,
    )


def _tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tangent frame: Gram-Schmidt of the world axis with the
    smallest |component| along n."""
    axis = int(np.argmin(np.abs(n)))
    e = np.zeros(3)
    e[axis] = 1.0
    t1 = e - (e @ n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2


def patch_corners(patch: OrientedPatch) -> np.ndarray:
    """Four corners (4, 3) of the square patch in its tangent plane."""
    t1, t2 = _tangent_basis(patch.n)
    half = 0.5 * patch.size
    return np.array([
        patch.X + half * (s1 * t1 + s2 * t2)
        for s1 in (-1.0, 1.0)
        for s2 in (-1.0, 1.0)
    ])


def select_views(
    patch: OrientedPatch,
    views: list[AerialView],
    bvh: BvhAccel,
    mesh: TexturedMesh,
    tau_n: float = math.pi / 2,
    eps_self: float = 1e-3,
) -> ViewSelection:
    """Accept the aerial views that pass containment, consistency, and
    visibility, in that order; rejected views record the first failure."""
    corners = patch_corners(patch)
    accepted: list[str] = []
    rejected: dict[str, str] = {}
    for view in views:
        try:
            px = project_point(view.cam, view.pose, corners)
            contained = bool(
                np.all((px[:, 0] >= 0) & (px[:, 0] < view.cam.w)
                       & (px[:, 1] >= 0) & (px[:, 1] < view.cam.h))
            )
        except PointBehindCameraError:
            contained = False
        if not contained:
            rejected[view.image_id] = "containment"
            continue
        # The patch normal points at the ground camera; the aerial view looks
        # into the surface, so compare its axis against the flipped normal.
        cosang = np.clip(-patch.n @ view.pose.view_dir, -1.0, 1.0)
        if math.acos(cosang) >= tau_n:
            rejected[view.image_id] = "consistency"
            continue
        if not is_visible(bvh, mesh, patch.X, view.pose.C, eps_self):
            rejected[view.image_id] = "visibility"
            continue
        accepted.append(view.image_id)
    return ViewSelection(patch=patch, accepted=tuple(accepted), rejected=rejected)


# ---------------------------------------------------------------------------
# Rectification and correlation
# ---------------------------------------------------------------------------

def _sample_bilinear_masked(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear samples plus validity (full support inside the image)."""
    h, w = image.shape
    valid = (x >= 0.5) & (x <= w - 0.5) & (y >= 0.5) & (y <= h - 0.5)
    xf = np.clip(x - 0.5, 0.0, w - 1.0)
    yf = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(xf).astype(np.int64)
    y0 = np.floor(yf).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xf - x0
    fy = yf - y0
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy, valid


def warp_patch(
    aerial_image: np.ndarray,
    H: Homography,
    center_a: np.ndarray,
    window: int,
    cam_a: CameraIntrinsics | None = None,
) -> RectifiedPatch:
    """Resample a local aerial patch onto the ground-image frame.

    The target grid is `window` x `window` unit-spaced ground pixels centered
    at H(center_a); each grid point maps through H^-1 to undistorted aerial
    coordinates, has the aerial lens distortion re-applied when `cam_a`
    carries one, and samples the aerial image bilinearly. Raises
    FullyInvalidWindowError when no grid point lands inside the image.
    """
    if window % 2 == 0:
        raise ValueError("window must be odd")
    center_ground = apply_homography(H, np.asarray(center_a, dtype=np.float64))
    half = (window - 1) // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    gx, gy = np.meshgrid(center_ground[0] + d, center_ground[1] + d)
    grid = np.stack([gx, gy], axis=-1)
    aerial_undist = apply_homography(H.inverse(), grid.reshape(-1, 2))
    if cam_a is not None and cam_a.has_distortion:
        v = (aerial_undist - cam_a.x0) / cam_a.f
        aerial_pix = cam_a.f * distort(cam_a, v) + cam_a.x0
    else:
        aerial_pix = aerial_undist
    data, valid = _sample_bilinear_masked(
        aerial_image, aerial_pix[:, 0], aerial_pix[:, 1]
    )
    data = data.reshape(window, window)
    valid = valid.reshape(window, window)
    data[~valid] = 0.0
    if not valid.any():
        raise FullyInvalidWindowError("warped window lies entirely outside the aerial image")
    return RectifiedPatch(data=data, valid=valid, center_ground=center_ground, homography=H)


def extract_template(image: np.ndarray, center: np.ndarray, w_c: int) -> np.ndarray | None:
    """w_c x w_c bilinear crop around a sub-pixel center; None if any sample
    falls outside the image."""
    half = (w_c - 1) // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    gx, gy = np.meshgrid(center[0] + d, center[1] + d)
    data, valid = _sample_bilinear_masked(image, gx.ravel(), gy.ravel())
    if not valid.all():
        return None
    return data.reshape(w_c, w_c)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a0 = a - a.mean()
    b0 = b - b.mean()
    denom = math.sqrt(float((a0 * a0).sum()) * float((b0 * b0).sum()))
    if denom == 0.0:
        return 0.0
    return float((a0 * b0).sum() / denom)


def ncc_search(
    template: np.ndarray,
    rectified: RectifiedPatch,
    search_radius: int,
    tau_c: float = 0.75,
) -> tuple[np.ndarray, float] | None:
    """Exhaustive integer-offset NCC over the search window.

    Returns (offset, score) for the best offset of the template center
    within the rectified grid, or None when the best score falls below
    tau_c or the best window touches invalid samples.
    """
    w_c = template.shape[0]
    W = rectified.data.shape[0]
    if W < w_c + 2 * search_radius:
        raise ValueError("rectified window too small for the requested search radius")
    from numpy.lib.stride_tricks import sliding_window_view

    base = (W - w_c) // 2 - search_radius
    span = 2 * search_radius + 1
    wins = sliding_window_view(rectified.data, (w_c, w_c))[
        base:base + span, base:base + span
    ]
    vals = sliding_window_view(rectified.valid, (w_c, w_c))[
        base:base + span, base:base + span
    ]
    ok = vals.all(axis=(2, 3))

    t0 = template - template.mean()
    t_norm = math.sqrt(float((t0 * t0).sum()))
    means = wins.mean(axis=(2, 3))
    w0 = wins - means[..., None, None]
    denom = t_norm * np.sqrt((w0 * w0).sum(axis=(2, 3)))
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(denom > 0, (w0 * t0).sum(axis=(2, 3)) / denom, 0.0)
    scores = np.where(ok, scores, -np.inf)

    flat = int(np.argmax(scores))
    iy, ix = divmod(flat, span)
    best = scores[iy, ix]
    if not np.isfinite(best) or best < tau_c:
        return None
    return np.array([ix - search_radius, iy - search_radius], dtype=np.float64), float(best)


# ---------------------------------------------------------------------------
# Least-squares matching
# ---------------------------------------------------------------------------

def _bilinear_with_gradient(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear values plus the exact interpolant gradient and support validity."""
    h, w = image.shape
    valid = (x >= 0.5) & (x <= w - 1.5) & (y >= 0.5) & (y <= h - 1.5)
    xf = np.clip(x - 0.5, 0.0, w - 2.0)
    yf = np.clip(y - 0.5, 0.0, h - 2.0)
    x0 = np.floor(xf).astype(np.int64)
    y0 = np.floor(yf).astype(np.int64)
    fx = xf - x0
    fy = yf - y0
    i00 = image[y0, x0]
    i01 = image[y0, x0 + 1]
    i10 = image[y0 + 1, x0]
    i11 = image[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * i00 + fx * i01) + fy * ((1 - fx) * i10 + fx * i11)
    gx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    return val, gx, gy, valid


def _lsm_warp_positions(w_c: int, theta: np.ndarray, origin: np.ndarray):
    """Template grid coordinates and their warped rectified-grid positions."""
    half = (w_c - 1) // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    ux, uy = np.meshgrid(d, d)
    ux, uy = ux.ravel(), uy.ravel()
    a11, a12, a21, a22, tx, ty = theta[:6]
    wx = origin[0] + (1 + a11) * ux + a12 * uy + tx
    wy = origin[1] + a21 * ux + (1 + a22) * uy + ty
    return ux, uy, wx, wy


def lsm_residual_and_jacobian(
    template: np.ndarray,
    rect_data: np.ndarray,
    theta: np.ndarray,
    origin: np.ndarray,
):
    """Residuals and analytic Jacobian of the 8-parameter matching model.

    theta = (a11, a12, a21, a22, tx, ty, gain, bias); the warp maps template
    coordinates u (centered) to rectified grid coordinates
    origin + (I + A) u + t, and the model predicts gain * R(warp(u)) + bias
    for template value T(u). The Jacobian uses the exact gradient of the
    bilinear interpolant, so it matches finite differences of the residual.
    """
    ux, uy, wx, wy = _lsm_warp_positions(template.shape[0], theta, origin)
    gain = theta[6]
    val, gx, gy, valid = _bilinear_with_gradient(rect_data, wx + 0.5, wy + 0.5)
    r = gain * val + theta[7] - template.ravel()
    J = np.stack([
        gain * gx * ux,
        gain * gx * uy,
        gain * gy * ux,
        gain * gy * uy,
        gain * gx,
        gain * gy,
        val,
        np.ones_like(val),
    ], axis=1)
    return r, J, valid


def lsm_refine(
    template: np.ndarray,
    rectified: RectifiedPatch,
    init_offset: np.ndarray,
    config: PropagateConfig = PropagateConfig(),
) -> tuple[np.ndarray, int] | None:
    """Gauss-Newton refinement of the template position in the rectified
    patch: 6-parameter affine warp plus gain and bias.

    Converges when the translation update drops below `lsm_conv_tol` px;
    returns None (diverged) when a step exceeds `lsm_div_step` px, the
    affine part leaves the [0.5, 2] singular-value sanity box, samples leave
    the valid data, or the iteration budget runs out. The returned position
    is in ground-frame pixel coordinates.
    """
    W = rectified.data.shape[0]
    c = (W - 1) / 2.0
    origin = np.array([c + init_offset[0], c + init_offset[1]])
    theta = np.zeros(8)
    theta[6] = 1.0  # gain
    valid_f = rectified.valid.astype(np.float64)

    for iteration in range(1, config.max_lsm_iters + 1):
        r, J, valid = lsm_residual_and_jacobian(template, rectified.data, theta, origin)
        # Every sample must rest on fully valid rectified data.
        _, _, wx, wy = _lsm_warp_positions(template.shape[0], theta, origin)
        cover, _, _, _ = _bilinear_with_gradient(valid_f, wx + 0.5, wy + 0.5)
        if not valid.all() or cover.min() < 0.999:
            return None
        try:
            delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        except np.linalg.LinAlgError:
            return None
        theta = theta + delta
        step = math.hypot(delta[4], delta[5])
        A = np.array([
            [1 + theta[0], theta[1]],
            [theta[2], 1 + theta[3]],
        ])
        sv = np.linalg.svd(A, compute_uv=False)
        if step > config.lsm_div_step or sv.max() > 2.0 or sv.min() < 0.5:
            return None
        if step < config.lsm_conv_tol:
            pos = rectified.center_ground + init_offset + theta[4:6]
            return pos, iteration
    return None


def back_project(
    position_ground: np.ndarray,
    H: Homography,
    cam_a: CameraIntrinsics | None = None,
) -> np.ndarray:
    """Map a refined ground-frame position to final aerial pixel coordinates.

    Applies H^-1 and then re-applies the aerial lens distortion. Raises
    ValueError when the homogeneous w-component vanishes.
    """
    aerial_undist = apply_homography(H.inverse(), np.asarray(position_ground, dtype=np.float64))
    if cam_a is None or not cam_a.has_distortion:
        return aerial_undist
    v = (aerial_undist - cam_a.x0) / cam_a.f
    return cam_a.f * distort(cam_a, v) + cam_a.x0


# ---------------------------------------------------------------------------
# Full propagation
# ---------------------------------------------------------------------------

def _check_transfer(H, cam_g, pose_g, view, patch):
    """Debug assert: points on the patch plane transfer through H exactly."""
    t1, t2 = _tangent_basis(patch.n)
    rng = np.random.default_rng(0)
    pts = patch.X + rng.uniform(-0.5, 0.5, (8, 1)) * patch.size * t1 \
        + rng.uniform(-0.5, 0.5, (8, 1)) * patch.size * t2
    pa = project_point(view.cam, view.pose, pts, apply_distortion=False)
    pg = project_point(cam_g, pose_g, pts, apply_distortion=False)
    err = np.abs(apply_homography(H, pa) - pg).max()
    if err > 1e-6:
        raise AssertionError(f"plane transfer violated by {err:.3e} px")


def propagate_all(
    matches: list[DisparitySegment],
    buffers: FrameBuffers,
    views: list[AerialView],
    mesh: TexturedMesh,
    bvh: BvhAccel,
    ground_image: np.ndarray,
    ground_image_id: str,
    config: PropagateConfig = PropagateConfig(),
) -> tuple[list[RefinedCorrespondence], PropagationStats]:
    """Run patch building, view selection, rectification, NCC, and LSM for
    every inlier match; emit one correspondence per surviving (match, view).

    Per-match failures are tallied in the returned stats, never raised. The
    output is ordered by (match position, aerial image id).
    """
    stats = PropagationStats(n_matches=len(matches))
    cam_g, pose_g = buffers.cam, buffers.pose
    K_g = camera_matrix(cam_g)
    views_sorted = sorted(views, key=lambda v: v.image_id)
    out: list[RefinedCorrespondence] = []

    for segment in matches:
        patch = build_patch(segment, buffers, config.w_s)
        if patch is None:
            stats.masked += 1
            continue
        template = extract_template(ground_image, segment.p, config.w_c)
        if template is None:
            stats.template_out_of_bounds += 1
            continue
        selection = select_views(patch, views_sorted, bvh, mesh,
                                 config.tau_n, config.eps_self)
        for reason in selection.rejected.values():
            if reason == "containment":
                stats.rejected_containment += 1
            elif reason == "consistency":
                stats.rejected_consistency += 1
            else:
                stats.rejected_visibility += 1
        stats.views_accepted += len(selection.accepted)

        for view in views_sorted:
            if view.image_id not in selection.accepted:
                continue
            R_rel, t_rel = relative_transform(view.pose, pose_g)
            # Plane normal in the aerial frame, oriented away from the camera
            # so the plane distance d is positive.
            n_a = view.pose.R @ (-patch.n)
            X_a = view.pose.world_to_cam(patch.X)
            dist = float(n_a @ X_a)
            if dist <= 1e-9:
                stats.degenerate_homography += 1
                continue
            try:
                H = compute_homography(
                    K_g, camera_matrix(view.cam), R_rel, t_rel, n_a, dist,
                    source=view.image_id, target=ground_image_id,
                )
            except ValueError:
                stats.degenerate_homography += 1
                continue
            if config.debug_transfer_check:
                _check_transfer(H, cam_g, pose_g, view, patch)
            center_a = apply_homography(H.inverse(), segment.p)
            window = 2 * (config.search_radius + config.lsm_margin) + config.w_c
            try:
                rect = warp_patch(view.image, H, center_a, window, view.cam)
            except (FullyInvalidWindowError, ValueError):
                stats.warp_invalid += 1
                continue
            found = ncc_search(template, rect, config.search_radius, config.tau_c)
            if found is None:
                stats.pruned += 1
                continue
            offset, score = found
            refined = lsm_refine(template, rect, offset, config)
            if refined is None:
                stats.diverged += 1
                continue
            pos_ground, iterations = refined
            try:
                aerial_px = back_project(pos_ground, H, view.cam)
            except ValueError:
                stats.diverged += 1
                continue
            out.append(RefinedCorrespondence(
                ground_image_id=ground_image_id,
                ground_px=segment.p,
                aerial_image_id=view.image_id,
                aerial_px=aerial_px,
                ncc=score,
                lsm_status="converged",
                iterations=iterations,
                match_index=segment.index,
            ))
            stats.emitted += 1
    return out, stats
