"""Camera models and conversions between photogrammetric and graphics conventions.

Coordinate conventions used throughout the package:

World frame:
    Right-handed, scene units (meters for the synthetic scenes).

Camera frame (photogrammetric / computer vision):
    x right, y down, z forward along the optical axis. A world point X maps
    to camera coordinates as R @ (X - C), with R the world-to-camera rotation
    and C the projection center in world coordinates.

Image frame:
    Continuous pixel coordinates, x right, y down, origin at the top-left
    image corner. Pixel (i, j) covers [i, i+1) x [j, j+1); its center is at
    (i + 0.5, j + 0.5).

Graphics (view/NDC) frame:
    The view matrix follows the classic lookat construction (camera looks
    down -z, y up); the projection matrix is a symmetric-frustum perspective
    with NDC depth in [-1, +1], near plane at -1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "RenderCamera",
    "Homography",
    "PointBehindCameraError",
    "DistortionDivergedError",
    "project_point",
    "distort",
    "undistort",
    "pose_to_lookat",
    "intrinsics_to_perspective",
    "lookat_matrix",
    "perspective_matrix",
    "build_render_camera",
    "ndc_to_pixel",
    "pixel_to_ndc",
    "relative_transform",
    "compute_homography",
    "apply_homography",
    "camera_matrix",
    "load_cameras",
    "save_cameras",
]


class PointBehindCameraError(ValueError):
    """Raised when projecting a point with non-positive camera depth."""


class DistortionDivergedError(RuntimeError):
    """Raised when the distortion inversion does not converge."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with Brown distortion, in pixel units.

    Attributes:
        f: focal length in pixels.
        x0: principal point (cx, cy) in pixels.
        w, h: image width and height in pixels.
        distortion: Brown coefficients (k1, k2, k3, p1, p2).
        z_near, z_med, z_far: nearest / median / furthest scene depth in
            world units, used to set up the rendering frustum.
    """

    f: float
    x0: np.ndarray
    w: int
    h: int
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(5))
    z_near: float = 0.1
    z_med: float = 10.0
    z_far: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=np.float64))
        object.__setattr__(self, "distortion", np.asarray(self.distortion, dtype=np.float64))
        if self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.w}x{self.h}")
        if not (0 < self.z_near < self.z_med < self.z_far):
            raise ValueError(
                f"depth triple must satisfy 0 < z_near < z_med < z_far, "
                f"got ({self.z_near}, {self.z_med}, {self.z_far})"
            )
        if self.x0.shape != (2,):
            raise ValueError("principal point must be a 2-vector")
        if self.distortion.shape != (5,):
            raise ValueError("distortion must be (k1, k2, k3, p1, p2)")

    @property
    def has_distortion(self) -> bool:
        return bool(np.any(self.distortion != 0.0))


@dataclass(frozen=True)
class CameraPose:
    """Exterior orientation: world-to-camera rotation R and center C."""

    R: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "C", np.asarray(self.C, dtype=np.float64))
        if self.R.shape != (3, 3):
            raise ValueError("R must be 3x3")
        if self.C.shape != (3,):
            raise ValueError("C must be a 3-vector")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"R is not orthonormal (max |RR^T - I| = {err:.3e})")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation (det = +1)")

    def world_to_cam(self, X: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) to camera coordinates."""
        X = np.asarray(X, dtype=np.float64)
        return (X - self.C) @ self.R.T

    def cam_to_world(self, Xc: np.ndarray) -> np.ndarray:
        """Map camera-frame points (..., 3) back to world coordinates."""
        Xc = np.asarray(Xc, dtype=np.float64)
        return Xc @ self.R + self.C

    @property
    def view_dir(self) -> np.ndarray:
        """Camera z-axis (viewing direction) expressed in the world frame."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RenderCamera:
    """Graphics-side camera: lookat parameters plus view/projection matrices."""

    E: np.ndarray
    O: np.ndarray
    U: np.ndarray
    theta: float
    rho: float
    z_n: float
    z_f: float
    view_matrix: np.ndarray = None
    projection_matrix: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "E", np.asarray(self.E, dtype=np.float64))
        object.__setattr__(self, "O", np.asarray(self.O, dtype=np.float64))
        object.__setattr__(self, "U", np.asarray(self.U, dtype=np.float64))
        if abs(np.linalg.norm(self.U) - 1.0) > 1e-9:
            raise ValueError("up vector must be unit length")
        if not (0.0 < self.theta < math.pi):
            raise ValueError(f"field of view must lie in (0, pi), got {self.theta}")
        if np.linalg.norm(self.O - self.E) == 0.0:
            raise ValueError("degenerate lookat: eye and center coincide")
        view = lookat_matrix(self.E, self.O, self.U)
        proj = perspective_matrix(self.theta, self.rho, self.z_n, self.z_f)
        if self.view_matrix is None:
            object.__setattr__(self, "view_matrix", view)
        elif not np.array_equal(self.view_matrix, view):
            raise ValueError("view matrix does not match its lookat parameters")
        if self.projection_matrix is None:
            object.__setattr__(self, "projection_matrix", proj)
        elif not np.array_equal(self.projection_matrix, proj):
            raise ValueError("projection matrix does not match its frustum parameters")

    def project_ndc(self, X: np.ndarray) -> np.ndarray:
        """Project world points (..., 3) to NDC (..., 3) via the PV matrices."""
        X = np.asarray(X, dtype=np.float64)
        Xh = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
        clip = Xh @ (self.projection_matrix @ self.view_matrix).T
        return clip[..., :3] / clip[..., 3:4]


@dataclass(frozen=True)
class Homography:
    """Plane-induced 3x3 map from source-image pixels to target-image pixels."""

    H: np.ndarray
    source: str = ""
    target: str = ""

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        if H.shape != (3, 3):
            raise ValueError("H must be 3x3")
        if abs(np.linalg.det(H)) < 1e-15:
            raise ValueError("singular homography: degenerate plane/pose configuration")
        if H[2, 2] != 0.0:
            H = H / H[2, 2]
        object.__setattr__(self, "H", H)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H), source=self.target, target=self.source)


def apply_homography(H: np.ndarray | Homography, pts: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to points (..., 2) in pixel coordinates.

    Raises ValueError when a mapped point lands at infinity (w ~ 0).
    """
    M = H.H if isinstance(H, Homography) else np.asarray(H, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    ph = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)
    out = ph @ M.T
    w = out[..., 2]
    if np.any(np.abs(w) < 1e-12):
        raise ValueError("homography maps point to infinity")
    return out[..., :2] / w[..., None]


# ---------------------------------------------------------------------------
# Brown distortion model
# ---------------------------------------------------------------------------

def distort(cam: CameraIntrinsics, v: np.ndarray) -> np.ndarray:
    """Apply the five-parameter Brown model to normalized coordinates (..., 2).

    radial: (1 + k1 r^2 + k2 r^4 + k3 r^6), tangential: standard p1/p2 cross
    terms. Distortion-free coordinates pass through unchanged.
    """
    k1, k2, k3, p1, p2 = cam.distortion
    v = np.asarray(v, dtype=np.float64)
    x, y = v[..., 0], v[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _distort_jacobian(cam: CameraIntrinsics, v: np.ndarray) -> np.ndarray:
    k1, k2, k3, p1, p2 = cam.distortion
    x, y = v
    r2 = x * x + y * y
    g = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dg = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2
    jxx = g + 2.0 * x * x * dg + 2.0 * p1 * y + 6.0 * p2 * x
    jxy = 2.0 * x * y * dg + 2.0 * p1 * x + 2.0 * p2 * y
    jyy = g + 2.0 * y * y * dg + 6.0 * p1 * y + 2.0 * p2 * x
    return np.array([[jxx, jxy], [jxy, jyy]])


def undistort(
    cam: CameraIntrinsics,
    vd: np.ndarray,
    max_iter: int = 20,
    tol: float = 1e-10,
) -> np.ndarray:
    """Invert the Brown mapping by Newton iteration on normalized coordinates.

    Raises DistortionDivergedError when the residual is still above `tol`
    after `max_iter` steps, which signals coordinates outside the injective
    range of the distortion model.
    """
    vd = np.asarray(vd, dtype=np.float64)
    if not cam.has_distortion:
        return vd.copy()
    single = vd.ndim == 1
    pts = np.atleast_2d(vd)
    out = np.empty_like(pts)
    for i, target in enumerate(pts):
        v = target.copy()
        for _ in range(max_iter):
            res = distort(cam, v) - target
            if np.abs(res).max() < tol:
                break
            v = v - np.linalg.solve(_distort_jacobian(cam, v), res)
        else:
            raise DistortionDivergedError(
                f"undistort did not converge for {target} after {max_iter} iterations"
            )
        out[i] = v
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project_point(cam: CameraIntrinsics, pose: CameraPose, X: np.ndarray,
                  apply_distortion: bool = True) -> np.ndarray:
    """Project world points (..., 3) to pixel coordinates (..., 2).

    Computes f * D(Pi(R(X - C))) + x0; Pi divides by the depth component and
    D applies the Brown model (skipped when `apply_distortion` is False).

    Raises PointBehindCameraError when any point has camera depth <= 0.
    """
    Xc = pose.world_to_cam(X)
    z = Xc[..., 2]
    if np.any(z <= 0.0):
        raise PointBehindCameraError("point projects from behind the camera (depth <= 0)")
    v = Xc[..., :2] / z[..., None]
    if apply_distortion and cam.has_distortion:
        v = distort(cam, v)
    return cam.f * v + cam.x0


def camera_matrix(cam: CameraIntrinsics) -> np.ndarray:
    """Distortion-free 3x3 pinhole matrix K."""
    return np.array([
        [cam.f, 0.0, cam.x0[0]],
        [0.0, cam.f, cam.x0[1]],
        [0.0, 0.0, 1.0],
    ])


# ---------------------------------------------------------------------------
# Graphics-side conversions
# ---------------------------------------------------------------------------

def pose_to_lookat(pose: CameraPose, z_m: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convert a camera pose to lookat (eye, center, up) vectors.

    eye = C, center = C + z_m * R^T e_z, up = -R^T e_y; the median scene
    depth z_m places the lookat center at a representative distance.
    """
    if z_m <= 0:
        raise ValueError("median depth must be positive")
    E = pose.C.copy()
    O = pose.C + z_m * (pose.R.T @ np.array([0.0, 0.0, 1.0]))
    U = -(pose.R.T @ np.array([0.0, 1.0, 0.0]))
    return E, O, U


def intrinsics_to_perspective(cam: CameraIntrinsics) -> tuple[float, float]:
    """Vertical field of view and aspect ratio: theta = 2 atan(h / 2f), rho = w / h."""
    return 2.0 * math.atan(cam.h / (2.0 * cam.f)), cam.w / cam.h


def lookat_matrix(E: np.ndarray, O: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Right-handed lookat view matrix (camera looks down -z, y up)."""
    E = np.asarray(E, dtype=np.float64)
    fwd = np.asarray(O, dtype=np.float64) - E
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise ValueError("degenerate lookat: eye and center coincide")
    fwd = fwd / n
    s = np.cross(fwd, np.asarray(U, dtype=np.float64))
    s = s / np.linalg.norm(s)
    u = np.cross(s, fwd)
    V = np.eye(4)
    V[0, :3], V[1, :3], V[2, :3] = s, u, -fwd
    V[0, 3], V[1, 3], V[2, 3] = -s @ E, -u @ E, fwd @ E
    return V


def perspective_matrix(theta: float, rho: float, z_n: float, z_f: float) -> np.ndarray:
    """Symmetric perspective projection with NDC depth in [-1, +1]."""
    if not (0 < z_n < z_f):
        raise ValueError("clip depths must satisfy 0 < z_n < z_f")
    t = 1.0 / math.tan(theta / 2.0)
    P = np.zeros((4, 4))
    P[0, 0] = t / rho
    P[1, 1] = t
    P[2, 2] = -(z_f + z_n) / (z_f - z_n)
    P[2, 3] = -2.0 * z_f * z_n / (z_f - z_n)
    P[3, 2] = -1.0
    return P


def build_render_camera(cam: CameraIntrinsics, pose: CameraPose) -> RenderCamera:
    """Assemble the graphics camera (V, P) that mirrors a photogrammetric one.

    For a centered principal point and zero distortion, projecting through
    the view/projection matrices followed by the viewport transform agrees
    with project_point to within rasterization-grade tolerance.
    """
    E, O, U = pose_to_lookat(pose, cam.z_med)
    theta, rho = intrinsics_to_perspective(cam)
    return RenderCamera(E=E, O=O, U=U, theta=theta, rho=rho,
                        z_n=cam.z_near, z_f=cam.z_far)


def ndc_to_pixel(ndc: np.ndarray, w: int, h: int) -> np.ndarray:
    """Viewport transform: NDC (..., 2) to pixel coordinates, y down."""
    ndc = np.asarray(ndc, dtype=np.float64)
    px = (ndc[..., 0] + 1.0) * 0.5 * w
    py = (1.0 - ndc[..., 1]) * 0.5 * h
    return np.stack([px, py], axis=-1)


def pixel_to_ndc(pix: np.ndarray, w: int, h: int) -> np.ndarray:
    """Inverse viewport transform, exact affine inverse of ndc_to_pixel."""
    pix = np.asarray(pix, dtype=np.float64)
    nx = pix[..., 0] * 2.0 / w - 1.0
    ny = 1.0 - pix[..., 1] * 2.0 / h
    return np.stack([nx, ny], axis=-1)


# ---------------------------------------------------------------------------
# Two-view relations
# ---------------------------------------------------------------------------

def relative_transform(pose_a: CameraPose, pose_g: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Rigid transform taking camera-a coordinates to camera-g coordinates.

    R_rel = R_g R_a^T and t_rel = R_g (C_a - C_g), so that
    X_g = R_rel X_a + t_rel for any world point X.
    """
    R_rel = pose_g.R @ pose_a.R.T
    t_rel = pose_g.R @ (pose_a.C - pose_g.C)
    return R_rel, t_rel


def compute_homography(
    K_g: np.ndarray,
    K_a: np.ndarray,
    R_rel: np.ndarray,
    t_rel: np.ndarray,
    n: np.ndarray,
    d: float,
    source: str = "",
    target: str = "",
) -> Homography:
    """Plane-induced homography H = K_g (R_rel + t_rel n_d^T) K_a^{-1}, n_d = n/d.

    `n` is the unit plane normal expressed in the aerial camera frame and
    oriented away from the aerial camera (same side as the viewing ray), so
    that the plane is {X : n.X = d} with d > 0 the distance from the aerial
    center to the plane. With that convention, points on the plane transfer
    exactly: projecting into the aerial image and mapping through H equals
    direct projection into the ground camera.
    """
    if d <= 0:
        raise ValueError("plane distance d must be positive")
    n = np.asarray(n, dtype=np.float64)
    H = K_g @ (np.asarray(R_rel) + np.outer(np.asarray(t_rel), n / d)) @ np.linalg.inv(K_a)
    return Homography(H, source=source, target=target)


# ---------------------------------------------------------------------------
# Camera file I/O
# ---------------------------------------------------------------------------

def load_cameras(path: str | Path) -> dict[str, tuple[CameraIntrinsics, CameraPose]]:
    """Load a camera JSON file: a list of per-image camera records.

    Each record holds image_id, width, height, f_px, x0, distortion, the
    row-major world-to-camera rotation R, the projection center C, and the
    z_near / z_med / z_far depth triple.
    """
    with open(path) as fh:
        records = json.load(fh)
    cameras: dict[str, tuple[CameraIntrinsics, CameraPose]] = {}
    for rec in records:
        cam = CameraIntrinsics(
            f=float(rec["f_px"]),
            x0=np.asarray(rec["x0"], dtype=np.float64),
            w=int(rec["width"]),
            h=int(rec["height"]),
            distortion=np.asarray(rec.get("distortion", [0.0] * 5), dtype=np.float64),
            z_near=float(rec["z_near"]),
            z_med=float(rec["z_med"]),
            z_far=float(rec["z_far"]),
        )
        pose = CameraPose(
            R=np.asarray(rec["R"], dtype=np.float64).reshape(3, 3),
            C=np.asarray(rec["C"], dtype=np.float64),
        )
        cameras[str(rec["image_id"])] = (cam, pose)
    return cameras


def save_cameras(path: str | Path, cameras: dict[str, tuple[CameraIntrinsics, CameraPose]]) -> None:
    """Write cameras in the JSON layout read back by load_cameras."""
    records = []
    for image_id, (cam, pose) in cameras.items():
        records.append({
            "image_id": image_id,
            "width": cam.w,
            "height": cam.h,
            "f_px": cam.f,
            "x0": cam.x0.tolist(),
            "distortion": cam.distortion.tolist(),
            "R": pose.R.reshape(-1).tolist(),
            "C": pose.C.tolist(),
            "z_near": cam.z_near,
            "z_med": cam.z_med,
            "z_far": cam.z_far,
        })
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2)
