"""Software rasterization of textured meshes into per-view frame buffers.

Each ground view gets four aligned rasters: RGB color, linear eye-space
depth, world-space unit face normals, and a coverage mask. Rasterization is
perspective-correct with a strict less-than depth test and a top-left fill
rule, so two renders of the same scene are bit-identical and adjacent
triangles neither double-shade nor leave holes along shared edges.

The projection honors the calibrated focal length and principal point but
applies no lens distortion; distortion only matters when touching real
images, and the refinement stage handles it there.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from meshtie.geometry import CameraIntrinsics, CameraPose, RenderCamera, build_render_camera
from meshtie.mesh import TexturedMesh

__all__ = [
    "FrameBuffers",
    "render",
    "depth_to_xyz",
    "depth_to_xyz_map",
    "gsd_at",
    "bilinear_sample",
    "write_pfm",
    "read_pfm",
    "export_buffers",
]


@dataclass(frozen=True)
class FrameBuffers:
    """Synthesized rasters for one virtual ground view.

    color: (h, w, 3) uint8; depth: (h, w) float64 eye-space depth with +inf
    where empty; normal: (h, w, 3) float64 unit world normals (zero where
    empty); mask: (h, w) bool coverage.
    """

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    cam: CameraIntrinsics
    pose: CameraPose
    render_camera: RenderCamera

    def __post_init__(self):
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3) or self.normal.shape != (h, w, 3) \
                or self.mask.shape != (h, w):
            raise ValueError("buffer shapes disagree")
        finite = np.isfinite(self.depth)
        if not np.array_equal(finite, self.mask):
            raise ValueError("mask and finite-depth sets disagree")
        norms = np.linalg.norm(self.normal, axis=2)
        if np.any(np.abs(norms[self.mask] - 1.0) > 1e-6):
            raise ValueError("covered normals must be unit length")
        if np.any(norms[~self.mask] != 0.0):
            raise ValueError("empty pixels must carry zero normals")
        d = self.depth[self.mask]
        if d.size and (d.min() < self.cam.z_near - 1e-9 or d.max() > self.cam.z_far + 1e-9):
            raise ValueError("covered depths must lie within [z_near, z_far]")


def _clip_near(corners_cam: np.ndarray, uv: np.ndarray, z_n: float):
    """Sutherland-Hodgman clip of one triangle against z >= z_n.

    Returns a list of (cam_corners (3,3), uv (3,2)) triangles (0, 1, or 2).
    """
    inside = corners_cam[:, 2] >= z_n
    n_in = int(inside.sum())
    if n_in == 3:
        return [(corners_cam, uv)]
    if n_in == 0:
        return []
    poly_p, poly_uv = [], []
    for i in range(3):
        j = (i + 1) % 3
        pi, pj = corners_cam[i], corners_cam[j]
        ui, uj = uv[i], uv[j]
        if inside[i]:
            poly_p.append(pi)
            poly_uv.append(ui)
        if inside[i] != inside[j]:
            s = (z_n - pi[2]) / (pj[2] - pi[2])
            poly_p.append(pi + s * (pj - pi))
            poly_uv.append(ui + s * (uj - ui))
    tris = []
    for k in range(1, len(poly_p) - 1):
        tris.append((
            np.stack([poly_p[0], poly_p[k], poly_p[k + 1]]),
            np.stack([poly_uv[0], poly_uv[k], poly_uv[k + 1]]),
        ))
    return tris


def bilinear_sample(tex: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup with clamp-to-edge; x, y index texel centers at i+0.5."""
    h, w = tex.shape[:2]
    xf = np.clip(x - 0.5, 0.0, w - 1.0)
    yf = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(xf).astype(np.int64)
    y0 = np.floor(yf).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xf - x0)[..., None] if tex.ndim == 3 else xf - x0
    fy = (yf - y0)[..., None] if tex.ndim == 3 else yf - y0
    t = tex.astype(np.float64)
    top = t[y0, x0] * (1 - fx) + t[y0, x1] * fx
    bot = t[y1, x0] * (1 - fx) + t[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render(mesh: TexturedMesh, cam: CameraIntrinsics, pose: CameraPose) -> FrameBuffers:
    """Rasterize the textured mesh into the camera's frame buffers."""
    if mesh.n_triangles == 0:
        raise ValueError("cannot render an empty mesh")
    w, h = cam.w, cam.h
    f, (cx, cy) = cam.f, cam.x0

    color = np.zeros((h, w, 3), dtype=np.float64)
    depth = np.full((h, w), np.inf, dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)

    corners_world = mesh.corners()
    corners_cam = pose.world_to_cam(corners_world.reshape(-1, 3)).reshape(-1, 3, 3)

    # Per-face world normals, flipped toward the camera (photogrammetric
    # meshes have inconsistent winding, so no back-face cull).
    e1 = corners_world[:, 1] - corners_world[:, 0]
    e2w = corners_world[:, 2] - corners_world[:, 0]
    face_n = np.cross(e1, e2w)
    lens = np.linalg.norm(face_n, axis=1)
    valid_n = lens > 0
    face_n[valid_n] /= lens[valid_n, None]
    to_cam = pose.C - corners_world.mean(axis=1)
    flip = np.einsum("ij,ij->i", face_n, to_cam) < 0
    face_n[flip] = -face_n[flip]

    zmax = corners_cam[:, :, 2].max(axis=1)
    for ti in np.flatnonzero((zmax >= cam.z_near) & valid_n):
        for cc, cuv in _clip_near(corners_cam[ti], mesh.uvs[ti], cam.z_near):
            z = cc[:, 2]
            px = f * cc[:, 0] / z + cx
            py = f * cc[:, 1] / z + cy
            area2 = (px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0])
            if area2 == 0.0:
                continue
            order = (0, 1, 2) if area2 > 0 else (0, 2, 1)
            vx, vy = px[list(order)], py[list(order)]
            vz = z[list(order)]
            vuv = cuv[list(order)]
            area2 = abs(area2)

            i0 = max(0, int(np.floor(vx.min() - 0.5)))
            i1 = min(w - 1, int(np.ceil(vx.max() - 0.5)))
            j0 = max(0, int(np.floor(vy.min() - 0.5)))
            j1 = min(h - 1, int(np.ceil(vy.max() - 0.5)))
            if i0 > i1 or j0 > j1:
                continue

            sx = np.arange(i0, i1 + 1) + 0.5
            sy = (np.arange(j0, j1 + 1) + 0.5)[:, None]

            inside = None
            bary = []
            for a, b in ((1, 2), (2, 0), (0, 1)):
                ex, ey = vx[b] - vx[a], vy[b] - vy[a]
                E = ex * (sy - vy[a]) - ey * (sx - vx[a])
                # Top-left fill rule: boundary samples belong to edges that
                # go up the screen or run horizontally to the right.
                top_left = ey < 0 or (ey == 0 and ex > 0)
                cov = (E > 0) | ((E == 0) & top_left)
                inside = cov if inside is None else (inside & cov)
                bary.append(E / area2)
            if not inside.any():
                continue

            with np.errstate(divide="ignore", invalid="ignore"):
                inv_z = bary[0] / vz[0] + bary[1] / vz[1] + bary[2] / vz[2]
                zval = 1.0 / inv_z
            sub = (slice(j0, j1 + 1), slice(i0, i1 + 1))
            sel = inside & (zval < depth[sub]) & (zval >= cam.z_near) & (zval <= cam.z_far)
            if not sel.any():
                continue

            with np.errstate(invalid="ignore"):
                u = (bary[0] * vuv[0, 0] / vz[0] + bary[1] * vuv[1, 0] / vz[1]
                     + bary[2] * vuv[2, 0] / vz[2]) * zval
                v = (bary[0] * vuv[0, 1] / vz[0] + bary[1] * vuv[1, 1] / vz[1]
                     + bary[2] * vuv[2, 1] / vz[2]) * zval
            th, tw = mesh.texture.shape[:2]
            rgb = bilinear_sample(mesh.texture, u[sel] * tw, v[sel] * th)

            depth[sub][sel] = zval[sel]
            color[sub][sel] = rgb
            normal[sub][sel] = face_n[ti]
            mask[sub][sel] = True

    color8 = np.clip(np.rint(color), 0, 255).astype(np.uint8)
    return FrameBuffers(
        color=color8, depth=depth, normal=normal, mask=mask,
        cam=cam, pose=pose, render_camera=build_render_camera(cam, pose),
    )


def depth_to_xyz(buffers: FrameBuffers, pixel: tuple[int, int]) -> np.ndarray | None:
    """World point seen at pixel (i, j), or None where the view is empty.

    Unprojects the pixel center along the distortion-free camera ray and
    scales it to the stored eye-space depth.
    """
    i, j = pixel
    if not (0 <= i < buffers.cam.w and 0 <= j < buffers.cam.h):
        raise IndexError(f"pixel {pixel} outside buffer")
    if not buffers.mask[j, i]:
        return None
    cam, pose = buffers.cam, buffers.pose
    z = buffers.depth[j, i]
    ray = np.array([
        (i + 0.5 - cam.x0[0]) / cam.f,
        (j + 0.5 - cam.x0[1]) / cam.f,
        1.0,
    ])
    return pose.cam_to_world(ray * z)


def depth_to_xyz_map(buffers: FrameBuffers) -> np.ndarray:
    """Vectorized XYZ map, (h, w, 3) with NaN where the view is empty."""
    cam, pose = buffers.cam, buffers.pose
    h, w = buffers.depth.shape
    xs = (np.arange(w) + 0.5 - cam.x0[0]) / cam.f
    ys = (np.arange(h) + 0.5 - cam.x0[1]) / cam.f
    rx, ry = np.meshgrid(xs, ys)
    rays = np.stack([rx, ry, np.ones_like(rx)], axis=-1)
    depth = np.where(buffers.mask, buffers.depth, 0.0)
    pts = pose.cam_to_world((rays * depth[..., None]).reshape(-1, 3)).reshape(h, w, 3)
    pts[~buffers.mask] = np.nan
    return pts


def gsd_at(depth: float, f: float) -> float:
    """Ground sample distance at a given depth: world units per pixel, d / f."""
    if depth <= 0 or f <= 0:
        raise ValueError("depth and focal length must be positive")
    return depth / f


# ---------------------------------------------------------------------------
# Buffer file I/O
# ---------------------------------------------------------------------------

def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a little-endian PFM ('Pf' scalar or 'PF' 3-channel), scale -1."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM supports (h, w) or (h, w, 3) arrays")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())  # PFM rows run bottom-up


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: {path}")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        count = w * h * (3 if header == b"PF" else 1)
        raw = fh.read(count * 4)
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).copy()


def export_buffers(buffers: FrameBuffers, out_dir: str | Path, image_id: str) -> list[Path]:
    """Write {id}_color.png, {id}_depth.pfm, {id}_normal.pfm, {id}_mask.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        out_dir / f"{image_id}_color.png",
        out_dir / f"{image_id}_depth.pfm",
        out_dir / f"{image_id}_normal.pfm",
        out_dir / f"{image_id}_mask.png",
    ]
    Image.fromarray(buffers.color).save(paths[0])
    depth = buffers.depth.copy()
    depth[~buffers.mask] = -1.0  # PFM has no inf convention; -1 marks empty
    write_pfm(paths[1], depth)
    write_pfm(paths[2], buffers.normal)
    Image.fromarray((buffers.mask * np.uint8(255))).save(paths[3])
    return paths
