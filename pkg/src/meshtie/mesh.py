"""Textured triangle meshes: OBJ ingest, cleanup, and basic measures.

The on-disk format is a small OBJ subset (v / vt / f records, triangulated
faces) with one RGB PNG texture referenced by a sidecar JSON file
(``{"texture": "relative/path.png"}``) next to the OBJ.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "TexturedMesh",
    "MeshParseError",
    "load_mesh",
    "load_tiles",
    "save_mesh",
    "weld_vertices",
    "triangle_areas",
    "default_weld_eps",
]

DEGENERATE_AREA = 1e-12


class MeshParseError(ValueError):
    """OBJ parsing failure, carrying the offending line number."""


@dataclass(frozen=True)
class TexturedMesh:
    """Triangle mesh with per-corner UVs and a single RGB texture.

    vertices: (N, 3) float64 world coordinates.
    triangles: (M, 3) int32 vertex indices.
    uvs: (M, 3, 2) float64 per-corner texture coordinates in [0, 1]^2.
    texture: (Ht, Wt, 3) uint8 RGB raster.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int32))
        object.__setattr__(self, "uvs", np.ascontiguousarray(self.uvs, dtype=np.float64))
        object.__setattr__(self, "texture", np.ascontiguousarray(self.texture, dtype=np.uint8))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be (M, 3)")
        if self.uvs.shape != (len(self.triangles), 3, 2):
            raise ValueError("uvs must be (M, 3, 2), one UV per triangle corner")
        if self.texture.ndim != 3 or self.texture.shape[2] != 3:
            raise ValueError("texture must be (H, W, 3) RGB")
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def surface_area(self) -> float:
        return float(triangle_areas(self).sum())

    def corners(self) -> np.ndarray:
        """Per-triangle corner positions, shape (M, 3, 3)."""
        return self.vertices[self.triangles]


def triangle_areas(mesh: TexturedMesh) -> np.ndarray:
    c = mesh.corners()
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def default_weld_eps(mesh: TexturedMesh) -> float:
    """Default welding tolerance: 1e-4 of the scene AABB diagonal."""
    lo, hi = mesh.aabb()
    return 1e-4 * float(np.linalg.norm(hi - lo))


def load_mesh(path: str | Path) -> TexturedMesh:
    """Parse one OBJ tile plus its sidecar texture reference.

    Raises MeshParseError (with line number) for malformed or out-of-range
    records, and FileNotFoundError for a missing texture or sidecar.
    """
    path = Path(path)
    vertices: list[list[float]] = []
    uvs: list[list[float]] = []
    tri_v: list[tuple[int, int, int]] = []
    tri_vt: list[tuple[int, int, int]] = []

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(f"{path.name}:{lineno}: vertex needs 3 coordinates")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "vt":
                if len(parts) < 3:
                    raise MeshParseError(f"{path.name}:{lineno}: texture coord needs 2 values")
                uvs.append([float(parts[1]), float(parts[2])])
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshParseError(
                        f"{path.name}:{lineno}: only triangulated faces are supported"
                    )
                vi, ti = [], []
                for corner in parts[1:]:
                    fields = corner.split("/")
                    if len(fields) < 2 or fields[1] == "":
                        raise MeshParseError(
                            f"{path.name}:{lineno}: face corner lacks a texture coordinate"
                        )
                    vi.append(int(fields[0]))
                    ti.append(int(fields[1]))
                # OBJ indices are 1-based; negatives index from the end.
                vi = [i - 1 if i > 0 else len(vertices) + i for i in vi]
                ti = [i - 1 if i > 0 else len(uvs) + i for i in ti]
                for i in vi:
                    if not (0 <= i < len(vertices)):
                        raise MeshParseError(
                            f"{path.name}:{lineno}: vertex index out of range"
                        )
                for i in ti:
                    if not (0 <= i < len(uvs)):
                        raise MeshParseError(
                            f"{path.name}:{lineno}: texture index out of range"
                        )
                tri_v.append(tuple(vi))
                tri_vt.append(tuple(ti))
            # vn / usemtl / mtllib and friends are ignored.

    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing texture sidecar {sidecar}")
    with open(sidecar) as fh:
        meta = json.load(fh)
    tex_path = (path.parent / meta["texture"]).resolve()
    if not tex_path.exists():
        raise FileNotFoundError(f"missing texture image {tex_path}")
    texture = np.asarray(Image.open(tex_path).convert("RGB"))

    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    tris = np.asarray(tri_v, dtype=np.int32).reshape(-1, 3)
    uv_arr = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    corner_uvs = uv_arr[np.asarray(tri_vt, dtype=np.int32).reshape(-1, 3)] \
        if len(tri_vt) else np.zeros((0, 3, 2))
    # OBJ vt uses a bottom-left origin; rasters index from the top-left.
    if len(corner_uvs):
        corner_uvs = corner_uvs.copy()
        corner_uvs[:, :, 1] = 1.0 - corner_uvs[:, :, 1]
    return TexturedMesh(verts, tris, corner_uvs, texture)


def load_tiles(paths: list[str | Path]) -> TexturedMesh:
    """Concatenate OBJ tiles into a single in-memory mesh.

    All tiles must reference the same texture image; desk-scale scenes fit
    in memory so no streaming or level-of-detail management is attempted.
    """
    if not paths:
        raise ValueError("no mesh tiles given")
    meshes = [load_mesh(p) for p in paths]
    tex0 = meshes[0].texture
    for m in meshes[1:]:
        if m.texture.shape != tex0.shape or not np.array_equal(m.texture, tex0):
            raise ValueError("all mesh tiles must share one texture image")
    offset = 0
    verts, tris, uvs = [], [], []
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        uvs.append(m.uvs)
        offset += m.n_vertices
    return TexturedMesh(
        np.concatenate(verts), np.concatenate(tris), np.concatenate(uvs), tex0
    )


def save_mesh(mesh: TexturedMesh, path: str | Path, texture_name: str | None = None) -> None:
    """Write the OBJ + sidecar + PNG texture triple read back by load_mesh.

    Coordinates are written with full float64 precision so a reload is
    vertex-exact.
    """
    path = Path(path)
    texture_name = texture_name or (path.stem + "_tex.png")
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    # Flatten per-corner UVs; undo the top-left flip applied at load time.
    for uv3 in mesh.uvs:
        for uv in uv3:
            lines.append(f"vt {uv[0]:.17g} {1.0 - uv[1]:.17g}")
    for t, tri in enumerate(mesh.triangles):
        c = 3 * t
        lines.append(
            f"f {tri[0] + 1}/{c + 1} {tri[1] + 1}/{c + 2} {tri[2] + 1}/{c + 3}"
        )
    path.write_text("\n".join(lines) + "\n")
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"texture": texture_name}, fh)
    Image.fromarray(mesh.texture).save(path.parent / texture_name)


def weld_vertices(mesh: TexturedMesh, eps: float) -> TexturedMesh:
    """Merge vertices within `eps` and drop triangles that collapse.

    Clustering is greedy over a spatial-hash grid of cell size eps: each
    vertex joins the first earlier representative within eps, else becomes a
    representative itself. Triangles with repeated indices or area below
    1e-12 after remapping are removed; per-corner UVs ride along with the
    surviving triangles. eps = 0 returns the mesh unchanged.
    """
    if eps < 0:
        raise ValueError("weld epsilon must be non-negative")
    if eps == 0.0 or mesh.n_vertices == 0:
        return mesh

    verts = mesh.vertices
    cells = np.floor(verts / eps).astype(np.int64)
    grid: dict[tuple[int, int, int], list[int]] = {}
    remap = np.empty(len(verts), dtype=np.int64)
    reps: list[int] = []
    eps2 = eps * eps
    for i, (v, cell) in enumerate(zip(verts, cells)):
        found = -1
        cx, cy, cz = cell
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in grid.get((cx + dx, cy + dy, cz + dz), ()):
                        d = verts[j] - v
                        if d @ d <= eps2:
                            found = j
                            break
                    if found >= 0:
                        break
                if found >= 0:
                    break
            if found >= 0:
                break
        if found >= 0:
            remap[i] = remap[found]
        else:
            remap[i] = len(reps)
            reps.append(i)
            grid.setdefault((cx, cy, cz), []).append(i)

    new_verts = verts[reps]
    new_tris = remap[mesh.triangles]
    keep = (
        (new_tris[:, 0] != new_tris[:, 1])
        & (new_tris[:, 1] != new_tris[:, 2])
        & (new_tris[:, 0] != new_tris[:, 2])
    )
    c = new_verts[new_tris]
    areas = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    keep &= areas >= DEGENERATE_AREA
    return TexturedMesh(new_verts, new_tris[keep], mesh.uvs[keep], mesh.texture)
