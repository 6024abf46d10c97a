"""Keypoint detection, description, matching, and feature file exchange.

The detector is a compact difference-of-Gaussians pipeline: multi-scale
extrema with sub-pixel refinement, an orientation histogram, and a 4x4x8
gradient descriptor. It is tuned for the job at hand, matching a ground
photo against a synthesized rendering of the same view, where the two
images are nearly aligned by construction. Externally computed features can
be substituted through the binary feature file format below.

Feature file format (little-endian): magic "FEATv1", u32 record count, then
per record f32 x, y, scale, orientation followed by 128 f32 descriptor
entries.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

logger = logging.getLogger(__name__)

__all__ = [
    "Keypoint",
    "FeatureParams",
    "PutativeMatch",
    "ImageTooSmallError",
    "FeatureFormatError",
    "to_grayscale",
    "detect_and_describe",
    "match_ratio",
    "import_features",
    "export_features",
]

FEATURE_MAGIC = b"FEATv1"
DESCRIPTOR_SIZE = 128
DESCRIPTOR_CLIP = 0.2


class ImageTooSmallError(ValueError):
    """Raised for images below the 64x64 detection minimum."""


class FeatureFormatError(ValueError):
    """Raised for malformed or unversioned feature files."""


@dataclass(frozen=True)
class Keypoint:
    """Sub-pixel keypoint: position (x, y) in pixels, scale, orientation."""

    position: np.ndarray
    scale: float
    orientation: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        if self.position.shape != (2,):
            raise ValueError("keypoint position must be a 2-vector")
        if self.scale <= 0:
            raise ValueError("keypoint scale must be positive")


@dataclass(frozen=True)
class PutativeMatch:
    """Candidate correspondence: ground index, synthesized index, distance ratio."""

    index_a: int
    index_b: int
    ratio: float

    def __post_init__(self):
        if not (0.0 <= self.ratio <= 1.0):
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")


@dataclass(frozen=True)
class FeatureParams:
    """Detector knobs; the defaults are this package's choices."""

    n_octaves: int = 3
    n_scales: int = 3
    sigma: float = 1.6
    contrast_threshold: float = 0.02
    edge_ratio: float = 10.0
    border: int = 5
    max_features: int = 0  # 0 = unlimited


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Unit-range grayscale; RGB collapses with ITU-R 601 luma weights."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    img = img.astype(np.float64)
    if image.dtype == np.uint8:
        img = img / 255.0
    return img


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _gaussian_pyramid(image: np.ndarray, params: FeatureParams):
    s = params.n_scales
    k = 2.0 ** (1.0 / s)
    # Assume camera images carry ~0.5 px of blur already.
    base_blur = np.sqrt(max(params.sigma**2 - 0.25, 0.01))
    octaves = []
    current = gaussian_filter(image, base_blur, mode="nearest")
    for _ in range(params.n_octaves):
        levels = [current]
        for i in range(1, s + 3):
            prev_sigma = params.sigma * k ** (i - 1)
            step = prev_sigma * np.sqrt(k * k - 1.0)
            levels.append(gaussian_filter(levels[-1], step, mode="nearest"))
        octaves.append(np.stack(levels))
        current = levels[s][::2, ::2]
    return octaves


def _refine_extremum(dog: np.ndarray, layer: int, y: int, x: int,
                     params: FeatureParams):
    """3D quadratic fit around a DoG sample; returns (l, y, x, offsets, value)."""
    n_layers, h, w = dog.shape
    for _ in range(5):
        d = dog[layer - 1:layer + 2, y - 1:y + 2, x - 1:x + 2]
        g = 0.5 * np.array([
            d[1, 1, 2] - d[1, 1, 0],
            d[1, 2, 1] - d[1, 0, 1],
            d[2, 1, 1] - d[0, 1, 1],
        ])
        c = d[1, 1, 1]
        dxx = d[1, 1, 2] - 2 * c + d[1, 1, 0]
        dyy = d[1, 2, 1] - 2 * c + d[1, 0, 1]
        dss = d[2, 1, 1] - 2 * c + d[0, 1, 1]
        dxy = 0.25 * (d[1, 2, 2] - d[1, 2, 0] - d[1, 0, 2] + d[1, 0, 0])
        dxs = 0.25 * (d[2, 1, 2] - d[2, 1, 0] - d[0, 1, 2] + d[0, 1, 0])
        dys = 0.25 * (d[2, 2, 1] - d[2, 0, 1] - d[0, 2, 1] + d[0, 0, 1])
        H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            off = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            value = c + 0.5 * g @ off
            if abs(value) < params.contrast_threshold:
                return None
            r = params.edge_ratio
            tr, det = dxx + dyy, dxx * dyy - dxy * dxy
            if det <= 0 or tr * tr * r >= det * (r + 1.0) ** 2:
                return None
            return layer, y, x, off, value
        x += int(np.round(off[0]))
        y += int(np.round(off[1]))
        layer += int(np.round(off[2]))
        if not (1 <= layer < n_layers - 1
                and params.border <= y < h - params.border
                and params.border <= x < w - params.border):
            return None
    return None


def _gradients(level: np.ndarray):
    dy, dx = np.gradient(level)
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def _dominant_orientation(mag, ang, y, x, sigma_oct):
    radius = int(np.round(3.0 * 1.5 * sigma_oct))
    h, w = mag.shape
    y0, y1 = max(0, y - radius), min(h, y + radius + 1)
    x0, x1 = max(0, x - radius), min(w, x + radius + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    weight = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * (1.5 * sigma_oct) ** 2))
    m = mag[y0:y1, x0:x1] * weight
    bins = np.floor((ang[y0:y1, x0:x1] % (2 * np.pi)) / (2 * np.pi) * 36).astype(int) % 36
    hist = np.bincount(bins.ravel(), weights=m.ravel(), minlength=36)
    for _ in range(2):  # circular smoothing
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    b = int(np.argmax(hist))
    left, mid, right = hist[(b - 1) % 36], hist[b], hist[(b + 1) % 36]
    denom = left - 2 * mid + right
    shift = 0.0 if denom == 0 else 0.5 * (left - right) / denom
    return ((b + 0.5 + shift) / 36.0) * 2 * np.pi


def _descriptor(mag, ang, y, x, sigma_oct, theta):
    """4x4 spatial cells x 8 orientation bins with soft binning."""
    n_cells, n_bins = 4, 8
    cell_width = 3.0 * sigma_oct
    radius = int(np.round(cell_width * np.sqrt(2) * (n_cells + 1) * 0.5))
    h, w = mag.shape
    y0, y1 = max(0, y - radius), min(h, y + radius + 1)
    x0, x1 = max(0, x - radius), min(w, x + radius + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = (xx - x).ravel(), (yy - y).ravel()
    ct, st = np.cos(theta), np.sin(theta)
    # Rotate into the keypoint frame and express in cell units.
    u = (ct * dx + st * dy) / cell_width
    v = (-st * dx + ct * dy) / cell_width
    keep = (np.abs(u) < n_cells / 2 + 0.5) & (np.abs(v) < n_cells / 2 + 0.5)
    if not keep.any():
        return None
    u, v = u[keep], v[keep]
    m = mag[y0:y1, x0:x1].ravel()[keep]
    a = (ang[y0:y1, x0:x1].ravel()[keep] - theta) % (2 * np.pi)
    weight = np.exp(-(u * u + v * v) / (2.0 * (n_cells / 2) ** 2))
    m = m * weight

    row = v + n_cells / 2 - 0.5
    col = u + n_cells / 2 - 0.5
    obin = a / (2 * np.pi) * n_bins
    desc = np.zeros((n_cells, n_cells, n_bins))
    r0 = np.floor(row).astype(int)
    c0 = np.floor(col).astype(int)
    o0 = np.floor(obin).astype(int)
    fr, fc, fo = row - r0, col - c0, obin - o0
    for dr in (0, 1):
        for dc in (0, 1):
            for do in (0, 1):
                rr, cc2 = r0 + dr, c0 + dc
                ok = (rr >= 0) & (rr < n_cells) & (cc2 >= 0) & (cc2 < n_cells)
                if not ok.any():
                    continue
                wgt = m[ok] \
                    * (fr[ok] if dr else 1 - fr[ok]) \
                    * (fc[ok] if dc else 1 - fc[ok]) \
                    * (fo[ok] if do else 1 - fo[ok])
                np.add.at(desc, (rr[ok], cc2[ok], (o0[ok] + do) % n_bins), wgt)
    vec = desc.ravel()
    norm = np.linalg.norm(vec)
    if norm == 0:
        return None
    vec = np.minimum(vec / norm, DESCRIPTOR_CLIP)
    norm = np.linalg.norm(vec)
    if norm == 0:
        return None
    return (vec / norm).astype(np.float32)


def detect_and_describe(
    image: np.ndarray,
    params: FeatureParams = FeatureParams(),
) -> tuple[list[Keypoint], np.ndarray]:
    """Detect DoG keypoints and compute their descriptors.

    Accepts a grayscale raster (uint8 or unit-range float). Returns the
    keypoint list and an aligned (N, 128) float32 descriptor matrix.
    """
    img = to_grayscale(image)
    if img.shape[0] < 64 or img.shape[1] < 64:
        raise ImageTooSmallError(f"image {img.shape} is below the 64x64 minimum")

    pyramids = _gaussian_pyramid(img, params)
    k = 2.0 ** (1.0 / params.n_scales)
    results = []  # (response, Keypoint, descriptor)
    for octave, gauss in enumerate(pyramids):
        dog = gauss[1:] - gauss[:-1]
        n_layers, h, w = dog.shape
        if h < 2 * params.border + 3 or w < 2 * params.border + 3:
            continue
        prefilter = 0.5 * params.contrast_threshold
        interior = dog[1:n_layers - 1]
        is_max = interior >= maximum_filter(dog, size=3, mode="nearest")[1:n_layers - 1]
        is_min = interior <= minimum_filter(dog, size=3, mode="nearest")[1:n_layers - 1]
        cand = (is_max | is_min) & (np.abs(interior) > prefilter)
        cand[:, :params.border, :] = False
        cand[:, h - params.border:, :] = False
        cand[:, :, :params.border] = False
        cand[:, :, w - params.border:] = False

        grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for li, yi, xi in np.argwhere(cand):
            refined = _refine_extremum(dog, li + 1, yi, xi, params)
            if refined is None:
                continue
            layer, y, x, off, value = refined
            sigma_oct = params.sigma * k ** (layer + off[2])
            level = int(np.clip(np.round(layer + off[2]), 0, len(gauss) - 1))
            if level not in grads:
                grads[level] = _gradients(gauss[level])
            mag, ang = grads[level]
            theta = _dominant_orientation(mag, ang, y, x, sigma_oct)
            desc = _descriptor(mag, ang, y, x, sigma_oct, theta)
            if desc is None:
                continue
            scale = 2.0 ** octave
            pos = np.array([
                (x + off[0]) * scale + 0.5,
                (y + off[1]) * scale + 0.5,
            ])
            if not (0 <= pos[0] < img.shape[1] and 0 <= pos[1] < img.shape[0]):
                continue
            kp = Keypoint(position=pos, scale=sigma_oct * scale, orientation=theta)
            results.append((abs(value), kp, desc))

    if params.max_features and len(results) > params.max_features:
        results.sort(key=lambda r: -r[0])
        results = results[:params.max_features]
    keypoints = [r[1] for r in results]
    descs = (np.stack([r[2] for r in results])
             if results else np.zeros((0, DESCRIPTOR_SIZE), dtype=np.float32))
    return keypoints, descs


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def match_ratio(
    descs_g: np.ndarray,
    descs_s: np.ndarray,
    ratio_max: float = 0.8,
) -> list[PutativeMatch]:
    """Exhaustive nearest/second-nearest matching with the ratio check.

    For each ground descriptor the two closest synthesized descriptors are
    found; the match is kept when nearest/second-nearest < ratio_max. A
    synthesized feature may win at most one match (lowest ratio, ties to the
    lowest ground index).
    """
    a = np.asarray(descs_g, dtype=np.float64)
    b = np.asarray(descs_s, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both feature sets must be non-empty")

    d2 = np.maximum(
        (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T),
        0.0,
    )
    candidates = []
    for i in range(len(a)):
        row = d2[i]
        if len(b) == 1:
            candidates.append((i, 0, 0.0))
            continue
        j1, j2 = np.argpartition(row, 1)[:2]
        if row[j2] < row[j1] or (row[j2] == row[j1] and j2 < j1):
            j1, j2 = j2, j1
        d1, dsecond = np.sqrt(row[j1]), np.sqrt(row[j2])
        ratio = 1.0 if dsecond == 0.0 else min(d1 / dsecond, 1.0)
        if ratio < ratio_max:
            candidates.append((i, int(j1), float(ratio)))

    best_for_b: dict[int, tuple[float, int]] = {}
    for i, j, ratio in candidates:
        cur = best_for_b.get(j)
        if cur is None or (ratio, i) < cur:
            best_for_b[j] = (ratio, i)
    kept = {(i, j) for j, (_, i) in best_for_b.items()}
    return [PutativeMatch(i, j, r) for i, j, r in candidates if (i, j) in kept]


# ---------------------------------------------------------------------------
# Feature file exchange
# ---------------------------------------------------------------------------

def export_features(path: str | Path, keypoints: list[Keypoint], descs: np.ndarray) -> None:
    descs = np.asarray(descs, dtype=np.float32)
    if len(keypoints) != len(descs):
        raise ValueError("keypoint and descriptor counts disagree")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(keypoints)))
        for kp, d in zip(keypoints, descs):
            fh.write(struct.pack("<4f", kp.position[0], kp.position[1],
                                 kp.scale, kp.orientation))
            fh.write(d.astype("<f4").tobytes())


def import_features(
    path: str | Path,
    image_size: tuple[int, int] | None = None,
) -> tuple[list[Keypoint], np.ndarray]:
    """Read a feature file, enforcing descriptor normalization.

    When `image_size` = (w, h) is given, keypoints outside the image (or
    with non-positive scale) are dropped; the number dropped is logged.
    """
    raw = Path(path).read_bytes()
    if raw[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
    offset = len(FEATURE_MAGIC)
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    record = 4 * (4 + DESCRIPTOR_SIZE)
    if len(raw) - offset != count * record:
        raise FeatureFormatError(f"{path}: truncated feature file")

    keypoints: list[Keypoint] = []
    descs: list[np.ndarray] = []
    dropped = 0
    for _ in range(count):
        x, y, scale, orientation = struct.unpack_from("<4f", raw, offset)
        offset += 16
        d = np.frombuffer(raw, dtype="<f4", count=DESCRIPTOR_SIZE, offset=offset).copy()
        offset += 4 * DESCRIPTOR_SIZE
        norm = float(np.linalg.norm(d))
        out_of_bounds = image_size is not None and not (
            0 <= x < image_size[0] and 0 <= y < image_size[1]
        )
        if scale <= 0 or norm == 0.0 or out_of_bounds:
            dropped += 1
            continue
        keypoints.append(Keypoint(position=np.array([x, y]), scale=scale,
                                  orientation=orientation))
        # Renormalize only when needed, so normalized files round-trip
        # bit-exactly.
        descs.append(d if abs(norm - 1.0) <= 1e-6 else (d / norm).astype(np.float32))
    if dropped:
        logger.warning("%s: dropped %d invalid feature records", path, dropped)
    arr = np.stack(descs) if descs else np.zeros((0, DESCRIPTOR_SIZE), dtype=np.float32)
    return keypoints, arr
