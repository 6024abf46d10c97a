"""Outlier rejection for ground vs synthesized putative matches.

Because the synthesized view is rendered at the ground camera's estimated
pose, correct matches have small disparity vectors m = p - q that vary
smoothly across the image. Three local constraints exploit this, applied
strictly in the order length -> intersection -> direction, followed by
robust epipolar fitting (a-contrario RANSAC with automatic threshold
selection, or a fixed-threshold fallback). A pair whose final match count
falls below the stability gate is rejected outright.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from meshtie.features import Keypoint, PutativeMatch

__all__ = [
    "DisparitySegment",
    "FilterConfig",
    "FilterReport",
    "InsufficientMatchesError",
    "DegenerateModelError",
    "segments_from_matches",
    "filter_length",
    "filter_intersection",
    "filter_direction",
    "ransac_epipolar",
    "filter_pipeline",
]

CONSTRAINT_ORDER = ("length", "intersection", "direction")
MIN_RANSAC_MATCHES = 8


class InsufficientMatchesError(ValueError):
    """Fewer segments than the minimal sample for model fitting."""


class DegenerateModelError(RuntimeError):
    """No valid epipolar model could be estimated."""


@dataclass(frozen=True)
class DisparitySegment:
    """One putative match drawn as a segment: ground point p, synthesized
    point q, disparity m = p - q, and the originating match index."""

    p: np.ndarray
    q: np.ndarray
    index: int

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))
        if self.p.shape != (2,) or self.q.shape != (2,):
            raise ValueError("segment endpoints must be 2-vectors")

    @property
    def m(self) -> np.ndarray:
        return self.p - self.q

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.m))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p + self.q)


@dataclass
class FilterConfig:
    """Thresholds for the constraint cascade and the RANSAC stage."""

    length_fraction: float = 0.02
    k_neighbors: int = 5
    tau_a: float = math.pi / 2
    ransac_mode: str = "adaptive"  # "adaptive" (a-contrario) | "fixed"
    epipolar_threshold: float = 3.0
    max_iters: int = 1000
    max_nfa: float = 1.0
    min_matches: int = 5
    seed: int = 0
    constraint_order: tuple[str, ...] = CONSTRAINT_ORDER

    def __post_init__(self):
        if self.ransac_mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown ransac mode {self.ransac_mode!r}")


@dataclass
class FilterReport:
    """Per-pair stage survivor counts and the accept decision."""

    n_input: int = 0
    n_length: int = 0
    n_intersection: int = 0
    n_direction: int = 0
    n_ransac: int = 0
    accepted: bool = False
    ransac_ran: bool = False
    ransac_error: str = ""
    epipolar_threshold: float = 0.0
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def segments_from_matches(
    matches: list[PutativeMatch],
    keypoints_g: list[Keypoint],
    keypoints_s: list[Keypoint],
) -> list[DisparitySegment]:
    return [
        DisparitySegment(
            p=keypoints_g[m.index_a].position,
            q=keypoints_s[m.index_b].position,
            index=i,
        )
        for i, m in enumerate(matches)
    ]


# ---------------------------------------------------------------------------
# Constraint 1: disparity length
# ---------------------------------------------------------------------------

def filter_length(
    segments: list[DisparitySegment],
    image_extent: float,
    fraction: float = 0.02,
) -> list[DisparitySegment]:
    """Keep segments with |m| strictly below fraction * image_extent."""
    if fraction <= 0:
        raise ValueError("length fraction must be positive")
    limit = fraction * image_extent
    return [s for s in segments if s.length < limit]


# ---------------------------------------------------------------------------
# Constraint 2: segment intersection
# ---------------------------------------------------------------------------

def _proper_cross(a1, a2, b1, b2) -> bool:
    """Strict segment crossing; touching endpoints and collinear overlap do
    not count."""
    def orient(o, p, q):
        return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])

    d1 = orient(a1, a2, b1)
    d2 = orient(a1, a2, b2)
    d3 = orient(b1, b2, a1)
    d4 = orient(b1, b2, a2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def filter_intersection(
    segments: list[DisparitySegment],
    K: int = 5,
) -> list[DisparitySegment]:
    """Greedy removal of crossing segments, shortest first.

    Segments are visited in ascending |m| order; each is tested against its
    K nearest (by midpoint, KD-tree) neighbors that are still alive, and a
    proper crossing removes the longer of the two. Ties in length break on
    the original index so the sweep is deterministic.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = len(segments)
    if n <= 1:
        return list(segments)

    mids = np.array([s.midpoint for s in segments])
    lengths = np.array([s.length for s in segments])
    tree = cKDTree(mids)
    order = sorted(range(n), key=lambda i: (lengths[i], i))
    rank = {idx: r for r, idx in enumerate(order)}
    removed = np.zeros(n, dtype=bool)

    for i in order:
        if removed[i]:
            continue
        # Expand the query until K alive neighbors (excluding self) are seen.
        kq = min(n, K + 1)
        while True:
            _, nn = tree.query(mids[i], k=kq)
            nn = np.atleast_1d(nn)
            alive = [int(j) for j in nn if j != i and not removed[j]]
            if len(alive) >= K or kq >= n:
                break
            kq = min(n, kq * 2)
        for j in alive[:K]:
            if _proper_cross(segments[i].p, segments[i].q,
                             segments[j].p, segments[j].q):
                loser = i if rank[i] > rank[j] else j
                removed[loser] = True
                if loser == i:
                    break
    return [s for k, s in enumerate(segments) if not removed[k]]


# ---------------------------------------------------------------------------
# Constraint 3: dominant direction
# ---------------------------------------------------------------------------

def filter_direction(
    segments: list[DisparitySegment],
    K: int = 5,
    tau_a: float = math.pi / 2,
) -> list[DisparitySegment]:
    """Remove segments that deviate from their neighborhood's dominant
    direction by more than tau_a.

    The dominant direction is the vector sum of the K nearest neighbors'
    disparities (neighbors by midpoint distance, self excluded). Zero-length
    segments and neighborhoods with a vanishing vector sum are kept, since
    no angle is defined for them.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = len(segments)
    if n <= 1:
        return list(segments)

    mids = np.array([s.midpoint for s in segments])
    disps = np.array([s.m for s in segments])
    tree = cKDTree(mids)
    k_eff = min(K, n - 1)
    _, nn = tree.query(mids, k=k_eff + 1)
    nn = np.atleast_2d(nn)

    keep = []
    for i, s in enumerate(segments):
        neighbors = [j for j in nn[i] if j != i][:k_eff]
        dominant = disps[neighbors].sum(axis=0)
        m = disps[i]
        lm, ld = np.linalg.norm(m), np.linalg.norm(dominant)
        if lm == 0.0 or ld < 1e-9:
            keep.append(s)
            continue
        cosang = np.clip(m @ dominant / (lm * ld), -1.0, 1.0)
        if math.acos(cosang) <= tau_a:
            keep.append(s)
    return keep


# ---------------------------------------------------------------------------
# Robust epipolar stage
# ---------------------------------------------------------------------------

def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.linalg.norm(centered, axis=1).mean()
    s = math.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    T = np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    return centered * s, T


def _eight_point(p: np.ndarray, q: np.ndarray) -> np.ndarray | None:
    """Normalized 8-point fit of F with p^T F q = 0, rank-2 enforced."""
    pn, Tp = _normalize_points(p)
    qn, Tq = _normalize_points(q)
    ph = np.hstack([pn, np.ones((len(pn), 1))])
    qh = np.hstack([qn, np.ones((len(qn), 1))])
    A = (ph[:, :, None] * qh[:, None, :]).reshape(len(ph), 9)
    try:
        _, svals, vt = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    # A valid sample leaves exactly one null direction: an (near-)zero 8th
    # singular value signals a degenerate configuration (collinear or
    # coincident points).
    if svals[7] < 1e-10 * max(svals[0], 1e-300):
        return None
    F = vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    F = Tp.T @ F @ Tq
    norm = np.abs(F).max()
    if norm == 0 or not np.isfinite(norm):
        return None
    return F / norm


def _epipolar_residuals(F: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Symmetric epipolar distance: max point-to-line distance in px."""
    ph = np.hstack([p, np.ones((len(p), 1))])
    qh = np.hstack([q, np.ones((len(q), 1))])
    lg = qh @ F.T  # epipolar lines in the ground image
    ls = ph @ F    # epipolar lines in the synthesized image
    num = np.abs(np.einsum("ij,ij->i", ph, lg))
    with np.errstate(divide="ignore", invalid="ignore"):
        dg = num / np.hypot(lg[:, 0], lg[:, 1])
        ds = num / np.hypot(ls[:, 0], ls[:, 1])
    res = np.maximum(dg, ds)
    return np.where(np.isfinite(res), res, np.inf)


def _log_comb(n: int) -> np.ndarray:
    lg = np.array([math.lgamma(i + 1) for i in range(n + 1)])
    return lg


def ransac_epipolar(
    segments: list[DisparitySegment],
    config: FilterConfig,
    image_size: tuple[float, float],
) -> tuple[list[DisparitySegment], np.ndarray]:
    """Robust fundamental-matrix fit over the disparity segments.

    In "adaptive" mode the inlier threshold is picked per model by
    a-contrario NFA minimization over the sorted residual ranks; "fixed"
    mode scores consensus at `epipolar_threshold` pixels. Deterministic for
    a fixed config seed. Returns the inlier segments and the 3x3 model.
    """
    n = len(segments)
    if n < MIN_RANSAC_MATCHES:
        raise InsufficientMatchesError(
            f"need at least {MIN_RANSAC_MATCHES} matches, got {n}"
        )
    p = np.array([s.p for s in segments])
    q = np.array([s.q for s in segments])
    w, h = image_size
    rng = np.random.default_rng(config.seed)

    adaptive = config.ransac_mode == "adaptive" and n > MIN_RANSAC_MATCHES
    if adaptive:
        # a-contrario background model: a uniform point lies within eps of a
        # line with probability ~ 2 * eps * diagonal / area.
        alpha0 = 2.0 * math.hypot(w, h) / (w * h)
        lgf = _log_comb(n)
        ks = np.arange(MIN_RANSAC_MATCHES + 1, n + 1)
        log_base = (
            math.log(n - MIN_RANSAC_MATCHES)
            + (lgf[n] - lgf[ks] - lgf[n - ks])
            + (lgf[ks] - lgf[MIN_RANSAC_MATCHES] - lgf[ks - MIN_RANSAC_MATCHES])
        )

    best_score = np.inf  # log-NFA (adaptive) or -inlier_count (fixed)
    best_inliers: np.ndarray | None = None
    best_F: np.ndarray | None = None
    best_eps = config.epipolar_threshold
    degenerate = 0
    trials_needed = config.max_iters
    trial = 0
    while trial < min(trials_needed, config.max_iters):
        trial += 1
        sample = rng.choice(n, size=MIN_RANSAC_MATCHES, replace=False)
        F = _eight_point(p[sample], q[sample])
        if F is None:
            degenerate += 1
            continue
        res = _epipolar_residuals(F, p, q)
        if adaptive:
            order = np.argsort(res)
            eps = res[order][MIN_RANSAC_MATCHES:]
            with np.errstate(divide="ignore"):
                log_alpha = np.log(np.maximum(eps * alpha0, 1e-300))
            log_nfa = log_base + (ks - MIN_RANSAC_MATCHES) * log_alpha
            kbest = int(np.argmin(log_nfa))
            score = log_nfa[kbest]
            if score < best_score:
                best_score = score
                best_eps = max(eps[kbest], 1e-12)
                best_inliers = res <= best_eps
                best_F = F
        else:
            inliers = res < config.epipolar_threshold
            score = -int(inliers.sum())
            if score < best_score:
                best_score = score
                best_inliers = inliers
                best_F = F
                best_eps = config.epipolar_threshold
        if best_inliers is not None:
            ratio = best_inliers.sum() / n
            if 0 < ratio < 1:
                denom = math.log(max(1.0 - ratio**MIN_RANSAC_MATCHES, 1e-12))
                trials_needed = min(
                    config.max_iters, int(math.ceil(math.log(1e-4) / denom))
                )
            elif ratio == 1.0:
                trials_needed = min(trials_needed, trial + 8)

    if best_F is None:
        raise DegenerateModelError(
            f"all {degenerate} RANSAC samples were degenerate"
        )
    if adaptive and best_score > math.log(config.max_nfa):
        raise DegenerateModelError(
            f"no model reached NFA <= {config.max_nfa} (best log-NFA {best_score:.2f})"
        )

    # Refit on the consensus set and rescore once at the selected threshold.
    if best_inliers.sum() >= MIN_RANSAC_MATCHES:
        F2 = _eight_point(p[best_inliers], q[best_inliers])
        if F2 is not None:
            res2 = _epipolar_residuals(F2, p, q)
            inl2 = res2 <= best_eps
            if inl2.sum() >= best_inliers.sum():
                best_F, best_inliers = F2, inl2

    inliers = [s for s, ok in zip(segments, best_inliers) if ok]
    return inliers, best_F


# ---------------------------------------------------------------------------
# Full cascade
# ---------------------------------------------------------------------------

def filter_pipeline(
    matches: list[PutativeMatch],
    keypoints_g: list[Keypoint],
    keypoints_s: list[Keypoint],
    image_size: tuple[int, int],
    config: FilterConfig = FilterConfig(),
) -> tuple[list[DisparitySegment], FilterReport]:
    """Run length -> intersection -> direction -> RANSAC and the
    minimum-match stability gate.

    The constraint order is part of the contract; configs requesting any
    other order are refused. RANSAC needs 8 segments for its minimal sample,
    so with 5..7 survivors it is skipped and the survivors stand; RANSAC
    failures reject the pair rather than raising. A pair is accepted only
    when the final count reaches `min_matches`; rejected pairs return an
    empty inlier list.
    """
    if tuple(config.constraint_order) != CONSTRAINT_ORDER:
        raise ValueError(
            f"constraint order must be {CONSTRAINT_ORDER}, got {config.constraint_order}"
        )
    report = FilterReport(
        thresholds={
            "length_fraction": config.length_fraction,
            "k_neighbors": config.k_neighbors,
            "tau_a": config.tau_a,
            "min_matches": config.min_matches,
            "ransac_mode": config.ransac_mode,
        },
    )
    extent = float(max(image_size))
    segments = segments_from_matches(matches, keypoints_g, keypoints_s)
    report.n_input = len(segments)

    segments = filter_length(segments, extent, config.length_fraction)
    report.n_length = len(segments)
    segments = filter_intersection(segments, config.k_neighbors)
    report.n_intersection = len(segments)
    segments = filter_direction(segments, config.k_neighbors, config.tau_a)
    report.n_direction = len(segments)

    if len(segments) >= MIN_RANSAC_MATCHES:
        try:
            segments, F = ransac_epipolar(segments, config, image_size)
            report.ransac_ran = True
            if segments:
                res = _epipolar_residuals(
                    F,
                    np.array([s.p for s in segments]),
                    np.array([s.q for s in segments]),
                )
                report.epipolar_threshold = float(res.max())
        except (InsufficientMatchesError, DegenerateModelError) as exc:
            report.ransac_ran = True
            report.ransac_error = str(exc)
            segments = []
    report.n_ransac = len(segments)

    report.accepted = len(segments) >= config.min_matches
    if not report.accepted:
        segments = []
    return segments, report
