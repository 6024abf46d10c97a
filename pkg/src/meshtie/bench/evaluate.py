"""Ground-truth projections and correspondence scoring for synthetic scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from meshtie.bench.oracles import visible_brute
from meshtie.bench.scene import CameraRig, SyntheticScene
from meshtie.geometry import project_point
from meshtie.propagate import RefinedCorrespondence

__all__ = ["GroundTruth", "MatchMetrics", "ground_truth_correspondences", "evaluate_matches"]


@dataclass(frozen=True)
class GroundTruth:
    """Landmark pixel positions: (image_id, landmark_id) -> (2,) pixels."""

    pixels: dict[tuple[str, str], np.ndarray]
    ground_ids: tuple[str, ...]
    aerial_ids: tuple[str, ...]
    landmark_ids: tuple[str, ...]

    def images_seeing(self, landmark_id: str, image_ids) -> list[str]:
        return [i for i in image_ids if (i, landmark_id) in self.pixels]

    def matchable_landmarks(self) -> list[str]:
        """Landmarks observable in at least one ground and one aerial view."""
        return [
            lm for lm in self.landmark_ids
            if self.images_seeing(lm, self.ground_ids)
            and self.images_seeing(lm, self.aerial_ids)
        ]

    def to_jsonable(self) -> dict:
        return {
            "landmarks": list(self.landmark_ids),
            "projections": [
                {"image_id": img, "landmark_id": lm, "pixel": px.tolist()}
                for (img, lm), px in sorted(self.pixels.items())
            ],
        }


@dataclass
class MatchMetrics:
    precision: float
    recall: float
    n_correct: int
    n_scored: int
    n_total: int
    n_matchable_landmarks: int
    error_percentiles: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "n_correct": self.n_correct,
            "n_scored": self.n_scored,
            "n_total": self.n_total,
            "n_matchable_landmarks": self.n_matchable_landmarks,
            "error_percentiles": self.error_percentiles,
        }


def ground_truth_correspondences(
    scene: SyntheticScene,
    rig: CameraRig,
    min_ground_sigma_px: float = 2.2,
) -> GroundTruth:
    """Project every landmark into every true-pose camera where it is both
    unoccluded (brute-force ray cast) and inside the image bounds.

    For ground views the landmark's blob must additionally be resolvable:
    its projected footprint (world radius scaled by focal length, depth and
    incidence) must reach `min_ground_sigma_px` pixels, since a blob
    foreshortened below the detector's base scale is unobservable by any
    method. Aerial entries carry no such gate; they serve only to score the
    propagated endpoint.
    """
    pixels: dict[tuple[str, str], np.ndarray] = {}
    cameras = {**rig.aerial, **rig.ground_true}
    ground_ids = set(rig.ground_true)
    for image_id, (cam, pose) in cameras.items():
        for k, (lm_id, X) in enumerate(zip(scene.landmark_ids, scene.landmarks)):
            Xc = pose.world_to_cam(X)
            if Xc[2] <= cam.z_near:
                continue
            px = project_point(cam, pose, X)
            if not (0 <= px[0] < cam.w and 0 <= px[1] < cam.h):
                continue
            if not visible_brute(scene.mesh, X, pose.C):
                continue
            if image_id in ground_ids and scene.landmark_normals is not None:
                ray = X - pose.C
                dist = np.linalg.norm(ray)
                cos_inc = abs(float(scene.landmark_normals[k] @ ray)) / dist
                sigma_px = scene.landmark_sigmas[k] * cam.f * cos_inc / Xc[2]
                if sigma_px < min_ground_sigma_px:
                    continue
            pixels[(image_id, lm_id)] = px
    return GroundTruth(
        pixels=pixels,
        ground_ids=tuple(sorted(rig.ground_true)),
        aerial_ids=tuple(sorted(rig.aerial)),
        landmark_ids=scene.landmark_ids,
    )


def evaluate_matches(
    correspondences: list[RefinedCorrespondence],
    gt: GroundTruth,
    tol: float = 1.0,
) -> MatchMetrics:
    """Score pipeline output against the planted landmarks.

    A correspondence is associated with the landmark nearest its ground
    endpoint, provided that distance stays within max(2, 2 * tol) pixels;
    correspondences at un-instrumented texture (no landmark nearby) carry no
    ground truth and are left out of the scoring. An associated
    correspondence is correct when both endpoints lie within `tol` pixels of
    that landmark's projections. Precision over an empty scored set is
    reported as 1.0 by convention; recall divides by the landmarks
    observable in both image sets (others are unmatchable by construction).
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    assoc_tol = max(2.0, 2.0 * tol)
    matchable = gt.matchable_landmarks()
    hit_landmarks: set[str] = set()
    n_correct = 0
    n_scored = 0
    errors: list[float] = []
    for corr in correspondences:
        best_dg = np.inf
        best_lm = None
        best_err = np.inf
        for lm in gt.landmark_ids:
            pg = gt.pixels.get((corr.ground_image_id, lm))
            pa = gt.pixels.get((corr.aerial_image_id, lm))
            if pg is None or pa is None:
                continue
            dg = float(np.linalg.norm(corr.ground_px - pg))
            if dg < best_dg:
                best_dg = dg
                best_lm = lm
                best_err = max(dg, float(np.linalg.norm(corr.aerial_px - pa)))
        if best_lm is not None and best_dg <= assoc_tol:
            n_scored += 1
            errors.append(best_err)
            if best_err <= tol:
                n_correct += 1
                hit_landmarks.add(best_lm)

    n_total = len(correspondences)
    precision = 1.0 if n_scored == 0 else n_correct / n_scored
    recall = 0.0 if not matchable else len(hit_landmarks & set(matchable)) / len(matchable)
    pct = {}
    if errors:
        arr = np.asarray(errors)
        pct = {"p50": float(np.percentile(arr, 50)),
               "p90": float(np.percentile(arr, 90)),
               "p95": float(np.percentile(arr, 95))}
    return MatchMetrics(
        precision=precision,
        recall=recall,
        n_correct=n_correct,
        n_scored=n_scored,
        n_total=n_total,
        n_matchable_landmarks=len(matchable),
        error_percentiles=pct,
    )
