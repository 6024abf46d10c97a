"""End-to-end orchestration: render, match, filter, propagate, export.

Ground images are processed in id order; within one image the stage order
is fixed (render the synthesized view, pairwise feature matching with the
outlier cascade, then propagation to the aerial views). The three stage
timings per image mirror that split, so doubling the number of ground
images should double the total matching time. Parallelism, when requested,
runs only across ground images; shared inputs are read-only after loading.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from meshtie.bvh import build_bvh
from meshtie.config import PipelineConfig
from meshtie.features import detect_and_describe, import_features, match_ratio, to_grayscale
from meshtie.geometry import load_cameras
from meshtie.mesh import load_tiles, weld_vertices
from meshtie.outlier import filter_pipeline
from meshtie.propagate import AerialView, RefinedCorrespondence, propagate_all
from meshtie.render import render

__all__ = [
    "StageTimings",
    "ImageResult",
    "PipelineResult",
    "run_pipeline",
    "report_timings",
    "write_tiepoints",
    "REPORT_SCHEMA",
]

TIEPOINT_HEADER = "ground_image_id\tgx\tgy\taerial_image_id\tax\tay\tncc\titerations"


@dataclass
class StageTimings:
    rendering: float = 0.0
    pairwise: float = 0.0
    propagation: float = 0.0

    def __post_init__(self):
        if min(self.rendering, self.pairwise, self.propagation) < 0:
            raise ValueError("stage timings must be non-negative")

    def to_dict(self) -> dict:
        return {"rendering": self.rendering, "pairwise": self.pairwise,
                "propagation": self.propagation}


@dataclass
class ImageResult:
    image_id: str
    timings: StageTimings
    filter_report: dict
    n_putative: int
    n_inliers: int
    n_tiepoints: int
    propagation: dict = field(default_factory=dict)
    correspondences: list[RefinedCorrespondence] = field(default_factory=list)


@dataclass
class PipelineResult:
    tiepoint_path: Path
    report_path: Path
    report: dict
    correspondences: list[RefinedCorrespondence]


REPORT_SCHEMA = {
    "type": "object",
    "required": ["config", "mesh", "images", "aggregate"],
    "properties": {
        "config": {"type": "object"},
        "mesh": {
            "type": "object",
            "required": ["n_vertices", "n_triangles", "load_seconds"],
            "properties": {
                "n_vertices": {"type": "integer", "minimum": 0},
                "n_triangles": {"type": "integer", "minimum": 0},
                "load_seconds": {"type": "number", "minimum": 0},
            },
        },
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "timings", "filter_report",
                             "n_putative", "n_inliers", "n_tiepoints"],
                "properties": {
                    "image_id": {"type": "string"},
                    "timings": {
                        "type": "object",
                        "required": ["rendering", "pairwise", "propagation"],
                        "properties": {
                            "rendering": {"type": "number", "minimum": 0},
                            "pairwise": {"type": "number", "minimum": 0},
                            "propagation": {"type": "number", "minimum": 0},
                        },
                    },
                    "filter_report": {
                        "type": "object",
                        "required": ["n_input", "n_length", "n_intersection",
                                     "n_direction", "n_ransac", "accepted"],
                    },
                    "n_putative": {"type": "integer", "minimum": 0},
                    "n_inliers": {"type": "integer", "minimum": 0},
                    "n_tiepoints": {"type": "integer", "minimum": 0},
                    "propagation": {"type": "object"},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["n_images", "n_accepted_pairs", "n_tiepoints",
                         "stage_seconds"],
        },
    },
}


def _load_gray(path: Path) -> np.ndarray:
    return to_grayscale(np.asarray(Image.open(path).convert("RGB")))


def write_tiepoints(path: Path, correspondences: list[RefinedCorrespondence]) -> None:
    """Tie-point TSV, sorted canonically so equal runs are byte-identical."""
    rows = sorted(
        correspondences,
        key=lambda c: (c.ground_image_id, c.match_index, c.aerial_image_id),
    )
    lines = [TIEPOINT_HEADER]
    for c in rows:
        lines.append(
            f"{c.ground_image_id}\t{c.ground_px[0]:.6f}\t{c.ground_px[1]:.6f}"
            f"\t{c.aerial_image_id}\t{c.aerial_px[0]:.6f}\t{c.aerial_px[1]:.6f}"
            f"\t{c.ncc:.6f}\t{c.iterations}"
        )
    path.write_text("\n".join(lines) + "\n")


def _process_ground_image(
    image_id: str,
    index: int,
    config: PipelineConfig,
    ground_cams: dict,
    views: list[AerialView],
    mesh,
    bvh,
) -> ImageResult:
    cam, pose = ground_cams[image_id]
    image_path = Path(config.ground_image_dir) / f"{image_id}.png"
    ground_gray = _load_gray(image_path)

    t0 = time.perf_counter()
    buffers = render(mesh, cam, pose)
    t_render = time.perf_counter() - t0

    t0 = time.perf_counter()
    feat_dir = config.ground_features_dir
    if feat_dir:
        kps_g, desc_g = import_features(
            Path(feat_dir) / f"{image_id}.feat", image_size=(cam.w, cam.h)
        )
    else:
        kps_g, desc_g = detect_and_describe(ground_gray, config.feature_params())
    kps_s, desc_s = detect_and_describe(buffers.color, config.feature_params())
    if len(kps_g) and len(kps_s):
        putative = match_ratio(desc_g, desc_s, config.ratio_max)
    else:
        putative = []
    inliers, report = filter_pipeline(
        putative, kps_g, kps_s, (cam.w, cam.h),
        config.filter_config(seed=config.seed + index),
    )
    t_pairwise = time.perf_counter() - t0

    t0 = time.perf_counter()
    correspondences: list[RefinedCorrespondence] = []
    prop_stats: dict = {}
    if report.accepted:
        correspondences, stats = propagate_all(
            inliers, buffers, views, mesh, bvh, ground_gray, image_id,
            config.propagate_config(),
        )
        prop_stats = stats.to_dict()
    t_prop = time.perf_counter() - t0

    return ImageResult(
        image_id=image_id,
        timings=StageTimings(rendering=t_render, pairwise=t_pairwise,
                             propagation=t_prop),
        filter_report=report.to_dict(),
        n_putative=len(putative),
        n_inliers=len(inliers),
        n_tiepoints=len(correspondences),
        propagation=prop_stats,
        correspondences=correspondences,
    )


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run the full matching pipeline and write tie-points plus a report.

    Rejected pairs are data, not errors: they appear in the report with
    accepted=false and contribute no tie-points. Unreadable required inputs
    raise (the CLI turns that into a nonzero exit).
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    mesh = load_tiles([Path(p) for p in config.mesh_tiles])
    lo, hi = mesh.aabb()
    mesh = weld_vertices(mesh, config.weld_eps_factor * float(np.linalg.norm(hi - lo)))
    bvh = build_bvh(mesh, config.max_leaf_triangles)
    mesh_seconds = time.perf_counter() - t0

    ground_cams = load_cameras(config.ground_cameras) if config.ground_cameras else {}
    aerial_cams = load_cameras(config.aerial_cameras) if config.aerial_cameras else {}
    views = []
    for image_id in sorted(aerial_cams):
        cam, pose = aerial_cams[image_id]
        img_path = Path(config.aerial_image_dir) / f"{image_id}.png"
        views.append(AerialView(image_id=image_id, image=_load_gray(img_path),
                                cam=cam, pose=pose))

    ground_ids = sorted(ground_cams)
    if config.jobs > 1 and len(ground_ids) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(
                lambda pair: _process_ground_image(
                    pair[1], pair[0], config, ground_cams, views, mesh, bvh),
                enumerate(ground_ids),
            ))
    else:
        results = [
            _process_ground_image(image_id, i, config, ground_cams, views, mesh, bvh)
            for i, image_id in enumerate(ground_ids)
        ]

    correspondences = [c for r in results for c in r.correspondences]
    tiepoint_path = out_dir / "tiepoints.tsv"
    write_tiepoints(tiepoint_path, correspondences)

    stage_seconds = {
        "rendering": sum(r.timings.rendering for r in results),
        "pairwise": sum(r.timings.pairwise for r in results),
        "propagation": sum(r.timings.propagation for r in results),
    }
    report = {
        "config": config.to_dict(),
        "mesh": {
            "n_vertices": int(mesh.n_vertices),
            "n_triangles": int(mesh.n_triangles),
            "load_seconds": mesh_seconds,
        },
        "images": [
            {
                "image_id": r.image_id,
                "timings": r.timings.to_dict(),
                "filter_report": r.filter_report,
                "n_putative": r.n_putative,
                "n_inliers": r.n_inliers,
                "n_tiepoints": r.n_tiepoints,
                "propagation": r.propagation,
            }
            for r in results
        ],
        "aggregate": {
            "n_images": len(results),
            "n_accepted_pairs": sum(1 for r in results if r.filter_report["accepted"]),
            "n_tiepoints": len(correspondences),
            "stage_seconds": stage_seconds,
        },
    }
    report_path = out_dir / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2)
    return PipelineResult(tiepoint_path=tiepoint_path, report_path=report_path,
                          report=report, correspondences=correspondences)


def report_timings(report: dict) -> tuple[str, dict]:
    """Per-image and aggregate stage timing table plus machine-readable dict.

    Also derives the (rendering + propagation) / pairwise ratio, the
    overhead the mesh-rendering strategy adds on top of a conventional
    pairwise matcher; when no propagation ran, the ratio degrades to
    rendering / pairwise and is flagged.
    """
    lines = [f"{'image':<12}{'render(s)':>11}{'pairwise(s)':>13}"
             f"{'propagate(s)':>14}{'tiepoints':>11}"]
    machine: dict = {"images": [], "aggregate": {}}
    for img in report["images"]:
        t = img["timings"]
        lines.append(
            f"{img['image_id']:<12}{t['rendering']:>11.3f}{t['pairwise']:>13.3f}"
            f"{t['propagation']:>14.3f}{img['n_tiepoints']:>11d}"
        )
        machine["images"].append({
            "image_id": img["image_id"], **t, "n_tiepoints": img["n_tiepoints"],
        })
    agg = report["aggregate"]["stage_seconds"]
    total_pairwise = agg["pairwise"]
    total_extra = agg["rendering"] + agg["propagation"]
    flagged = agg["propagation"] == 0.0
    ratio = float("inf") if total_pairwise == 0 else total_extra / total_pairwise
    lines.append("")
    lines.append(f"total rendering   {agg['rendering']:.3f} s")
    lines.append(f"total pairwise    {agg['pairwise']:.3f} s")
    lines.append(f"total propagation {agg['propagation']:.3f} s")
    note = " (no accepted pairs: ratio is rendering/pairwise only)" if flagged else ""
    lines.append(f"(rendering+propagation)/pairwise = {ratio:.3f}{note}")
    machine["aggregate"] = {
        "stage_seconds": agg,
        "overhead_ratio": ratio,
        "no_propagation": flagged,
    }
    return "\n".join(lines), machine
