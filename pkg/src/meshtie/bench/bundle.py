"""Write a complete synthetic input bundle consumable by the pipeline CLI.

The bundle mimics a coarsely registered aerial-ground project: the mesh
tile with its texture, aerial photos rendered from the aerial rig, ground
photos rendered from the TRUE ground poses, camera files carrying the
PERTURBED ground poses (what a real pipeline would believe), plus the true
poses and landmark ground truth for scoring.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from meshtie.bench.evaluate import GroundTruth, ground_truth_correspondences
from meshtie.bench.scene import (
    CameraRig,
    RigParams,
    SceneParams,
    SyntheticScene,
    gen_rig,
    gen_scene,
    perturb_poses,
    sigma_for_disparity,
)
from meshtie.config import PipelineConfig
from meshtie.geometry import save_cameras
from meshtie.mesh import save_mesh
from meshtie.render import render

__all__ = ["generate_bundle"]


def _measured_disparity(scene: SyntheticScene, rig: CameraRig) -> float:
    """Median landmark displacement between true and estimated ground poses."""
    from meshtie.geometry import project_point

    lens = []
    for image_id in rig.ground_true:
        cam, pose_t = rig.ground_true[image_id]
        _, pose_e = rig.ground_estimated[image_id]
        for X in scene.landmarks:
            try:
                a = project_point(cam, pose_t, X)
                b = project_point(cam, pose_e, X)
            except ValueError:
                continue
            if (0 <= a[0] < cam.w and 0 <= a[1] < cam.h
                    and 0 <= b[0] < cam.w and 0 <= b[1] < cam.h):
                lens.append(float(np.linalg.norm(a - b)))
    return float(np.median(lens)) if lens else 0.0


def _calibrated_perturbation(scene, rig, sigma_t, sigma_r, seed, target_px,
                             rel_window=0.15, max_tries=64) -> CameraRig:
    for attempt in range(max_tries):
        candidate = perturb_poses(rig, sigma_t, sigma_r, seed + attempt)
        med = _measured_disparity(scene, candidate)
        if abs(med - target_px) <= rel_window * target_px:
            return candidate
    raise RuntimeError(
        f"no perturbation draw reached a median disparity near {target_px:.1f} px"
    )


def _save_photo(path: Path, buffers, rng: np.random.Generator | None, noise: float):
    img = buffers.color.astype(np.float64)
    if rng is not None and noise > 0:
        gain = rng.uniform(0.9, 1.1)
        bias = rng.uniform(-8.0, 8.0)
        img = gain * img + bias + rng.normal(0.0, noise * 255.0, img.shape)
    Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8)).save(path)


def generate_bundle(
    out_dir: str | Path,
    seed: int = 0,
    scene_params: SceneParams = SceneParams(),
    rig_params: RigParams = RigParams(),
    disparity_frac: float = 0.01,
    photo_noise: float = 0.0,
) -> tuple[PipelineConfig, GroundTruth, CameraRig, SyntheticScene]:
    """Generate scene + rig + photos + config under `out_dir`."""
    out_dir = Path(out_dir)
    for sub in ("mesh", "cameras", "images/ground", "images/aerial"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    scene = gen_scene(seed, scene_params)
    rig = gen_rig(scene_params, rig_params)
    target_px = disparity_frac * max(rig_params.width, rig_params.height)
    sigma_t, sigma_r = sigma_for_disparity(
        target_px, rig_params.f_ground, rig_params.ground_distance
    )
    # Individual Gaussian draws scatter widely; redraw until the realized
    # (landmark-projected) median disparity matches the requested level.
    rig = _calibrated_perturbation(scene, rig, sigma_t, sigma_r, seed + 1, target_px)

    mesh_path = out_dir / "mesh" / "scene.obj"
    save_mesh(scene.mesh, mesh_path)

    rng = np.random.default_rng(seed + 2) if photo_noise > 0 else None
    for image_id in sorted(rig.aerial):
        cam, pose = rig.aerial[image_id]
        buffers = render(scene.mesh, cam, pose)
        _save_photo(out_dir / "images" / "aerial" / f"{image_id}.png",
                    buffers, None, 0.0)
    for image_id in sorted(rig.ground_true):
        cam, pose = rig.ground_true[image_id]
        buffers = render(scene.mesh, cam, pose)
        _save_photo(out_dir / "images" / "ground" / f"{image_id}.png",
                    buffers, rng, photo_noise)

    save_cameras(out_dir / "cameras" / "aerial.json", rig.aerial)
    save_cameras(out_dir / "cameras" / "ground.json", rig.ground_estimated)
    save_cameras(out_dir / "cameras" / "ground_true.json", rig.ground_true)

    gt = ground_truth_correspondences(scene, rig)
    with open(out_dir / "ground_truth.json", "w") as fh:
        json.dump(gt.to_jsonable(), fh, indent=2)

    # The NCC search must cover whatever residual registration error the
    # length gate lets through, i.e. the full tau_l band.
    length_fraction = 0.02
    search_radius = int(np.ceil(length_fraction * max(rig_params.width, rig_params.height)))
    config = PipelineConfig(
        mesh_tiles=[str(mesh_path)],
        ground_cameras=str(out_dir / "cameras" / "ground.json"),
        aerial_cameras=str(out_dir / "cameras" / "aerial.json"),
        ground_image_dir=str(out_dir / "images" / "ground"),
        aerial_image_dir=str(out_dir / "images" / "aerial"),
        out_dir=str(out_dir / "out"),
        length_fraction=length_fraction,
        search_radius=search_radius,
        seed=seed,
    )
    config.save(out_dir / "config.json")
    return config, gt, rig, scene
