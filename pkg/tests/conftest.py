"""Shared fixtures: random pose helpers and a session-scoped demo bundle."""

import math

import numpy as np
import pytest

from meshtie.geometry import CameraIntrinsics, CameraPose


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(0.0, 1.0, 4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng: np.random.Generator, center_scale: float = 5.0) -> CameraPose:
    return CameraPose(R=random_rotation(rng), C=rng.uniform(-center_scale, center_scale, 3))


def simple_intrinsics(f=800.0, w=640, h=480, cx=None, cy=None, distortion=None,
                      z_near=0.5, z_med=10.0, z_far=200.0) -> CameraIntrinsics:
    x0 = np.array([w / 2.0 if cx is None else cx, h / 2.0 if cy is None else cy])
    return CameraIntrinsics(
        f=f, x0=x0, w=w, h=h,
        distortion=np.zeros(5) if distortion is None else np.asarray(distortion, dtype=float),
        z_near=z_near, z_med=z_med, z_far=z_far,
    )


def sample_frustum_points(rng, cam: CameraIntrinsics, pose: CameraPose, n: int,
                          margin: float = 0.0, z_range=None) -> np.ndarray:
    """World points whose projections fall inside the image."""
    z_lo, z_hi = z_range if z_range else (2.0 * cam.z_near, 0.8 * cam.z_far)
    px = rng.uniform([margin, margin], [cam.w - margin, cam.h - margin], (n, 2))
    z = rng.uniform(z_lo, z_hi, n)
    rays = np.concatenate([(px - cam.x0) / cam.f, np.ones((n, 1))], axis=1)
    return pose.cam_to_world(rays * z[:, None])


@pytest.fixture(scope="session")
def demo_bundle(tmp_path_factory):
    """Small synthetic bundle shared across pipeline-level tests."""
    from meshtie.bench.bundle import generate_bundle
    from meshtie.bench.scene import RigParams, SceneParams

    out = tmp_path_factory.mktemp("demo_bundle")
    config, gt, rig, scene = generate_bundle(
        out, seed=0,
        scene_params=SceneParams(),
        rig_params=RigParams(width=480, height=360, n_aerial=6, n_ground=4,
                             f_aerial=1200.0, f_ground=600.0),
        disparity_frac=0.01,
    )
    return {"config": config, "gt": gt, "rig": rig, "scene": scene, "dir": out}
