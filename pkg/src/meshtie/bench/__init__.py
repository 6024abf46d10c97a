"""Synthetic scenes, camera rigs, ground truth, and brute-force oracles.

Everything here exists to exercise the main pipeline against independent
implementations: scenes with planted, exactly-known landmarks; rigs with
true and perturbed poses; and deliberately naive reference algorithms (per
pixel ray casting, all-pairs sweeps, double-loop searches) that share no
code with the production path.
"""

from meshtie.bench.scene import (
    SceneParams,
    RigParams,
    SyntheticScene,
    CameraRig,
    gen_scene,
    gen_rig,
    perturb_poses,
    pose_looking_at,
    sigma_for_disparity,
    gen_disparity_field,
)
from meshtie.bench.evaluate import (
    GroundTruth,
    MatchMetrics,
    ground_truth_correspondences,
    evaluate_matches,
)
