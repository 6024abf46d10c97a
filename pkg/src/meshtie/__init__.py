"""meshtie: aerial-ground tie-point matching via textured-mesh rendering.

The pipeline renders a photogrammetric textured mesh into virtual ground
views (color/depth/normal buffers), matches features between each real
ground image and its synthesized twin under local geometric constraints,
lifts the surviving matches to oriented 3D patches, and propagates them to
the original aerial images through plane-induced rectification, NCC search,
and least-squares refinement. The output is a tie-point table consumable by
external SFM/MVS pipelines.
"""

from meshtie.geometry import (
    CameraIntrinsics,
    CameraPose,
    RenderCamera,
    Homography,
    project_point,
    undistort,
    build_render_camera,
    relative_transform,
    compute_homography,
    load_cameras,
    save_cameras,
)
from meshtie.mesh import TexturedMesh, load_mesh, load_tiles, save_mesh, weld_vertices
from meshtie.bvh import BvhAccel, RayHit, build_bvh, ray_intersect, is_visible
from meshtie.render import FrameBuffers, render, depth_to_xyz, gsd_at
from meshtie.features import (
    Keypoint,
    FeatureParams,
    PutativeMatch,
    detect_and_describe,
    match_ratio,
    import_features,
    export_features,
)
from meshtie.outlier import (
    DisparitySegment,
    FilterConfig,
    FilterReport,
    filter_length,
    filter_intersection,
    filter_direction,
    ransac_epipolar,
    filter_pipeline,
)
from meshtie.propagate import (
    OrientedPatch,
    ViewSelection,
    RefinedCorrespondence,
    AerialView,
    PropagateConfig,
    build_patch,
    select_views,
    warp_patch,
    ncc_search,
    lsm_refine,
    back_project,
    propagate_all,
)
from meshtie.config import PipelineConfig
from meshtie.pipeline import run_pipeline

__version__ = "0.1.0"
