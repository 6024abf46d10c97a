"""Command-line interface.

Subcommands mirror the pipeline stages: `render` writes synthesized buffers,
`match` stops after the outlier cascade, `propagate` resumes from saved
matches, `pipeline` runs end to end, `report` prints stage timings,
`overlay` draws match visualizations, and `synth-gen` emits a synthetic
input bundle. Any config field can be overridden with a flag of the same
name; flags beat the config file, which beats the defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from meshtie.bvh import build_bvh
from meshtie.config import PipelineConfig
from meshtie.features import detect_and_describe, import_features, match_ratio, to_grayscale
from meshtie.geometry import load_cameras
from meshtie.mesh import load_tiles, weld_vertices
from meshtie.outlier import DisparitySegment, filter_pipeline
from meshtie.overlay import export_overlay
from meshtie.pipeline import run_pipeline, report_timings, write_tiepoints
from meshtie.propagate import AerialView, propagate_all
from meshtie.render import export_buffers, render

_OVERRIDE_TYPES = (int, float, str)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(PipelineConfig):
        if f.name == "mesh_tiles":
            parser.add_argument("--mesh_tiles", nargs="+", default=None)
        elif f.type in ("int", "float", "str") or isinstance(f.default, _OVERRIDE_TYPES):
            parser.add_argument(f"--{f.name}", type=type(f.default), default=None)


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    base = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {
        f.name: getattr(args, f.name, None)
        for f in fields(PipelineConfig)
        if hasattr(args, f.name)
    }
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return base.with_overrides(**overrides)


def _load_scene(config: PipelineConfig):
    mesh = load_tiles([Path(p) for p in config.mesh_tiles])
    lo, hi = mesh.aabb()
    mesh = weld_vertices(mesh, config.weld_eps_factor * float(np.linalg.norm(hi - lo)))
    bvh = build_bvh(mesh, config.max_leaf_triangles)
    return mesh, bvh


def _load_gray(path: Path) -> np.ndarray:
    return to_grayscale(np.asarray(Image.open(path).convert("RGB")))


def _ground_ids(config: PipelineConfig, only: str | None) -> list[str]:
    cams = load_cameras(config.ground_cameras)
    ids = sorted(cams)
    if only is not None:
        if only not in cams:
            raise SystemExit(f"unknown ground image id {only!r}")
        ids = [only]
    return ids


def _cmd_render(args) -> int:
    config = _load_config(args)
    mesh, _ = _load_scene(config)
    cams = load_cameras(config.ground_cameras)
    out_dir = Path(config.out_dir) / "buffers"
    for image_id in _ground_ids(config, args.image_id):
        cam, pose = cams[image_id]
        buffers = render(mesh, cam, pose)
        paths = export_buffers(buffers, out_dir, image_id)
        print(f"{image_id}: wrote {len(paths)} buffers to {out_dir}")
    return 0


def _cmd_match(args) -> int:
    config = _load_config(args)
    mesh, _ = _load_scene(config)
    cams = load_cameras(config.ground_cameras)
    out_dir = Path(config.out_dir) / "matches"
    out_dir.mkdir(parents=True, exist_ok=True)
    for index, image_id in enumerate(_ground_ids(config, args.image_id)):
        cam, pose = cams[image_id]
        ground = _load_gray(Path(config.ground_image_dir) / f"{image_id}.png")
        buffers = render(mesh, cam, pose)
        if config.ground_features_dir:
            kps_g, desc_g = import_features(
                Path(config.ground_features_dir) / f"{image_id}.feat",
                image_size=(cam.w, cam.h),
            )
        else:
            kps_g, desc_g = detect_and_describe(ground, config.feature_params())
        kps_s, desc_s = detect_and_describe(buffers.color, config.feature_params())
        putative = (match_ratio(desc_g, desc_s, config.ratio_max)
                    if len(kps_g) and len(kps_s) else [])
        inliers, report = filter_pipeline(
            putative, kps_g, kps_s, (cam.w, cam.h),
            config.filter_config(seed=config.seed + index),
        )
        payload = {
            "image_id": image_id,
            "accepted": report.accepted,
            "matches": [
                {"index": s.index, "p": s.p.tolist(), "q": s.q.tolist()}
                for s in inliers
            ],
            "report": report.to_dict(),
        }
        with open(out_dir / f"{image_id}.json", "w") as fh:
            json.dump(payload, fh, indent=2)
        print(f"{image_id}: {len(putative)} putative -> {len(inliers)} inliers "
              f"(accepted={report.accepted})")
    return 0


def _cmd_propagate(args) -> int:
    config = _load_config(args)
    mesh, bvh = _load_scene(config)
    ground_cams = load_cameras(config.ground_cameras)
    aerial_cams = load_cameras(config.aerial_cameras)
    views = [
        AerialView(image_id=i, image=_load_gray(Path(config.aerial_image_dir) / f"{i}.png"),
                   cam=c, pose=p)
        for i, (c, p) in sorted(aerial_cams.items())
    ]
    matches_dir = Path(args.matches_dir or (Path(config.out_dir) / "matches"))
    correspondences = []
    for image_id in _ground_ids(config, args.image_id):
        path = matches_dir / f"{image_id}.json"
        if not path.exists():
            print(f"{image_id}: no saved matches, skipping", file=sys.stderr)
            continue
        with open(path) as fh:
            payload = json.load(fh)
        if not payload["accepted"]:
            continue
        segments = [
            DisparitySegment(p=np.asarray(m["p"]), q=np.asarray(m["q"]),
                             index=m["index"])
            for m in payload["matches"]
        ]
        cam, pose = ground_cams[image_id]
        ground = _load_gray(Path(config.ground_image_dir) / f"{image_id}.png")
        buffers = render(mesh, cam, pose)
        corrs, stats = propagate_all(
            segments, buffers, views, mesh, bvh, ground, image_id,
            config.propagate_config(),
        )
        correspondences.extend(corrs)
        print(f"{image_id}: {stats.emitted} correspondences")
    out_path = Path(config.out_dir) / "tiepoints.tsv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_tiepoints(out_path, correspondences)
    print(f"wrote {len(correspondences)} tie-points to {out_path}")
    return 0


def _cmd_pipeline(args) -> int:
    config = _load_config(args)
    result = run_pipeline(config)
    agg = result.report["aggregate"]
    print(f"{agg['n_images']} ground images, {agg['n_accepted_pairs']} accepted pairs, "
          f"{agg['n_tiepoints']} tie-points")
    print(f"tie-points: {result.tiepoint_path}")
    print(f"report:     {result.report_path}")
    return 0


def _cmd_report(args) -> int:
    with open(args.report) as fh:
        report = json.load(fh)
    text, machine = report_timings(report)
    print(text)
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(machine, fh, indent=2)
    return 0


def _cmd_overlay(args) -> int:
    config = _load_config(args)
    from meshtie.propagate import RefinedCorrespondence

    ground = np.asarray(Image.open(
        Path(config.ground_image_dir) / f"{args.ground_id}.png").convert("RGB"))
    aerial = np.asarray(Image.open(
        Path(config.aerial_image_dir) / f"{args.aerial_id}.png").convert("RGB"))
    correspondences = []
    tsv = Path(args.tiepoints or (Path(config.out_dir) / "tiepoints.tsv"))
    for line in tsv.read_text().splitlines()[1:]:
        gid, gx, gy, aid, ax, ay, ncc, iters = line.split("\t")
        if gid == args.ground_id and aid == args.aerial_id:
            correspondences.append(RefinedCorrespondence(
                ground_image_id=gid, ground_px=np.array([float(gx), float(gy)]),
                aerial_image_id=aid, aerial_px=np.array([float(ax), float(ay)]),
                ncc=float(ncc), lsm_status="converged", iterations=int(iters),
            ))
    out = args.out or str(Path(config.out_dir) / f"overlay_{args.ground_id}_{args.aerial_id}.png")
    export_overlay(ground, aerial, correspondences, out, insets=args.insets)
    print(f"wrote {out} ({len(correspondences)} correspondences)")
    return 0


def _cmd_synth_gen(args) -> int:
    from meshtie.bench.bundle import generate_bundle
    from meshtie.bench.scene import RigParams, SceneParams

    rig_params = RigParams(width=args.width, height=args.height,
                           n_aerial=args.n_aerial, n_ground=args.n_ground)
    config, gt, _, scene = generate_bundle(
        args.out, seed=args.seed, scene_params=SceneParams(),
        rig_params=rig_params, disparity_frac=args.disparity_frac,
        photo_noise=args.photo_noise,
    )
    print(f"scene: {scene.mesh.n_triangles} triangles, "
          f"{len(scene.landmark_ids)} landmarks")
    print(f"bundle written under {args.out}; config at {Path(args.out) / 'config.json'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="meshtie",
        description="Aerial-ground tie-point matching via textured-mesh rendering",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_image_id=False):
        p.add_argument("--config", default=None, help="pipeline config JSON")
        p.add_argument("--out", default=None, help="output directory override")
        if with_image_id:
            p.add_argument("--image-id", default=None, help="restrict to one ground image")
        _add_config_flags(p)

    common(sub.add_parser("render", help="write synthesized view buffers"), True)
    common(sub.add_parser("match", help="match ground vs synthesized views"), True)
    p = sub.add_parser("propagate", help="propagate saved matches to aerial views")
    common(p, True)
    p.add_argument("--matches-dir", default=None)
    common(sub.add_parser("pipeline", help="run the full pipeline"))

    p = sub.add_parser("report", help="print stage timings from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--json-out", default=None)

    p = sub.add_parser("overlay", help="draw a match overlay image")
    p.add_argument("--ground-id", required=True)
    p.add_argument("--aerial-id", required=True)
    p.add_argument("--tiepoints", default=None)
    p.add_argument("--insets", action="store_true")
    common(p)

    p = sub.add_parser("synth-gen", help="generate a synthetic input bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--n-aerial", type=int, default=8)
    p.add_argument("--n-ground", type=int, default=8)
    p.add_argument("--disparity-frac", type=float, default=0.01)
    p.add_argument("--photo-noise", type=float, default=0.0)

    args = parser.parse_args(argv)
    handlers = {
        "render": _cmd_render,
        "match": _cmd_match,
        "propagate": _cmd_propagate,
        "pipeline": _cmd_pipeline,
        "report": _cmd_report,
        "overlay": _cmd_overlay,
        "synth-gen": _cmd_synth_gen,
    }
    try:
        return handlers[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
