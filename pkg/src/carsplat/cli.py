"""``carsplat`` command-line entry point.

Stages communicate through plain files so each can be rerun on its own:

    reconstruct   posed frames -> splats.rspl + env.pfm + loss.csv
    postprocess   splats.rspl -> canonical asset (asset.rasset)
    bank-build    entry manifest -> partitioned memory bank
    retrieve      bank + queries -> ranked neighbors
    insert        background + assets + tracks -> scene.json
    render        scene.json -> PFM and PNG frames
    evaluate      detections / images / features -> report.json
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import asset as asset_mod
from .config import SECTIONS, ConfigError, PipelineConfig, describe
from .geom import PointCloud, load_cameras_and_tracks
from .imageio import read_image, read_mask, read_matrix, read_pfm, write_pfm, write_png
from .insertion import (MissingTrackFrameError, SceneGraph, compose, fit_env_scale, icp_refine,
                        load_scene_manifest, place_asset, save_scene_manifest)
from .losses import psnr
from .metrics import (DetectionSet, FeatureStats, MetricError, color_distances, fid, idf1, kid,
                      match_frames, mean_instance_iou, mota, motp, report)
from .raster import load_splats, render, save_splats
from .recon import DivergenceError, TrainingFrame, init_from_points, optimize
from .retrieval import BankEntry, EmptyBankError, Query, build_bank, load_bank, retrieve, save_bank
from .shading import EnvironmentMap, prefilter

log = logging.getLogger("carsplat")

EXIT_INPUT = 2
EXIT_DIVERGENCE = 3
EXIT_RENDER = 4
EXIT_METRIC = 5


class InputError(ValueError):
    pass


class RenderError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _resolve(base: Path, p) -> Path:
    p = Path(p)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise InputError(f"missing file: {p}")
    return p


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing file: {path}")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: invalid JSON ({exc})") from None
    return out


def _read_points(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        pts = np.load(path)
    else:
        pts = np.loadtxt(path, ndmin=2)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def _write_image_pair(stem: Path, image: np.ndarray):
    write_pfm(stem.with_suffix(".pfm"), image)
    write_png(stem.with_suffix(".png"), image)


def _load_frames(manifest_path: Path, key: str, cameras: dict, need_mask: bool = True) -> list[TrainingFrame]:
    data = _read_json(manifest_path)
    base = manifest_path.parent
    frames = []
    for i, rec in enumerate(data.get(key, [])):
        cam_id = str(rec["camera"])
        if cam_id not in cameras:
            raise InputError(f"{manifest_path}: {key}[{i}] references unknown camera {cam_id!r}")
        cam = cameras[cam_id]
        image = read_image(_resolve(base, rec["image"]))
        if "mask" in rec and rec["mask"] is not None:
            mask = read_mask(_resolve(base, rec["mask"]))
        elif need_mask:
            raise InputError(f"{manifest_path}: {key}[{i}] has no mask")
        else:
            mask = np.ones(image.shape[:2], dtype=bool)
        normals = None
        if rec.get("normals"):
            normals = read_pfm(_resolve(base, rec["normals"]))
        if image.shape[:2] != (cam.height, cam.width) or mask.shape != image.shape[:2]:
            raise InputError(f"{manifest_path}: {key}[{i}] image/mask size does not match camera {cam_id}")
        frames.append(TrainingFrame(image, mask, cam, normals))
    return frames


def _training_inputs(manifest_path: Path):
    data = _read_json(manifest_path)
    base = manifest_path.parent
    if "cameras" not in data or "frames" not in data:
        raise InputError(f"{manifest_path}: training manifest needs 'cameras' and 'frames'")
    cameras, _ = load_cameras_and_tracks(_resolve(base, data["cameras"]))
    return data, base, cameras


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_reconstruct(args, cfg: PipelineConfig, out: Path) -> int:
    manifest = Path(args.manifest)
    data, base, cameras = _training_inputs(manifest)
    frames = _load_frames(manifest, "frames", cameras)
    if not frames:
        raise InputError(f"{manifest}: no training frames")
    held = _load_frames(manifest, "held_out", cameras, need_mask=False)
    rc = cfg.reconstruct
    if data.get("init_splats"):
        init = load_splats(_resolve(base, data["init_splats"]))
    elif data.get("points"):
        init = init_from_points(_read_points(_resolve(base, data["points"])), cfg.seed)
    else:
        raise InputError(f"{manifest}: needs 'init_splats' or 'points' for initialization")
    if data.get("environment"):
        env = EnvironmentMap(read_pfm(_resolve(base, data["environment"])))
    else:
        h = rc.env_height
        env = EnvironmentMap(np.full((h, 2 * h, 3), 0.5))
    pool = [EnvironmentMap(read_pfm(_resolve(base, p))) for p in data.get("env_pool", [])]

    dtype = torch.float32 if rc.precision == "float32" else torch.float64
    history: list = []
    splats, env_fit = optimize(frames, init, env, rc.train_config(cfg.seed), env_pool=pool or None,
                               history=history, dtype=dtype)
    save_splats(out / "splats.rspl", splats)
    write_pfm(out / "env.pfm", env_fit.pixels)
    write_png(out / "env.png", env_fit.pixels)
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "kind", "loss"])
        for it, kind, loss in history:
            w.writerow([it, kind, repr(float(loss))])

    summary = {"splats": len(splats), "iterations": rc.iters_total}
    if held:
        pre = prefilter(env_fit, rc.n_mips, rc.lut_res)
        values = []
        for i, fr in enumerate(held):
            img = render(splats, fr.camera, pre, rc.background, tile=rc.tile).rgb
            _write_image_pair(out / f"heldout_{i:03d}", img)
            values.append(psnr(img, fr.image))
        summary["heldout_psnr"] = float(np.mean(values))
        summary["heldout_psnr_min"] = float(np.min(values))
        print(f"held-out PSNR: {summary['heldout_psnr']:.2f} dB (min {summary['heldout_psnr_min']:.2f} dB)")
    (out / "reconstruct.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'splats.rspl'} ({len(splats)} splats)")
    return 0


def cmd_postprocess(args, cfg: PipelineConfig, out: Path) -> int:
    splats = load_splats(_resolve(Path.cwd(), args.splats))
    pc = cfg.postprocess
    if args.manifest:
        manifest = Path(args.manifest)
        _, _, cameras = _training_inputs(manifest)
        frames = _load_frames(manifest, "frames", cameras)
        before = len(splats)
        splats = asset_mod.remove_stray_splats(splats, [f.camera for f in frames],
                                               [f.mask > 0.5 for f in frames], pc.keep_fraction)
        print(f"stray-splat removal kept {len(splats)} of {before}")
    metadata = _read_json(args.metadata) if args.metadata else {}
    car = asset_mod.canonicalize(splats, pc.front_hint or None, metadata)
    asset_mod.save_asset(out / "asset.rasset", car)
    (out / "asset.json").write_text(json.dumps({
        "splats": len(car.splats),
        "canonical_box": {"center": car.canonical_box.center.tolist(),
                          "half_extents": car.canonical_box.half_extents.tolist()},
        "wheel_line_z": car.wheel_line_z,
        "to_canonical": car.to_canonical.to_dict(),
        "metadata": car.metadata,
    }, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'asset.rasset'}")
    return 0


def cmd_bank_build(args, cfg: PipelineConfig, out: Path) -> int:
    records = _read_jsonl(args.entries)
    matrix = read_matrix(args.matrix) if args.matrix else None
    entries = []
    seen = set()
    for n, rec in enumerate(records, 1):
        if "embedding" in rec:
            emb = np.asarray(rec["embedding"], dtype=np.float32)
        elif matrix is not None and "embedding_row" in rec:
            emb = matrix[int(rec["embedding_row"])]
        else:
            raise InputError(f"{args.entries}:{n}: entry has no embedding")
        if cfg.bank.normalize:
            norm = np.linalg.norm(emb)
            emb = emb / norm if norm > 0 else emb
        iid = str(rec["instance_id"])
        if iid in seen:
            raise InputError(f"{args.entries}:{n}: duplicate instance_id {iid!r}")
        seen.add(iid)
        entries.append(BankEntry(iid, emb, str(rec["color"]), rec.get("brand", ""), rec.get("model", ""),
                                 rec.get("car_type", ""), rec.get("asset_path", "")))
    entries.sort(key=lambda e: e.instance_id)
    bank = build_bank(entries)
    save_bank(bank, out / "bank.jsonl", out / "bank.f32")
    (out / "bank_stats.json").write_text(json.dumps(
        {"entries": len(bank), "dim": bank.dim, "partitions": bank.partition_sizes()},
        indent=2, sort_keys=True) + "\n")
    print(f"bank with {len(bank)} entries in {len(bank.partitions)} color partitions")
    return 0


def cmd_retrieve(args, cfg: PipelineConfig, out: Path) -> int:
    bank_dir = Path(args.bank)
    bank = load_bank(_resolve(bank_dir, "bank.jsonl"), _resolve(bank_dir, "bank.f32"))
    k = args.k or cfg.retrieve.k
    rows = []
    for n, rec in enumerate(_read_jsonl(args.queries), 1):
        q = Query(np.asarray(rec["embedding"], dtype=np.float32), str(rec.get("color", "")))
        if len(q.embedding) != bank.dim:
            raise InputError(f"{args.queries}:{n}: query dimension {len(q.embedding)} != bank dimension {bank.dim}")
        qid = rec.get("query_id", n - 1)
        for rank, (iid, dist) in enumerate(retrieve(bank, q, k), 1):
            rows.append({"query_id": qid, "rank": rank, "instance_id": iid, "distance": dist})
    with open(out / "retrieval.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    print(f"wrote {len(rows)} results to {out / 'retrieval.jsonl'}")
    return 0


def cmd_insert(args, cfg: PipelineConfig, out: Path) -> int:
    spec_path = Path(args.spec)
    spec = _read_json(spec_path)
    base = spec_path.parent
    ic = cfg.insert
    background = _resolve(base, spec["background"])
    tracks_path = _resolve(base, spec["tracks"])
    env_path = _resolve(base, spec["environment"]) if spec.get("environment") else None
    cameras, tracks = load_cameras_and_tracks(tracks_path)

    placed, records = [], []
    for rec in spec.get("assets", []):
        tid = int(rec["track_id"])
        if tid not in tracks:
            raise InputError(f"{spec_path}: unknown track {tid}")
        asset_path = _resolve(base, rec["path"])
        car = asset_mod.load_asset(asset_path)
        lidar = {int(t): PointCloud(_read_points(_resolve(base, p)))
                 for t, p in rec.get("lidar", {}).items()}
        pa = place_asset(car, tracks[tid], None, ic.shadow_opacity, ic.shadow_margin)
        for t, cloud in lidar.items():
            if t in pa.placements:
                pa.placements[t] = icp_refine(PointCloud(car.splats.mu), cloud, pa.placements[t],
                                              ic.icp_max_iters, ic.icp_tol, ic.icp_trim)
        placed.append(pa)
        records.append({"path": str(asset_path.resolve()), "track_id": tid,
                        "placements": {str(t): tf.to_dict() for t, tf in sorted(pa.placements.items())}})

    env = EnvironmentMap(read_pfm(env_path)) if env_path else None
    scale = 1.0
    ref = spec.get("reference")
    if ref:
        if env is None:
            raise InputError("environment-scale fitting needs an environment map")
        cam_id = str(ref["camera"])
        if cam_id not in cameras:
            raise InputError(f"{spec_path}: reference camera {cam_id!r} not found")
        scene = SceneGraph(load_splats(background), placed, env, 1.0, cameras)
        rendered = compose(scene, int(ref.get("frame", 0)), cameras[cam_id], cfg.render.background,
                           cfg.render.tile).rgb
        reference = read_image(_resolve(base, ref["image"]))
        mask = read_mask(_resolve(base, ref["mask"])) if ref.get("mask") else None
        scale = fit_env_scale(rendered, reference, mask)
        print(f"fitted environment scale s = {scale:.6g}")
    save_scene_manifest(out / "scene.json", background.resolve(), records, tracks_path.resolve(),
                        env_path.resolve() if env_path else None, scale)
    print(f"wrote {out / 'scene.json'}")
    return 0


def cmd_render(args, cfg: PipelineConfig, out: Path) -> int:
    scene_path = Path(args.scene)
    if not scene_path.exists():
        raise InputError(f"missing file: {scene_path}")
    ic = cfg.insert
    scene = load_scene_manifest(scene_path, ic.shadow_opacity, ic.shadow_margin)
    if args.frames:
        frames = [int(x) for x in args.frames.split(",")]
    else:
        stamps = sorted({t for pa in scene.assets for t in pa.placements})
        frames = stamps or [0]
    cam_ids = args.cameras.split(",") if args.cameras else sorted(scene.cameras)
    for cid in cam_ids:
        if cid not in scene.cameras:
            raise InputError(f"unknown camera {cid!r}")
    for t in frames:
        for cid in cam_ids:
            try:
                fb = compose(scene, t, scene.cameras[cid], cfg.render.background, cfg.render.tile)
            except MissingTrackFrameError as exc:
                raise InputError(str(exc.args[0])) from None
            except RuntimeError as exc:
                raise RenderError(f"frame {t}, camera {cid}: {exc}") from None
            # PFM stores float32, so values past its range count as non-finite too
            if not np.all(np.isfinite(fb.rgb)) or np.abs(fb.rgb).max() > np.finfo(np.float32).max:
                raise RenderError(f"non-finite pixels in frame {t}, camera {cid}")
            _write_image_pair(out / f"frame_{t:04d}_{cid}", fb.rgb)
    print(f"rendered {len(frames) * len(cam_ids)} images to {out}")
    return 0


def _color_pixels(paths, limit: int, seed: int) -> np.ndarray:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in (".pfm", ".png"))
        elif p.exists():
            files.append(p)
        else:
            raise InputError(f"missing file: {p}")
    if not files:
        raise InputError("no images given for the color comparison")
    px = np.concatenate([read_image(f).reshape(-1, 3) for f in files])
    if len(px) > limit:
        px = px[np.sort(np.random.default_rng(seed).choice(len(px), limit, replace=False))]
    return np.clip(px, 0.0, 1.0)


def cmd_evaluate(args, cfg: PipelineConfig, out: Path) -> int:
    ec = cfg.evaluate
    values: dict = {}
    if args.gt_tracks or args.pred_tracks:
        if not (args.gt_tracks and args.pred_tracks):
            raise InputError("tracking metrics need both --gt-tracks and --pred-tracks")
        gt = DetectionSet.from_jsonl(_resolve(Path.cwd(), args.gt_tracks))
        pred = DetectionSet.from_jsonl(_resolve(Path.cwd(), args.pred_tracks))
        res = match_frames(gt, pred, ec.iou_thresh)
        values.update(MOTA=mota(res), MOTP=motp(res), IDF1=idf1(gt, pred, ec.iou_thresh))
    if args.gt_masks or args.pred_masks:
        if not (args.gt_masks and args.pred_masks):
            raise InputError("mask IoU needs both --gt-masks and --pred-masks")
        gm = DetectionSet.from_mask_dir(_resolve(Path.cwd(), args.gt_masks))
        pm = DetectionSet.from_mask_dir(_resolve(Path.cwd(), args.pred_masks))
        values["IoU"] = mean_instance_iou(match_frames(gm, pm, ec.iou_thresh), gm, pm)
    if args.color_a or args.color_b:
        if not (args.color_a and args.color_b):
            raise InputError("color distances need both --color-a and --color-b")
        a = _color_pixels(args.color_a, ec.max_color_samples, cfg.seed)
        b = _color_pixels(args.color_b, ec.max_color_samples, cfg.seed + 1)
        values.update(color_distances(a, b, ec.n_proj, cfg.seed))
    if args.features_a or args.features_b:
        if not (args.features_a and args.features_b):
            raise InputError("FID/KID need both --features-a and --features-b")
        fa, fb = read_matrix(args.features_a), read_matrix(args.features_b)
        values["FID"] = fid(FeatureStats.from_features(fa), FeatureStats.from_features(fb))
        values["KIDx1e3"] = 1e3 * kid(fa, fb)
    rep = report(values)
    (out / "report.json").write_text(json.dumps(rep, indent=2) + "\n")
    for k, v in rep.items():
        if v is not None:
            print(f"{k:8s} {v:.6g}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _config_epilog() -> str:
    body = "\n".join(describe(s) for s in SECTIONS)
    return "config keys and defaults (TOML; top-level 'seed = 0'):\n" + body


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="carsplat", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog=_config_epilog())
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn, stage=name)
        return p

    p = add("reconstruct", cmd_reconstruct, "optimize splats and the environment against posed frames")
    p.add_argument("manifest", help="training manifest JSON")

    p = add("postprocess", cmd_postprocess, "remove stray splats and canonicalize into a car asset")
    p.add_argument("splats", help="reconstructed RSPL file")
    p.add_argument("--manifest", help="training manifest whose cameras and masks drive stray removal")
    p.add_argument("--metadata", help="JSON with color/brand/model/type labels")

    p = add("bank-build", cmd_bank_build, "build a color-partitioned memory bank")
    p.add_argument("entries", help="JSONL entries with inline 'embedding' or 'embedding_row'")
    p.add_argument("--matrix", help="raw f32 embedding matrix for 'embedding_row' entries")

    p = add("retrieve", cmd_retrieve, "nearest bank entries for each query")
    p.add_argument("bank", help="directory written by bank-build")
    p.add_argument("queries", help="JSONL queries {query_id, embedding, color}")
    p.add_argument("--k", type=int, help="results per query (default from config)")

    p = add("insert", cmd_insert, "place assets along tracks and fit the environment scale")
    p.add_argument("spec", help="insertion spec JSON")

    p = add("render", cmd_render, "render frames of a composed scene")
    p.add_argument("scene", help="scene manifest written by insert")
    p.add_argument("--frames", help="comma-separated frame indices (default: all track frames)")
    p.add_argument("--cameras", help="comma-separated camera ids (default: all)")

    p = add("evaluate", cmd_evaluate, "compute the metric report")
    p.add_argument("--gt-tracks", help="ground-truth detections JSONL {frame, id, bbox}")
    p.add_argument("--pred-tracks", help="predicted detections JSONL")
    p.add_argument("--gt-masks", help="directory of <frame>_<id>.png ground-truth masks")
    p.add_argument("--pred-masks", help="directory of predicted masks")
    p.add_argument("--color-a", nargs="+", help="images (or directories) of the first color set")
    p.add_argument("--color-b", nargs="+", help="images (or directories) of the second color set")
    p.add_argument("--features-a", help="raw f32 feature matrix of the first set")
    p.add_argument("--features-b", help="raw f32 feature matrix of the second set")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        torch.set_num_threads(args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.snapshot(out, args.stage)
        return args.func(args, cfg, out)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RENDER
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (ConfigError, InputError, EmptyBankError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
