"""Placing car assets into a background scene and rendering the composite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .asset import CarAsset, load_asset
from .geom import Camera, OrientedBox3, PointCloud, RigidSim3, load_cameras_and_tracks, quat_conj, quat_mul
from .imageio import read_pfm
from .raster import FrameBuffers, SplatSet, load_splats, render
from .shading import EnvironmentMap, PrefilteredEnv, prefilter

log = logging.getLogger(__name__)

ICP_TRIM = 0.2
ICP_MAX_ITERS = 50
ICP_TOL = 1e-6
SHADOW_OPACITY = 0.6
SHADOW_MARGIN = 0.1


class MissingTrackFrameError(KeyError):
    pass


@dataclass
class IcpResult:
    transform: RigidSim3
    rms: float
    iterations: int
    converged: bool


def align_box(asset: CarAsset, target: OrientedBox3) -> RigidSim3:
    """Similarity taking the asset's canonical box onto ``target``.

    Scale is the geometric mean of the three extent ratios.
    """
    src = asset.canonical_box
    if np.any(src.half_extents <= 0) or np.any(target.half_extents <= 0):
        raise ValueError("degenerate box: zero extent")
    scale = float(np.exp(np.mean(np.log(target.half_extents / src.half_extents))))
    rot = quat_mul(target.rotation, quat_conj(src.rotation))
    tf = RigidSim3(rot, np.zeros(3), scale)
    return RigidSim3(rot, target.center - tf.apply(src.center), scale)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> RigidSim3:
    """Least-squares similarity ``dst ~ s R src + t`` (closed form)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[2, 2] = -1
    rot = u @ fix @ vt
    var_s = (xs**2).sum() / len(src)
    scale = float(np.trace(np.diag(d) @ fix) / var_s) if with_scale and var_s > 0 else 1.0
    return RigidSim3.from_matrix(rot, mu_d - scale * rot @ mu_s, scale)


def _trimmed(dist: np.ndarray, trim: float) -> np.ndarray:
    keep = max(1, int(np.ceil((1.0 - trim) * len(dist))))
    return np.argsort(dist, kind="stable")[:keep]


def icp_refine(asset_points: PointCloud, lidar: PointCloud, init: RigidSim3,
               max_iters: int = ICP_MAX_ITERS, tol: float = ICP_TOL, trim: float = ICP_TRIM,
               return_info: bool = False):
    """Trimmed point-to-point ICP with a similarity solve per iteration.

    With fewer than three asset points only the translation is updated. An
    update is accepted only when it lowers the trimmed RMS, so the returned
    transform is the best iterate even when the loop does not converge.
    """
    src = np.asarray(getattr(asset_points, "points", asset_points), dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(getattr(lidar, "points", lidar), dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("ICP needs two nonempty point clouds")
    tree = cKDTree(dst)

    def residual(tf):
        dist, idx = tree.query(tf.apply(src))
        sel = _trimmed(dist, trim)
        return float(np.sqrt(np.mean(dist[sel] ** 2))), sel, idx

    best = init
    best_rms, sel, idx = residual(best)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        a, b = src[sel], dst[idx[sel]]
        if len(src) < 3:
            shift = (b - best.apply(a)).mean(0)
            cand = RigidSim3(best.rotation, best.translation + shift, best.scale)
        else:
            cand = umeyama(a, b)
        rms, cand_sel, cand_idx = residual(cand)
        if rms > best_rms:
            converged = True
            break
        change = best_rms - rms
        best, best_rms, sel, idx = cand, rms, cand_sel, cand_idx
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("ICP stopped after %d iterations without converging (rms %.4g)", max_iters, best_rms)
    if return_info:
        return IcpResult(best, best_rms, it, converged)
    return best


def fit_env_scale(rendered: np.ndarray, reference: np.ndarray, mask=None) -> float:
    """Scalar ``s`` minimizing ``sum mask * |s * rendered - reference|^2`` in linear RGB."""
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ValueError("rendered and reference images differ in shape")
    w = np.ones(rendered.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != rendered.shape[:2]:
        raise ValueError("mask shape does not match the images")
    w = w.reshape(w.shape + (1,) * (rendered.ndim - 2))
    energy = float(np.sum(w * rendered * rendered))
    if not energy > 0:
        raise ValueError("rendered image has zero energy under the mask")
    return float(np.sum(w * rendered * reference)) / energy


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def make_shadow(asset: CarAsset, placement: RigidSim3 = RigidSim3(), opacity: float = SHADOW_OPACITY,
                margin: float = SHADOW_MARGIN) -> SplatSet:
    """Black horizontal splats filling an ellipse under the asset's footprint.

    The ellipse circumscribes the canonical box's footprint grown by
    ``margin`` (world meters) and sits at ``wheel_line_z``.
    """
    if opacity <= 0.0:
        return SplatSet.empty()
    if opacity >= 1.0:
        raise ValueError("shadow opacity must be below 1")
    box = asset.canonical_box
    grow = margin / placement.scale
    # an ellipse through the footprint corners has semi-axes sqrt(2) times the half extents
    a = np.sqrt(2.0) * (box.half_extents[0] + grow)
    b = np.sqrt(2.0) * (box.half_extents[1] + grow)
    step = min(a, b) / 3.0
    xs = np.arange(-a + step / 2, a, step)
    ys = np.arange(-b + step / 2, b, step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    inside = (gx / a) ** 2 + (gy / b) ** 2 <= 1.0
    pts = np.stack([gx[inside], gy[inside]], axis=1)
    n = len(pts)
    mu = np.column_stack([pts + box.center[:2], np.full(n, asset.wheel_line_z)])
    local = SplatSet(mu, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.full((n, 2), 0.6 * step),
                     np.full(n, _logit(opacity)), np.zeros((n, 3)), np.ones(n), np.zeros(n))
    return local.transformed(placement)


@dataclass
class PlacedAsset:
    asset: CarAsset
    placements: dict[int, RigidSim3]      # timestamp -> canonical-to-world transform
    shadow: SplatSet | None = None        # canonical frame

    def at(self, frame_index: int) -> RigidSim3:
        if frame_index not in self.placements:
            raise MissingTrackFrameError(f"no placement for frame {frame_index}")
        return self.placements[frame_index]


@dataclass
class SceneGraph:
    background: SplatSet
    assets: list[PlacedAsset] = field(default_factory=list)
    env: EnvironmentMap | None = None
    env_scale: float = 1.0
    cameras: dict[str, Camera] = field(default_factory=dict)
    _pre: PrefilteredEnv | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.env_scale > 0:
            raise ValueError("environment scale must be positive")

    def prefiltered(self) -> PrefilteredEnv | None:
        if self._pre is None and self.env is not None:
            self._pre = prefilter(self.env)
        return self._pre

    def splats_at(self, frame_index: int) -> SplatSet:
        parts = [self.background]
        for pa in self.assets:
            tf = pa.at(frame_index)
            parts.append(pa.asset.splats.transformed(tf))
            if pa.shadow is not None and len(pa.shadow):
                parts.append(pa.shadow.transformed(tf))
        return SplatSet.concat(parts)


def place_asset(asset: CarAsset, track: list[OrientedBox3], lidar: dict[int, PointCloud] | None = None,
                shadow_opacity: float = SHADOW_OPACITY, shadow_margin: float = SHADOW_MARGIN,
                icp_kwargs: dict | None = None) -> PlacedAsset:
    """Per-timestamp placements from a box track, refined by ICP where LiDAR is given."""
    placements = {}
    for box in track:
        tf = align_box(asset, box)
        if lidar and box.timestamp in lidar and len(lidar[box.timestamp]):
            tf = icp_refine(PointCloud(asset.splats.mu), lidar[box.timestamp], tf, **(icp_kwargs or {}))
        placements[box.timestamp] = tf
    scale = float(np.mean([p.scale for p in placements.values()])) if placements else 1.0
    shadow = make_shadow(asset, RigidSim3(scale=scale), shadow_opacity, shadow_margin)
    # stored in the canonical frame, so undo the scale applied for the margin computation
    shadow = shadow.transformed(RigidSim3(scale=1.0 / scale))
    return PlacedAsset(asset, placements, shadow)


def compose(scene: SceneGraph, frame_index: int, camera: Camera, background: str = "black",
            tile: int = 32) -> FrameBuffers:
    """Render the background, every placed asset and its shadow in one pass."""
    return render(scene.splats_at(frame_index), camera, scene.prefiltered(), background,
                  scene.env_scale, tile)


# --- manifest -----------------------------------------------------------------

def save_scene_manifest(path, background_path, assets: list[dict], tracks_path, env_path,
                        env_scale: float):
    """``assets`` holds ``{"path", "track_id"}`` records, optionally with ``placements``
    (timestamp -> transform dict) that override the box-aligned defaults."""
    Path(path).write_text(json.dumps({
        "background": str(background_path),
        "assets": assets,
        "tracks": str(tracks_path),
        "environment": str(env_path) if env_path else None,
        "env_scale": float(env_scale),
    }, indent=2, sort_keys=True) + "\n")


def load_scene_manifest(path, shadow_opacity: float = SHADOW_OPACITY,
                        shadow_margin: float = SHADOW_MARGIN) -> SceneGraph:
    path = Path(path)
    data = json.loads(path.read_text())
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    cameras, tracks = load_cameras_and_tracks(resolve(data["tracks"]))
    placed = []
    for rec in data.get("assets", []):
        tid = int(rec["track_id"])
        if tid not in tracks:
            raise MissingTrackFrameError(f"asset {rec['path']} references unknown track {tid}")
        asset = load_asset(resolve(rec["path"]))
        pa = place_asset(asset, tracks[tid], None, shadow_opacity, shadow_margin)
        for t, tf in rec.get("placements", {}).items():
            pa.placements[int(t)] = RigidSim3.from_dict(tf)
        placed.append(pa)
    env = None
    if data.get("environment"):
        env = EnvironmentMap(read_pfm(resolve(data["environment"])))
    return SceneGraph(load_splats(resolve(data["background"])), placed, env,
                      float(data.get("env_scale", 1.0)), cameras)
