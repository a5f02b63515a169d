"""Procedural scenes with known ground truth, used for closed-loop checks and demos."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geom import Camera, matrix_to_quat
from .raster import SplatSet
from .shading import EnvironmentMap

# (center, half extents, albedo, roughness, metallic) of a car-like body and cabin
_BODY = (np.array([0.0, 0.0, 0.7]), np.array([2.2, 0.9, 0.4]), (0.70, 0.08, 0.06), 0.35, 0.6)
_CABIN = (np.array([-0.3, 0.0, 1.375]), np.array([1.2, 0.8, 0.275]), (0.05, 0.06, 0.09), 0.2, 0.0)


def _face_frames(half):
    """(axis, sign, tangent-u axis, tangent-v axis) for the six faces of a box."""
    out = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for sign in (1.0, -1.0):
            out.append((axis, sign, u, v, 4 * half[u] * half[v]))
    return out


def car_splats(n: int = 200, seed: int = 0, albedo_jitter: float = 0.08,
               body_albedo=None, cabin_albedo=None) -> SplatSet:
    """``n`` splats tiling the surface of a two-box car silhouette (bottom faces omitted).

    The default paint is a dark red body with a near-black cabin; pass
    ``body_albedo`` / ``cabin_albedo`` to recolor.
    """
    rng = np.random.default_rng(seed)
    body, cabin = list(_BODY), list(_CABIN)
    if body_albedo is not None:
        body[2] = tuple(body_albedo)
    if cabin_albedo is not None:
        cabin[2] = tuple(cabin_albedo)
    faces = []
    for center, half, albedo, rough, metal in (body, cabin):
        for axis, sign, u, v, area in _face_frames(half):
            if axis == 2 and sign < 0:
                continue
            faces.append((center, half, axis, sign, u, v, area, albedo, rough, metal))
    areas = np.array([f[6] for f in faces])
    counts = np.floor(areas / areas.sum() * n).astype(int)
    counts[np.argsort(-(areas / areas.sum() * n - counts))[: n - counts.sum()]] += 1

    mu, quat, scale, albedo, rough, metal = [], [], [], [], [], []
    for (center, half, axis, sign, u, v, area, alb, r, m), k in zip(faces, counts):
        if k == 0:
            continue
        # jittered grid over the face so coverage has no large holes
        ratio = half[u] / half[v]
        nu = max(1, int(round(np.sqrt(k * ratio))))
        nv = int(np.ceil(k / nu))
        cells = [(i, j) for i in range(nu) for j in range(nv)]
        pick = rng.permutation(len(cells))[:k]
        cell_u, cell_v = 2 * half[u] / nu, 2 * half[v] / nv
        for c in pick:
            i, j = cells[c]
            p = center.copy()
            p[axis] += sign * half[axis]
            p[u] += -half[u] + (i + rng.uniform(0.3, 0.7)) * cell_u
            p[v] += -half[v] + (j + rng.uniform(0.3, 0.7)) * cell_v
            axes = np.zeros((3, 3))
            axes[u, 0] = 1.0
            axes[axis, 2] = sign
            axes[:, 1] = np.cross(axes[:, 2], axes[:, 0])
            mu.append(p)
            quat.append(matrix_to_quat(axes))
            scale.append([cell_u * rng.uniform(0.55, 0.7), cell_v * rng.uniform(0.55, 0.7)])
            albedo.append(np.clip(np.array(alb) + rng.normal(0, albedo_jitter, 3), 0.02, 0.98))
            rough.append(np.clip(r + rng.normal(0, 0.05), 0.05, 0.95))
            metal.append(np.clip(m + rng.normal(0, 0.05), 0.0, 1.0))
    opacity = rng.uniform(2.0, 4.0, len(mu))
    return SplatSet(np.array(mu), np.array(quat), np.array(scale), opacity,
                    np.array(albedo), np.array(rough), np.array(metal))


def ring_cameras(count: int, radius: float = 7.0, size: int = 48, target=(0.0, 0.0, 0.8),
                 elevations=(12.0, 30.0), fov: float = 50.0, phase: float = 0.0) -> list[Camera]:
    """Cameras on a ring around ``target`` alternating between two elevations."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(count):
        az = 2 * np.pi * (i + phase) / count
        el = np.radians(elevations[i % len(elevations)])
        eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, target, size, size, fov, id=f"ring{i:03d}"))
    return cams


def sky_environment(height: int = 16, sun_dir=(0.4, 0.3, 0.85), sun=(3.0, 2.8, 2.4),
                    sky=(0.55, 0.65, 0.85), ground=(0.25, 0.22, 0.2), sharpness: float = 8.0) -> EnvironmentMap:
    sun_dir = np.asarray(sun_dir, dtype=np.float64)
    sun_dir = sun_dir / np.linalg.norm(sun_dir)

    def fn(d):
        t = 0.5 * (d[..., 2:3] + 1.0)
        lobe = np.exp(sharpness * (d @ sun_dir - 1.0))[..., None]
        return t * np.asarray(sky) + (1 - t) * np.asarray(ground) + lobe * np.asarray(sun)

    return EnvironmentMap.from_function(fn, height)


def perturb(splats: SplatSet, seed: int, position: float = 0.03, albedo: float = 0.05,
            log_scale: float = 0.1, opacity: float = 0.3, material: float = 0.05,
            rotation: float = 0.05) -> SplatSet:
    rng = np.random.default_rng(seed)
    n = len(splats)
    q = splats.quat + rng.normal(0, rotation / 2, (n, 4)) * [0, 1, 1, 1]
    return SplatSet(
        splats.mu + rng.normal(0, position, (n, 3)),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        splats.scale * np.exp(rng.normal(0, log_scale, (n, 2))),
        splats.opacity_logit + rng.normal(0, opacity, n),
        np.clip(splats.albedo + rng.normal(0, albedo, (n, 3)), 0.01, 0.99),
        np.clip(splats.roughness + rng.normal(0, material, n), 0.02, 0.98),
        np.clip(splats.metallic + rng.normal(0, material, n), 0.0, 1.0),
    )


def write_training_set(root, splats: SplatSet, env: EnvironmentMap, cameras: list[Camera],
                       held_out: list[Camera] = (), init: SplatSet | None = None,
                       env_init: EnvironmentMap | None = None, mask_threshold: float = 1e-3) -> Path:
    """Render ``splats`` into a training manifest directory usable by ``carsplat reconstruct``.

    Masks mark pixels whose accumulated opacity exceeds ``mask_threshold``.
    Returns the manifest path.
    """
    from .geom import dump_cameras_and_tracks
    from .imageio import write_mask, write_pfm
    from .raster import render, save_splats
    from .shading import prefilter

    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    pre = prefilter(env)
    all_cams = list(cameras) + list(held_out)
    (root / "cameras.json").write_text(json.dumps(dump_cameras_and_tracks(all_cams, {}), indent=1))
    manifest = {"cameras": "cameras.json", "frames": [], "held_out": []}
    for key, cams in (("frames", cameras), ("held_out", held_out)):
        for cam in cams:
            fb = render(splats, cam, pre)
            img = f"frames/{cam.id}.pfm"
            write_pfm(root / img, fb.rgb)
            rec = {"image": img, "camera": cam.id}
            if key == "frames":
                rec["mask"] = f"frames/{cam.id}_mask.png"
                write_mask(root / rec["mask"], fb.acc_opacity > mask_threshold)
            manifest[key].append(rec)
    if init is not None:
        save_splats(root / "init.rspl", init)
        manifest["init_splats"] = "init.rspl"
    if env_init is not None:
        write_pfm(root / "env_init.pfm", env_init.pixels)
        manifest["environment"] = "env_init.pfm"
    path = root / "train.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path
