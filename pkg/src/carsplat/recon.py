"""Splat reconstruction from posed frames with multi-illumination augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .geom import Camera
from .losses import loss_normal, loss_opacity, loss_rgb
from .raster import (FrameBuffers, SplatSet, SplatTensors, quat_to_matrix_torch, render,
                     render_tensors)
from .shading import EnvironmentMap, PrefilterOperator, _block_average, prefilter

log = logging.getLogger(__name__)


SYNTH_MASK_THRESHOLD = 1.0 / 255.0


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainingFrame:
    image: np.ndarray
    mask: np.ndarray
    camera: Camera
    normals: np.ndarray | None = None
    env_override: EnvironmentMap | None = None
    is_synthetic: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError("mask and image dimensions differ")
        if self.image.shape[:2] != (self.camera.height, self.camera.width):
            raise ValueError("image does not match the camera resolution")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.image.shape:
                raise ValueError("normal map and image dimensions differ")
            norms = np.linalg.norm(self.normals, axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-3):
                raise ValueError("provided normals must be unit length")


@dataclass
class TrainConfig:
    lambda_opacity: float = 1.0
    lambda_normal: float = 0.05
    iters_total: int = 30000
    synth_start: int = 10000
    synth_refresh: int = 2500
    synth_extra: int = 20000
    synth_pool: int = 8
    lr_position: float = 1e-3
    lr_rotation: float = 2e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 2e-2
    lr_albedo: float = 1e-2
    lr_roughness: float = 1e-2
    lr_metallic: float = 1e-2
    lr_env: float = 1e-2
    densify_grad_thresh: float = 2e-4
    densify_every: int = 500
    densify_until: int = 15000
    split_scale: float = 0.3
    prune_alpha: float = 0.005
    ssim_window: int = 11
    env_height: int = 16
    n_mips: int = 6
    lut_res: int = 64
    mask_target: bool = True
    background: str = "black"
    tile: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lambda_opacity < 0 or self.lambda_normal < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ssim_window % 2 != 1:
            raise ValueError("ssim_window must be odd")
        # a schedule that starts after the run ends is inert and allowed
        if self.synth_start < self.iters_total and self.synth_start + self.synth_extra > self.iters_total:
            raise ValueError("synth_start + synth_extra must not exceed iters_total")


def frame_kind(it: int, cfg: TrainConfig) -> str:
    """``"synthetic"`` on every other step inside the augmentation window, else ``"real"``."""
    k = it - cfg.synth_start
    if 0 <= k < cfg.synth_extra and it < cfg.iters_total and k % 2 == 1:
        return "synthetic"
    return "real"


def objective(frame: TrainingFrame, out: dict, cfg: TrainConfig) -> torch.Tensor:
    dtype = out["rgb"].dtype
    mask = torch.as_tensor(frame.mask, dtype=dtype)
    target = torch.as_tensor(frame.image, dtype=dtype)
    if cfg.mask_target and not frame.is_synthetic:
        target = target * mask[..., None]
    loss = loss_rgb(out["rgb"], target, cfg.ssim_window)
    loss = loss + cfg.lambda_opacity * loss_opacity(out["acc_opacity"], mask)
    if not frame.is_synthetic and frame.normals is not None:
        loss = loss + cfg.lambda_normal * loss_normal(out["normal"], frame.normals, mask)
    return loss


def total_objective(frame: TrainingFrame, buffers: FrameBuffers, cfg: TrainConfig):
    """Objective value and its gradient with respect to each frame buffer."""
    leaves = {
        k: torch.tensor(getattr(buffers, k), dtype=torch.float64, requires_grad=True)
        for k in ("rgb", "acc_opacity", "normal")
    }
    loss = objective(frame, leaves, cfg)
    loss.backward()
    # buffers the loss does not read (normals without a target) get zero cotangents
    return loss.item(), {k: np.zeros(v.shape) if v.grad is None else v.grad.numpy().copy()
                         for k, v in leaves.items()}


def make_synthetic_frame(splats: SplatSet, camera: Camera, env: EnvironmentMap, seed: int,
                         cfg: TrainConfig | None = None, refine=None,
                         pre_env=None) -> TrainingFrame:
    """Relit render of the current model used as an extra supervision frame.

    ``refine(image, camera, env, seed)`` may substitute an externally enhanced
    image. The frame's mask is the render's accumulated opacity, binarized at
    ``SYNTH_MASK_THRESHOLD``; a soft mask would make the opacity term penalize
    every semi-transparent pixel of the model's own silhouette.
    """
    cfg = cfg or TrainConfig()
    pre = pre_env if pre_env is not None else prefilter(env, cfg.n_mips, cfg.lut_res)
    fb = render(splats, camera, pre, "black", tile=cfg.tile)
    image = fb.rgb if refine is None else np.asarray(refine(fb.rgb, camera, env, seed), dtype=np.float64)
    mask = fb.acc_opacity > SYNTH_MASK_THRESHOLD
    return TrainingFrame(image, mask, camera, None, env, True)


def random_environment(rng: np.random.Generator, height: int = 16) -> EnvironmentMap:
    """Procedural outdoor-like lighting: tinted sky gradient plus a soft sun lobe."""
    sky = rng.uniform(0.2, 1.2) * rng.dirichlet(np.ones(3) * 6) * 3
    ground = rng.uniform(0.05, 0.5) * rng.dirichlet(np.ones(3) * 6) * 3
    sun_dir = rng.normal(size=3)
    sun_dir[2] = abs(sun_dir[2]) + 0.2
    sun_dir /= np.linalg.norm(sun_dir)
    sun = rng.uniform(0.0, 4.0) * rng.dirichlet(np.ones(3) * 10) * 3
    sharp = rng.uniform(4.0, 20.0)

    def fn(d):
        up = d[..., 2:3]
        t = 0.5 * (up + 1.0)
        lobe = np.exp(sharp * (d @ sun_dir - 1.0))[..., None]
        return t * sky + (1 - t) * ground + lobe * sun

    return EnvironmentMap.from_function(fn, height)


def sample_camera(frames: list[TrainingFrame], target: np.ndarray, rng: np.random.Generator) -> Camera:
    """Random view of ``target`` at a distance and elevation drawn from the real cameras."""
    ref = frames[rng.integers(len(frames))].camera
    offs = np.array([f.camera.center - target for f in frames])
    dist = np.linalg.norm(offs, axis=1)
    elev = np.arcsin(np.clip(offs[:, 2] / dist, -1, 1))
    r = rng.uniform(dist.min(), dist.max())
    e = rng.uniform(elev.min(), elev.max())
    az = rng.uniform(0, 2 * np.pi)
    eye = target + r * np.array([np.cos(e) * np.cos(az), np.cos(e) * np.sin(az), np.sin(e)])
    fov = np.degrees(2 * np.arctan(0.5 * ref.width / ref.fx))
    return Camera.look_at(eye, target, ref.width, ref.height, fov, id="synthetic")


def init_from_points(points, seed: int = 0, albedo=0.5, opacity: float = 0.5) -> SplatSet:
    """Splats at the given points with random orientations and neighbor-spacing scales."""
    from scipy.spatial import cKDTree

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    rng = np.random.default_rng(seed)
    n = len(pts)
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(pts).query(pts, k=k)
        spacing = np.maximum(dist[:, 1:].mean(axis=1), 1e-3)
    else:
        spacing = np.full(1, 0.1)
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return SplatSet(pts, quat, np.repeat(0.5 * spacing[:, None], 2, axis=1),
                    np.full(n, _logit(opacity)), np.broadcast_to(albedo, (n, 3)).copy(),
                    np.full(n, 0.5), np.zeros(n))


def _logit(x, eps=1e-4):
    x = np.clip(x, eps, 1 - eps)
    return np.log(x / (1 - x))


class _Params:
    """Unconstrained optimizer variables for a splat set."""

    names = ("mu", "quat", "log_scale", "opacity_logit", "albedo_logit", "rough_logit", "metal_logit")

    def __init__(self, splats: SplatSet, dtype):
        t = lambda a: torch.tensor(a, dtype=dtype, requires_grad=True)
        self.mu = t(splats.mu)
        self.quat = t(splats.quat)
        self.log_scale = t(np.log(splats.scale))
        self.opacity_logit = t(splats.opacity_logit)
        self.albedo_logit = t(_logit(splats.albedo))
        self.rough_logit = t(_logit(splats.roughness))
        self.metal_logit = t(_logit(splats.metallic))

    def variables(self) -> list[torch.Tensor]:
        return [getattr(self, n) for n in self.names]

    def tensors(self) -> SplatTensors:
        return SplatTensors(self.mu, self.quat, torch.exp(self.log_scale), self.opacity_logit,
                            torch.sigmoid(self.albedo_logit), torch.sigmoid(self.rough_logit),
                            torch.sigmoid(self.metal_logit))

    def export(self) -> SplatSet:
        with torch.no_grad():
            q = self.quat / self.quat.norm(dim=1, keepdim=True)
            return SplatSet(self.mu.numpy().copy(), q.numpy().copy(),
                            torch.exp(self.log_scale).numpy().copy(),
                            self.opacity_logit.numpy().copy(),
                            torch.sigmoid(self.albedo_logit).numpy().copy(),
                            torch.sigmoid(self.rough_logit).numpy().copy(),
                            torch.sigmoid(self.metal_logit).numpy().copy())

    def reindex(self, idx: np.ndarray, opt: torch.optim.Optimizer):
        """Keep rows ``idx`` (duplicates allowed) in the variables and in the Adam moments."""
        ti = torch.as_tensor(idx, dtype=torch.long)
        for name in self.names:
            old = getattr(self, name)
            new = old.detach()[ti].clone().requires_grad_(True)
            state = opt.state.pop(old, None)
            for group in opt.param_groups:
                group["params"] = [new if p is old else p for p in group["params"]]
            if state:
                opt.state[new] = {k: (v[ti].clone() if torch.is_tensor(v) and v.dim() else v)
                                  for k, v in state.items()}
            setattr(self, name, new)


def _densify(params: _Params, opt, grad_accum, grad_count, cfg: TrainConfig) -> np.ndarray:
    """Prune transparent splats, clone small high-gradient ones and split large ones."""
    with torch.no_grad():
        scale = torch.exp(params.log_scale).numpy()
        alpha = torch.sigmoid(params.opacity_logit).numpy()
    keep = np.nonzero(alpha >= cfg.prune_alpha)[0]
    avg = grad_accum / np.maximum(grad_count, 1)
    hot = keep[avg[keep] > cfg.densify_grad_thresh]
    idx = np.concatenate([keep, hot])
    n_before = len(alpha)
    params.reindex(idx, opt)
    split = np.nonzero(scale[hot].max(axis=1) > cfg.split_scale)[0]
    with torch.no_grad():
        for j in split:
            r_orig = int(np.searchsorted(keep, hot[j]))
            r_copy = len(keep) + int(j)
            axes = quat_to_matrix_torch(params.quat[r_copy])
            s = torch.exp(params.log_scale[r_copy])
            major = int(torch.argmax(s))
            offset = axes[:, major] * s[major] * 0.5
            params.mu[r_copy] += offset
            params.mu[r_orig] -= offset
            params.log_scale[r_copy] -= np.log(1.6)
            params.log_scale[r_orig] -= np.log(1.6)
    log.debug("densify: %d -> %d splats (%d hot, %d split)", n_before, len(idx), len(hot), len(split))
    return idx


def optimize(frames: list[TrainingFrame], init_splats: SplatSet, env_init: EnvironmentMap,
             cfg: TrainConfig, env_pool: list[EnvironmentMap] | None = None, refine=None,
             history: list | None = None, dtype=torch.float64):
    """Fit splats and the environment to the frames; returns ``(splats, env)``.

    ``history``, when given, receives ``(iteration, kind, loss)`` tuples.
    """
    real = [f for f in frames if not f.is_synthetic]
    if not real:
        raise ValueError("optimize needs at least one real frame")
    init_splats.validate()
    rng_real = np.random.default_rng(cfg.seed)
    rng_synth = np.random.default_rng([cfg.seed, 1])

    params = _Params(init_splats, dtype)
    env_src = torch.as_tensor(env_init.pixels, dtype=dtype)
    env_h = min(cfg.env_height, env_init.height)
    if env_init.height % env_h:
        env_h = env_init.height
    env_src = _block_average(env_src, env_h)
    env_log = torch.log(env_src.clamp_min(1e-6)).detach().requires_grad_(True)
    pre_op = PrefilterOperator(env_h, cfg.n_mips, cfg.lut_res, dtype=dtype)

    groups = [
        {"params": [params.mu], "lr": cfg.lr_position},
        {"params": [params.quat], "lr": cfg.lr_rotation},
        {"params": [params.log_scale], "lr": cfg.lr_scale},
        {"params": [params.opacity_logit], "lr": cfg.lr_opacity},
        {"params": [params.albedo_logit], "lr": cfg.lr_albedo},
        {"params": [params.rough_logit], "lr": cfg.lr_roughness},
        {"params": [params.metal_logit], "lr": cfg.lr_metallic},
        {"params": [env_log], "lr": cfg.lr_env},
    ]
    opt = torch.optim.Adam(groups, eps=1e-15)

    override_cache: dict[int, object] = {}

    def pre_for(frame):
        if frame.env_override is None:
            return pre_op(torch.exp(env_log))
        key = id(frame.env_override)
        if key not in override_cache:
            p = prefilter(frame.env_override, cfg.n_mips, cfg.lut_res)
            override_cache[key] = type(p)([m.to(dtype) for m in p.specular_mips],
                                          p.diffuse_irradiance.to(dtype), p.brdf_lut.to(dtype),
                                          p.roughness_levels)
        return override_cache[key]

    real_queue: list[int] = []
    pool: list[TrainingFrame] = []
    synth_i = 0
    grad_accum = np.zeros(len(init_splats))
    grad_count = np.zeros(len(init_splats))

    for it in range(cfg.iters_total):
        k = it - cfg.synth_start
        if 0 <= k < cfg.synth_extra and k % cfg.synth_refresh == 0:
            current = params.export()
            target = current.mu.mean(axis=0) if len(current) else np.zeros(3)
            pool = []
            override_cache.clear()
            for j in range(cfg.synth_pool):
                cam = sample_camera(real, target, rng_synth)
                env = (env_pool[rng_synth.integers(len(env_pool))] if env_pool
                       else random_environment(rng_synth, env_h))
                seed = int(rng_synth.integers(2**31))
                pool.append(make_synthetic_frame(current, cam, env, seed, cfg, refine))
            synth_i = 0

        if frame_kind(it, cfg) == "synthetic" and pool:
            frame = pool[synth_i % len(pool)]
            synth_i += 1
            kind = "synthetic"
        else:
            if not real_queue:
                real_queue = list(rng_real.permutation(len(real)))
            frame = real[real_queue.pop()]
            kind = "real"

        out = render_tensors(params.tensors(), frame.camera, pre_for(frame), 1.0,
                             cfg.background, cfg.tile)
        loss = objective(frame, out, cfg)
        if not torch.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at iteration {it}")
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:  # false when no splat reaches the frame
            loss.backward()
            opt.step()
            with torch.no_grad():
                if not all(torch.isfinite(p).all() for p in (*params.variables(), env_log)):
                    raise DivergenceError(f"parameters became non-finite at iteration {it}")
        if history is not None:
            history.append((it, kind, loss.item()))

        if params.mu.grad is not None:
            g = params.mu.grad.norm(dim=1).numpy()
            grad_accum += g
            grad_count += g > 0
        if cfg.densify_every > 0 and it > 0 and it % cfg.densify_every == 0 and it <= cfg.densify_until:
            _densify(params, opt, grad_accum, grad_count, cfg)
            grad_accum = np.zeros(len(params.mu))
            grad_count = np.zeros(len(params.mu))

    with torch.no_grad():
        env = EnvironmentMap(torch.exp(env_log).numpy().copy())
    return params.export(), env
