"""Differentiable rasterizer for relightable 2D Gaussian splats.

Each splat is a flat elliptical Gaussian lying in the plane spanned by the
first two columns of its rotation; the third column is its normal. Pixels
are shaded by intersecting their viewing ray with every splat plane,
weighting by the Gaussian falloff at the hit point and alpha-compositing
front to back. Splat colors come from split-sum shading of the splat's
material under the (scaled) environment.

The forward pass is written in torch so the exact reverse-mode gradient is
obtained by autograd; :func:`backward` packages it into
:class:`ParamGradients`.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, fields

import numpy as np
import torch

from .geom import Camera, quat_mul, quat_normalize, quat_to_matrix
from .shading import Material, PrefilteredEnv, shade_torch

WEIGHT_CUTOFF = 1.0 / 255.0
# Gaussian radius (in sigmas) beyond which the weight is below the cutoff
CUTOFF_RADIUS = math.sqrt(2.0 * math.log(255.0))
NEAR = 0.01
MAGIC = b"RSPL"
VERSION = 1


class SceneMismatchError(RuntimeError):
    """Backward pass requested for a scene that differs from the forward pass."""


@dataclass(frozen=True)
class Splat2D:
    mu: np.ndarray
    rot: np.ndarray
    sx: float
    sy: float
    opacity_logit: float
    material: Material

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def axes(self) -> np.ndarray:
        """Columns: first tangent, second tangent, normal."""
        return quat_to_matrix(self.rot)

    @property
    def normal(self) -> np.ndarray:
        return self.axes[:, 2]


def ray_splat_intersect(splat: Splat2D, origin, direction):
    """``(u, v, depth, weight)`` where the ray meets the splat plane, or ``None``.

    ``u`` and ``v`` are plane coordinates in units of ``sx`` and ``sy``; ``depth``
    is the distance along the (unit) ray.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    axes = splat.axes
    n = axes[:, 2]
    denom = direction @ n
    if abs(denom) < 1e-8:
        return None
    t = (np.asarray(splat.mu) - origin) @ n / denom
    if t <= 0:
        return None
    local = origin + t * direction - splat.mu
    u = local @ axes[:, 0] / splat.sx
    v = local @ axes[:, 1] / splat.sy
    return u, v, t, float(np.exp(-0.5 * (u * u + v * v)))


@dataclass
class SplatSet:
    """Structure-of-arrays storage for ``N`` splats."""

    mu: np.ndarray            # (N, 3)
    quat: np.ndarray          # (N, 4) w, x, y, z
    scale: np.ndarray         # (N, 2) sx, sy
    opacity_logit: np.ndarray # (N,)
    albedo: np.ndarray        # (N, 3)
    roughness: np.ndarray     # (N,)
    metallic: np.ndarray      # (N,)

    def __post_init__(self):
        shapes = {"mu": 3, "quat": 4, "scale": 2, "opacity_logit": 0, "albedo": 3,
                  "roughness": 0, "metallic": 0}
        for name, width in shapes.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a = a.reshape(-1, width) if width else a.reshape(-1)
            setattr(self, name, a)
        n = len(self.mu)
        if any(len(getattr(self, f.name)) != n for f in fields(self)):
            raise ValueError("splat attribute arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i) -> Splat2D:
        return Splat2D(self.mu[i], self.quat[i], self.scale[i, 0], self.scale[i, 1],
                       float(self.opacity_logit[i]),
                       Material(self.albedo[i], self.roughness[i], self.metallic[i]))

    @classmethod
    def empty(cls) -> "SplatSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_splats(cls, splats) -> "SplatSet":
        splats = list(splats)
        if not splats:
            return cls.empty()
        return cls(
            np.array([s.mu for s in splats]), np.array([s.rot for s in splats]),
            np.array([[s.sx, s.sy] for s in splats]), np.array([s.opacity_logit for s in splats]),
            np.array([s.material.albedo for s in splats]),
            np.array([s.material.roughness for s in splats]),
            np.array([s.material.metallic for s in splats]),
        )

    @staticmethod
    def concat(sets) -> "SplatSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return SplatSet.empty()
        return SplatSet(*(np.concatenate([getattr(s, f.name) for s in sets]) for f in fields(SplatSet)))

    def subset(self, idx) -> "SplatSet":
        return SplatSet(*(getattr(self, f.name)[idx] for f in fields(self)))

    def copy(self) -> "SplatSet":
        return SplatSet(*(getattr(self, f.name).copy() for f in fields(self)))

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    @property
    def normals(self) -> np.ndarray:
        return quat_to_matrix(self.quat)[..., :, 2]

    def validate(self):
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise ValueError(f"non-finite splat parameter: {f.name}")
        if len(self) and np.any(self.scale <= 0):
            raise ValueError("splat scales must be positive")

    def transformed(self, tf) -> "SplatSet":
        """Apply a similarity transform to positions, orientations and scales."""
        quat = quat_mul(np.broadcast_to(tf.rotation, self.quat.shape), self.quat)
        return SplatSet(tf.apply(self.mu), quat_normalize(quat), self.scale * tf.scale,
                        self.opacity_logit.copy(), self.albedo.copy(), self.roughness.copy(),
                        self.metallic.copy())

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for f in fields(self):
            h.update(np.ascontiguousarray(getattr(self, f.name)).tobytes())
        return h.hexdigest()

    # --- RSPL container -------------------------------------------------

    def to_rows(self) -> np.ndarray:
        return np.concatenate(
            [self.mu, self.quat, self.scale, self.opacity_logit[:, None], self.albedo,
             self.roughness[:, None], self.metallic[:, None]], axis=1,
        ).astype("<f4")

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "SplatSet":
        r = rows.astype(np.float64)
        return cls(r[:, 0:3], r[:, 3:7], r[:, 7:9], r[:, 9], r[:, 10:13], r[:, 13], r[:, 14])

    def to_bytes(self) -> bytes:
        return MAGIC + struct.pack("<IQ", VERSION, len(self)) + self.to_rows().tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, strict: bool = True) -> "SplatSet":
        splats, end = read_rspl(data)
        if strict and end != len(data):
            raise ValueError("trailing bytes after RSPL block")
        return splats


ROW_FLOATS = 15


def read_rspl(data: bytes, offset: int = 0) -> tuple[SplatSet, int]:
    """Parse an RSPL block starting at ``offset``; returns the splats and end offset."""
    if len(data) < offset + 16 or data[offset:offset + 4] != MAGIC:
        raise ValueError("not an RSPL splat block (bad magic or truncated header)")
    version, count = struct.unpack_from("<IQ", data, offset + 4)
    if version != VERSION:
        raise ValueError(f"unsupported RSPL version {version}")
    start = offset + 16
    end = start + count * ROW_FLOATS * 4
    if len(data) < end:
        raise ValueError("truncated RSPL block")
    rows = np.frombuffer(data, dtype="<f4", count=count * ROW_FLOATS, offset=start)
    return SplatSet.from_rows(rows.reshape(count, ROW_FLOATS)), end


def save_splats(path, splats: SplatSet):
    with open(path, "wb") as f:
        f.write(splats.to_bytes())


def load_splats(path) -> SplatSet:
    with open(path, "rb") as f:
        return SplatSet.from_bytes(f.read())


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass
class FrameBuffers:
    rgb: np.ndarray          # (H, W, 3)
    acc_opacity: np.ndarray  # (H, W)
    normal: np.ndarray       # (H, W, 3) camera frame
    depth: np.ndarray        # (H, W)
    fingerprint: str = ""


@dataclass
class ParamGradients:
    mu: np.ndarray
    rot: np.ndarray          # tangent-space (right-multiplied) rotation gradient
    sx: np.ndarray
    sy: np.ndarray
    opacity_logit: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    env_scale: float


def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


@dataclass
class SplatTensors:
    """Differentiable view of a splat set (constrained values, not logits)."""

    mu: torch.Tensor
    quat: torch.Tensor
    scale: torch.Tensor
    opacity_logit: torch.Tensor
    albedo: torch.Tensor
    roughness: torch.Tensor
    metallic: torch.Tensor

    @classmethod
    def from_splats(cls, s: SplatSet, dtype=torch.float64, requires_grad: bool = False):
        t = lambda a: torch.tensor(a, dtype=dtype, requires_grad=requires_grad)
        return cls(t(s.mu), t(s.quat), t(s.scale), t(s.opacity_logit), t(s.albedo),
                   t(s.roughness), t(s.metallic))

    def __len__(self) -> int:
        return self.mu.shape[0]


def _screen_bounds(cam_pts: torch.Tensor, cam: Camera) -> np.ndarray:
    """Pixel bounding boxes ``(N, 4)`` of splat corner sets ``(N, 4, 3)`` in camera frame."""
    z = cam_pts[..., 2]
    u = cam.fx * cam_pts[..., 0] / z.clamp_min(NEAR) + cam.cx
    v = cam.fy * cam_pts[..., 1] / z.clamp_min(NEAR) + cam.cy
    box = torch.stack([u.min(1).values, v.min(1).values, u.max(1).values, v.max(1).values], 1)
    box = box.numpy().copy()
    behind = (z <= NEAR).any(1).numpy()
    box[behind] = [-np.inf, -np.inf, np.inf, np.inf]
    return box


def render_tensors(sp: SplatTensors, camera: Camera, pre_env: PrefilteredEnv | None,
                   env_scale=1.0, background: str = "black", tile: int = 32,
                   env_pixels: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Render to a dict of ``rgb``, ``acc_opacity``, ``normal`` and ``depth`` tensors."""
    dtype = sp.mu.dtype
    H, W = camera.height, camera.width
    R = torch.as_tensor(camera.pose.matrix, dtype=dtype)
    t = torch.as_tensor(camera.pose.translation, dtype=dtype)
    center = -(R.T @ t)
    rays_cam_np = np.stack(np.meshgrid(
        (np.arange(W) + 0.5 - camera.cx) / camera.fx,
        (np.arange(H) + 0.5 - camera.cy) / camera.fy), -1).reshape(-1, 2)
    rays_cam = torch.as_tensor(np.concatenate([rays_cam_np, np.ones((H * W, 1))], 1), dtype=dtype)
    rays_cam = rays_cam / rays_cam.norm(dim=1, keepdim=True)
    rays = rays_cam @ R  # world directions

    rgb = torch.zeros(H * W, 3, dtype=dtype)
    acc = torch.zeros(H * W, dtype=dtype)
    nrm = torch.zeros(H * W, 3, dtype=dtype)
    dep = torch.zeros(H * W, dtype=dtype)
    log_trans = torch.zeros(H * W, dtype=dtype)

    n_spl = len(sp)
    if n_spl:
        mu_cam = sp.mu @ R.T + t
        order = torch.argsort(mu_cam[:, 2].detach(), stable=True)
        order = order[mu_cam[order, 2].detach() > NEAR]
    else:
        order = torch.zeros(0, dtype=torch.long)

    if len(order):
        idx = order
        axes = quat_to_matrix_torch(sp.quat[idx])
        tu, tv, nw = axes[..., 0], axes[..., 1], axes[..., 2]
        mu = sp.mu[idx]
        sx, sy = sp.scale[idx, 0], sp.scale[idx, 1]
        alpha = torch.sigmoid(sp.opacity_logit[idx])
        wo = center - mu
        wo = wo / wo.norm(dim=1, keepdim=True)
        facing = torch.where((nw * wo).sum(1, keepdim=True) >= 0, 1.0, -1.0).to(dtype)
        nf = nw * facing
        if pre_env is not None:
            color = shade_torch(sp.albedo[idx], sp.roughness[idx], sp.metallic[idx], nf, wo, pre_env)
            color = color * env_scale
        else:
            color = sp.albedo[idx]
        n_cam = nf @ R.T
        rel = center - mu
        a_u = (rel * tu).sum(1)
        a_v = (rel * tv).sum(1)
        num = -(rel * nw).sum(1)

        corners = torch.tensor([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=dtype) * CUTOFF_RADIUS
        with torch.no_grad():
            pts = (mu[:, None] + corners[None, :, :1] * (sx[:, None, None] * tu[:, None])
                   + corners[None, :, 1:] * (sy[:, None, None] * tv[:, None]))
            bounds = _screen_bounds(pts @ R.T + t, camera)

        rgb_parts, acc_parts, nrm_parts, dep_parts, lt_parts, pix_parts = [], [], [], [], [], []
        for y0 in range(0, H, tile):
            for x0 in range(0, W, tile):
                y1, x1 = min(y0 + tile, H), min(x0 + tile, W)
                sel = np.nonzero((bounds[:, 0] <= x1) & (bounds[:, 2] >= x0)
                                 & (bounds[:, 1] <= y1) & (bounds[:, 3] >= y0))[0]
                if len(sel) == 0:
                    continue
                pix = (torch.arange(y0, y1)[:, None] * W + torch.arange(x0, x1)[None]).reshape(-1)
                s = torch.as_tensor(sel)
                d = rays[pix]
                dn = d @ nw[s].T
                safe = dn.abs() >= 1e-8
                dn_safe = torch.where(safe, dn, torch.ones_like(dn))
                tt = num[s] / dn_safe
                u = (a_u[s] + tt * (d @ tu[s].T)) / sx[s]
                v = (a_v[s] + tt * (d @ tv[s].T)) / sy[s]
                r2 = u * u + v * v
                # shifted so the cutoff is continuous; exact 1 at the splat center
                wgt = (torch.exp(-0.5 * r2) - WEIGHT_CUTOFF) / (1.0 - WEIGHT_CUTOFF)
                keep = safe & (tt > 0) & (wgt > 0)
                a = torch.where(keep, alpha[s] * wgt, torch.zeros_like(wgt))
                log1m = torch.log1p(-a)
                cum = torch.cumsum(log1m, dim=1)
                trans = torch.exp(cum - log1m)  # exclusive product
                contrib = trans * a
                zc = torch.where(keep, tt * rays_cam[pix, 2:3], torch.zeros_like(tt))
                rgb_parts.append(contrib @ color[s])
                nrm_parts.append(contrib @ n_cam[s])
                dep_parts.append((contrib * zc).sum(1))
                lt_parts.append(cum[:, -1])
                acc_parts.append(-torch.expm1(cum[:, -1]))
                pix_parts.append(pix)
        if pix_parts:
            pix = torch.cat(pix_parts)
            rgb = rgb.index_put((pix,), torch.cat(rgb_parts))
            acc = acc.index_put((pix,), torch.cat(acc_parts))
            nrm = nrm.index_put((pix,), torch.cat(nrm_parts))
            dep = dep.index_put((pix,), torch.cat(dep_parts))
            log_trans = log_trans.index_put((pix,), torch.cat(lt_parts))

    if background == "env_lookup":
        if env_pixels is None:
            if pre_env is None:
                raise ValueError("env_lookup background needs an environment")
            env_pixels = pre_env.specular_mips[0]
        bg = _nearest_lookup(env_pixels, rays) * env_scale
        rgb = rgb + torch.exp(log_trans)[:, None] * bg
    elif background != "black":
        raise ValueError(f"unknown background mode {background!r}")

    depth = torch.where(acc > 1e-12, dep / acc.clamp_min(1e-12), torch.zeros_like(dep))
    return {
        "rgb": rgb.reshape(H, W, 3),
        "acc_opacity": acc.reshape(H, W),
        "normal": nrm.reshape(H, W, 3),
        "depth": depth.reshape(H, W),
    }


def _nearest_lookup(tex: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    h, w, _ = tex.shape
    dn = d.detach().numpy()
    theta = np.arctan2(np.hypot(dn[:, 0], dn[:, 1]), dn[:, 2])
    phi = np.mod(np.arctan2(dn[:, 1], dn[:, 0]), 2 * np.pi)
    i = np.clip(np.floor(theta / np.pi * h).astype(int), 0, h - 1)
    j = np.floor(phi / (2 * np.pi) * w).astype(int) % w
    return tex.reshape(-1, 3)[torch.as_tensor(i * w + j)]


def scene_fingerprint(splats: SplatSet, camera: Camera, pre_env: PrefilteredEnv | None,
                      env_scale: float, background: str) -> str:
    h = hashlib.sha1(splats.fingerprint().encode())
    h.update(repr(camera.to_dict()).encode())
    h.update(repr((float(env_scale), background)).encode())
    if pre_env is not None:
        for m in pre_env.specular_mips:
            h.update(m.detach().numpy().tobytes())
    return h.hexdigest()


def render(splats: SplatSet, camera: Camera, pre_env: PrefilteredEnv | None,
           background: str = "black", env_scale: float = 1.0, tile: int = 32) -> FrameBuffers:
    """Forward render a splat set to numpy frame buffers."""
    splats.validate()
    with torch.no_grad():
        out = render_tensors(SplatTensors.from_splats(splats), camera, pre_env,
                             env_scale, background, tile)
    return FrameBuffers(
        out["rgb"].numpy(), out["acc_opacity"].numpy(), out["normal"].numpy(),
        out["depth"].numpy(), scene_fingerprint(splats, camera, pre_env, env_scale, background),
    )


def _tangent_rot_grad(quat: np.ndarray, gq: np.ndarray) -> np.ndarray:
    """Chain quaternion gradients to a right-multiplied rotation increment ``q ⊗ exp(δ/2)``."""
    out = np.zeros((len(quat), 3))
    for i in range(3):
        e = np.zeros(4)
        e[i + 1] = 0.5
        out[:, i] = np.sum(gq * quat_mul(quat, np.broadcast_to(e, quat.shape)), axis=1)
    return out


def backward(splats: SplatSet, camera: Camera, pre_env: PrefilteredEnv | None,
             upstream: dict, forward: FrameBuffers | None = None, background: str = "black",
             env_scale: float = 1.0, tile: int = 32) -> ParamGradients:
    """Gradients of ``sum(upstream[k] * buffers[k])`` with respect to every splat parameter.

    ``upstream`` maps buffer names (``rgb``, ``acc_opacity``, ``normal``, ``depth``)
    to arrays of the matching shape. If ``forward`` is given, it must come from
    rendering exactly this scene.
    """
    if forward is not None:
        fp = scene_fingerprint(splats, camera, pre_env, env_scale, background)
        if fp != forward.fingerprint:
            raise SceneMismatchError("scene changed since the forward pass")
    sp = SplatTensors.from_splats(splats, requires_grad=True)
    s = torch.tensor(float(env_scale), dtype=torch.float64, requires_grad=True)
    out = render_tensors(sp, camera, pre_env, s, background, tile)
    loss = torch.zeros((), dtype=torch.float64)
    for key, g in upstream.items():
        loss = loss + (out[key] * torch.as_tensor(np.asarray(g), dtype=torch.float64)).sum()
    if loss.requires_grad:
        loss.backward()

    def grad(t):
        return np.zeros(tuple(t.shape)) if t.grad is None else t.grad.numpy().copy()

    gscale = grad(sp.scale)
    return ParamGradients(
        mu=grad(sp.mu),
        rot=_tangent_rot_grad(splats.quat, grad(sp.quat)),
        sx=gscale[:, 0], sy=gscale[:, 1],
        opacity_logit=grad(sp.opacity_logit),
        albedo=grad(sp.albedo), roughness=grad(sp.roughness), metallic=grad(sp.metallic),
        env_scale=0.0 if s.grad is None else float(s.grad),
    )
