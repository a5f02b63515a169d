"""Cook–Torrance materials under distant environment light.

Two independent routes evaluate the reflected radiance of a surface point:

* :func:`mc_radiance` integrates the BRDF against the environment by
  cosine-weighted Monte-Carlo sampling (numpy, used as the reference);
* :func:`shade` uses the split-sum factorisation over a prefiltered mip chain
  and a precomputed BRDF table (torch, differentiable, used for rendering).

The BRDF is GGX / height-correlated Smith / Schlick with ``alpha = roughness²``
and a Fresnel-coupled Lambert lobe
``(1 - m) c / pi * (1 - F(n.wi)) (1 - F(n.wo))`` which keeps the model
reciprocal and energy-bounded for albedo up to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

DIELECTRIC_F0 = 0.04
NV_EPS = 1e-4


@dataclass(frozen=True)
class Material:
    albedo: np.ndarray
    roughness: float
    metallic: float

    def __post_init__(self):
        c = np.clip(np.asarray(self.albedo, dtype=np.float64).reshape(3), 0.0, 1.0)
        object.__setattr__(self, "albedo", c)
        object.__setattr__(self, "roughness", float(np.clip(self.roughness, 0.0, 1.0)))
        object.__setattr__(self, "metallic", float(np.clip(self.metallic, 0.0, 1.0)))

    @property
    def f0(self) -> np.ndarray:
        return DIELECTRIC_F0 * (1.0 - self.metallic) + self.albedo * self.metallic


# ---------------------------------------------------------------------------
# equirectangular environment maps
# ---------------------------------------------------------------------------

def equirect_directions(height: int, width: int) -> np.ndarray:
    """Unit directions of texel centers, ``(H, W, 3)``; row 0 looks toward +z."""
    theta = (np.arange(height) + 0.5) * np.pi / height
    phi = (np.arange(width) + 0.5) * 2 * np.pi / width
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    return np.stack(
        [st * np.cos(phi)[None], st * np.sin(phi)[None], np.broadcast_to(ct, (height, width))], -1
    )


def equirect_solid_angles(height: int, width: int) -> np.ndarray:
    """Solid angle of each texel, ``(H, W)``; sums to ``4 pi``."""
    edges = np.arange(height + 1) * np.pi / height
    band = np.cos(edges[:-1]) - np.cos(edges[1:])
    return np.repeat((band * 2 * np.pi / width)[:, None], width, axis=1)


def _direction_to_texel(d, height, width):
    d = np.asarray(d, dtype=np.float64)
    theta = np.arctan2(np.hypot(d[..., 0], d[..., 1]), d[..., 2])
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
    return theta / np.pi * height, phi / (2 * np.pi) * width


@dataclass(frozen=True)
class EnvironmentMap:
    """Linear-RGB radiance over the sphere, stored as an ``(H, 2H, 3)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[1] != 2 * px.shape[0]:
            raise ValueError(f"environment must be (H, 2H, 3), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0:
            raise ValueError("environment radiance must be finite and nonnegative")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def constant(cls, value, height: int = 16) -> "EnvironmentMap":
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        return cls(np.tile(value, (height, 2 * height, 1)))

    @classmethod
    def from_function(cls, fn, height: int = 32) -> "EnvironmentMap":
        """Sample ``fn(dirs) -> (..., 3)`` at texel centers."""
        return cls(fn(equirect_directions(height, 2 * height)))

    def scaled(self, s: float) -> "EnvironmentMap":
        return EnvironmentMap(self.pixels * s)

    def lookup_nearest(self, d) -> np.ndarray:
        y, x = _direction_to_texel(d, self.height, self.width)
        i = np.clip(np.floor(y).astype(int), 0, self.height - 1)
        j = np.floor(x).astype(int) % self.width
        return self.pixels[i, j]

    def lookup(self, d) -> np.ndarray:
        """Bilinear lookup (wraps in azimuth, clamps at the poles)."""
        y, x = _direction_to_texel(d, self.height, self.width)
        y = np.clip(y - 0.5, 0, self.height - 1)
        x = x - 0.5
        y0 = np.minimum(np.floor(y).astype(int), self.height - 2) if self.height > 1 else np.zeros_like(y, int)
        ty = (y - y0)[..., None]
        x0 = np.floor(x).astype(int)
        tx = (x - x0)[..., None]
        x0 %= self.width
        x1 = (x0 + 1) % self.width
        y1 = np.minimum(y0 + 1, self.height - 1)
        p = self.pixels
        top = p[y0, x0] * (1 - tx) + p[y0, x1] * tx
        bot = p[y1, x0] * (1 - tx) + p[y1, x1] * tx
        return top * (1 - ty) + bot * ty


# ---------------------------------------------------------------------------
# BRDF
# ---------------------------------------------------------------------------

def ggx_d(nh, alpha):
    a2 = alpha * alpha
    den = nh * nh * (a2 - 1.0) + 1.0
    return a2 / (np.pi * den * den)


def smith_visibility(nl, nv, alpha):
    """Height-correlated Smith term already divided by ``4 (n.l)(n.v)``."""
    a2 = alpha * alpha
    gv = nl * np.sqrt(nv * nv * (1.0 - a2) + a2)
    gl = nv * np.sqrt(nl * nl * (1.0 - a2) + a2)
    return 0.5 / (gv + gl)


def schlick(f0, cos):
    return f0 + (1.0 - f0) * (1.0 - cos) ** 5


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def brdf_eval(mat: Material, n, wi, wo) -> np.ndarray:
    """Reflectance per steradian for incoming ``wi`` and outgoing ``wo``.

    ``wi`` and ``wo`` may be ``(..., 3)`` arrays; the result has shape ``(..., 3)``.
    Raises ``ValueError`` if either direction lies below the surface.
    """
    n, wi, wo = (np.asarray(v, dtype=np.float64) for v in (n, wi, wo))
    nl = _dot(n, wi)
    nv = _dot(n, wo)
    if np.any(nl <= 0) or np.any(nv <= 0):
        raise ValueError("brdf_eval is undefined for directions below the surface")
    h = wi + wo
    h = h / np.linalg.norm(h, axis=-1, keepdims=True)
    nh = _dot(n, h)
    vh = _dot(wo, h)
    alpha = max(mat.roughness ** 2, 1e-6)
    f0 = mat.f0
    fresnel = schlick(f0, vh[..., None])
    spec = (ggx_d(nh, alpha) * smith_visibility(nl, nv, alpha))[..., None] * fresnel
    diffuse = (
        (1.0 - mat.metallic) * mat.albedo / np.pi
        * (1.0 - schlick(f0, nl[..., None])) * (1.0 - schlick(f0, nv[..., None]))
    )
    return diffuse + spec


def _tangent_frame(n):
    n = np.asarray(n, dtype=np.float64)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = np.cross(helper, n)
    t /= np.linalg.norm(t)
    return t, np.cross(n, t)


def cosine_sample_hemisphere(n, count: int, rng: np.random.Generator) -> np.ndarray:
    u1, u2 = rng.random(count), rng.random(count)
    r = np.sqrt(u1)
    phi = 2 * np.pi * u2
    t, b = _tangent_frame(n)
    local_z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    return (r * np.cos(phi))[:, None] * t + (r * np.sin(phi))[:, None] * b + local_z[:, None] * n


def ggx_sample_reflect(n, wo, alpha: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Mirror ``wo`` about GGX-distributed half vectors (may fall below the horizon)."""
    u1, u2 = rng.random(count), rng.random(count)
    a2 = max(alpha, 1e-6) ** 2
    ch = np.sqrt((1.0 - u1) / (1.0 + (a2 - 1.0) * u1))
    sh = np.sqrt(np.maximum(1.0 - ch * ch, 0.0))
    phi = 2 * np.pi * u2
    t, b = _tangent_frame(n)
    h = (sh * np.cos(phi))[:, None] * t + (sh * np.sin(phi))[:, None] * b + ch[:, None] * n
    return 2.0 * _dot(h, wo)[:, None] * h - wo


def mc_radiance(mat: Material, n, wo, env: EnvironmentMap, samples: int = 100_000,
                seed: int = 0, batch: int = 200_000, strategy: str = "cosine") -> np.ndarray:
    """Monte-Carlo estimate of reflected radiance toward ``wo``.

    ``strategy="cosine"`` draws cosine-weighted directions. ``"mixture"``
    draws half of them from the GGX lobe around the mirror direction and
    weights every sample by the mixture density; it is equally unbiased and
    much less noisy for glossy materials seen at grazing angles.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if strategy not in ("cosine", "mixture"):
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    n = np.asarray(n, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    alpha = max(mat.roughness**2, 1e-6)
    total = np.zeros(3)
    done = 0
    while done < samples:
        k = min(batch, samples - done)
        if strategy == "cosine":
            wi = cosine_sample_hemisphere(n, k, rng)
        else:
            half = k // 2
            wi = np.concatenate([cosine_sample_hemisphere(n, k - half, rng),
                                 ggx_sample_reflect(n, wo, alpha, half, rng)])
        # samples on or below the horizon carry zero weight
        ok = _dot(wi, n) > 1e-12
        wi = wi[ok]
        f = env.lookup(wi) * brdf_eval(mat, n, wi, wo)
        if strategy == "cosine":
            total += f.sum(axis=0) * np.pi
        else:
            nl = _dot(wi, n)
            h = wi + wo
            h /= np.linalg.norm(h, axis=-1, keepdims=True)
            nh, vh = _dot(h, n), np.abs(_dot(h, wo))
            frac = half / k
            pdf = (1.0 - frac) * nl / np.pi + frac * ggx_d(nh, alpha) * nh / (4.0 * vh)
            total += (f * (nl / pdf)[:, None]).sum(axis=0)
        done += k
    return total / samples


# ---------------------------------------------------------------------------
# split-sum prefiltering
# ---------------------------------------------------------------------------

def _hammersley(count: int) -> np.ndarray:
    i = np.arange(count, dtype=np.uint32)
    bits = i.copy()
    bits = ((bits << 16) | (bits >> 16)) & 0xFFFFFFFF
    bits = ((bits & 0x55555555) << 1) | ((bits & 0xAAAAAAAA) >> 1)
    bits = ((bits & 0x33333333) << 2) | ((bits & 0xCCCCCCCC) >> 2)
    bits = ((bits & 0x0F0F0F0F) << 4) | ((bits & 0xF0F0F0F0) >> 4)
    bits = ((bits & 0x00FF00FF) << 8) | ((bits & 0xFF00FF00) >> 8)
    return np.stack([(i + 0.5) / count, bits.astype(np.float64) / 2.0**32], -1)


def brdf_lut(res: int = 64, samples: int = 1024) -> np.ndarray:
    """Split-sum BRDF table ``(res, res, 2)`` indexed ``[n.v, roughness]``.

    Channel 0 multiplies F0, channel 1 is the Fresnel bias.
    """
    nv = (np.arange(res) + 0.5) / res
    rough = (np.arange(res) + 0.5) / res
    u = _hammersley(samples)
    lut = np.zeros((res, res, 2))
    for j, r in enumerate(rough):
        alpha = r * r
        a2 = alpha * alpha
        cos_h = np.sqrt((1.0 - u[:, 0]) / (1.0 + (a2 - 1.0) * u[:, 0]))
        sin_h = np.sqrt(1.0 - cos_h**2)
        phi = 2 * np.pi * u[:, 1]
        h = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], -1)
        for i, c in enumerate(nv):
            v = np.array([np.sqrt(1.0 - c * c), 0.0, c])
            vh = h @ v
            l_z = 2.0 * vh * h[:, 2] - c
            ok = (l_z > 0) & (vh > 0)
            nl, nh, vh_ok = l_z[ok], h[ok, 2], vh[ok]
            g_vis = smith_visibility(nl, c, alpha) * 4.0 * nl * vh_ok / nh
            fc = (1.0 - vh_ok) ** 5
            lut[i, j, 0] = np.sum((1.0 - fc) * g_vis) / samples
            lut[i, j, 1] = np.sum(fc * g_vis) / samples
    return np.clip(lut, 0.0, 1.0)


def _block_average(pixels: torch.Tensor, out_h: int) -> torch.Tensor:
    """Solid-angle-weighted downsampling of an equirect map to ``out_h`` rows."""
    h, w, _ = pixels.shape
    f = h // out_h
    if f <= 1:
        return pixels
    sa = torch.as_tensor(equirect_solid_angles(h, w), dtype=pixels.dtype)[..., None]
    num = (pixels * sa).reshape(out_h, f, w // f, f, 3).sum(dim=(1, 3))
    den = sa.reshape(out_h, f, w // f, f, 1).sum(dim=(1, 3))
    return num / den


def _level_heights(h0: int, n_mips: int, min_h: int = 8) -> list[int]:
    heights = [h0]
    for k in range(1, n_mips):
        hk = max(h0 >> k, min(min_h, h0))
        heights.append(hk if h0 % hk == 0 else h0)
    return heights


def _sphere_grid(h: int, dtype):
    dirs = torch.as_tensor(equirect_directions(h, 2 * h).reshape(-1, 3), dtype=dtype)
    sa = torch.as_tensor(equirect_solid_angles(h, 2 * h).reshape(-1), dtype=dtype)
    return dirs, sa


def _kernel_rows(dirs_out, dirs_src, sa, kernel) -> torch.Tensor:
    wgt = kernel(dirs_out @ dirs_src.T) * sa
    return wgt / wgt.sum(dim=1, keepdim=True).clamp_min(1e-300)


def _convolve(src: torch.Tensor, out_h: int, kernel, chunk: int = 1024) -> torch.Tensor:
    """Normalized convolution on the sphere: out(w) = sum k(w, l) L(l) / sum k(w, l)."""
    dirs_src, sa = _sphere_grid(src.shape[0], src.dtype)
    dirs_out, _ = _sphere_grid(out_h, src.dtype)
    flat = src.reshape(-1, 3)
    rows = [_kernel_rows(dirs_out[s:s + chunk], dirs_src, sa, kernel) @ flat
            for s in range(0, len(dirs_out), chunk)]
    return torch.cat(rows).reshape(out_h, 2 * out_h, 3)


def _ggx_kernel(alpha: float):
    def k(cos):
        # n = v = R: the half vector bisects R and l, so n.h = sqrt((1 + cos) / 2)
        nh2 = ((1.0 + cos) * 0.5).clamp_min(0.0)
        a2 = alpha * alpha
        den = nh2 * (a2 - 1.0) + 1.0
        return a2 / (math.pi * den * den) * cos.clamp_min(0.0)
    return k


def _diffuse_kernel(cos):
    c = cos.clamp_min(0.0)
    return c * (1.0 - (1.0 - c) ** 5)


@dataclass
class PrefilteredEnv:
    """Mip chain, diffuse convolution and BRDF table of one environment.

    Arrays are torch tensors so that the chain stays differentiable with
    respect to the source radiance when it is built from a tensor.
    """

    specular_mips: list
    diffuse_irradiance: torch.Tensor
    brdf_lut: torch.Tensor
    roughness_levels: list = field(default_factory=list)

    @property
    def n_mips(self) -> int:
        return len(self.specular_mips)

    def numpy_mips(self) -> list[np.ndarray]:
        return [m.detach().cpu().numpy() for m in self.specular_mips]

    def scaled(self, s) -> "PrefilteredEnv":
        return PrefilteredEnv([m * s for m in self.specular_mips], self.diffuse_irradiance * s,
                              self.brdf_lut, self.roughness_levels)


_LUT_CACHE: dict[int, np.ndarray] = {}


def cached_brdf_lut(res: int) -> np.ndarray:
    if res not in _LUT_CACHE:
        _LUT_CACHE[res] = brdf_lut(res)
    return _LUT_CACHE[res]


def prefilter(env, n_mips: int = 6, lut_res: int = 64, diffuse_height: int = 16) -> PrefilteredEnv:
    """Prefilter ``env`` (an :class:`EnvironmentMap` or an ``(H, 2H, 3)`` tensor).

    Level ``k`` is the GGX-lobe convolution at roughness ``k / (n_mips - 1)``;
    level 0 is the source itself. Coarser levels are stored at reduced resolution.
    """
    if n_mips < 2:
        raise ValueError("n_mips must be >= 2")
    src = env if isinstance(env, torch.Tensor) else torch.as_tensor(env.pixels, dtype=torch.float64)
    h0 = src.shape[0]
    levels = [k / (n_mips - 1) for k in range(n_mips)]
    mips = [src]
    for k, hk in enumerate(_level_heights(h0, n_mips)[1:], start=1):
        down = _block_average(src, hk)
        mips.append(_convolve(down, hk, _ggx_kernel(levels[k] ** 2)))
    dh = min(diffuse_height, h0)
    if h0 % dh:
        dh = h0
    diffuse = _convolve(_block_average(src, dh), dh, _diffuse_kernel)
    diffuse = diffuse * _DIFFUSE_KERNEL_INTEGRAL / math.pi
    lut = torch.as_tensor(cached_brdf_lut(lut_res), dtype=src.dtype)
    return PrefilteredEnv(mips, diffuse, lut, levels)


# 2π ∫_0^1 c (1 - (1 - c)^5) dc = 2π (1/2 - 1/42)
_DIFFUSE_KERNEL_INTEGRAL = 2 * math.pi * (0.5 - 1.0 / 42.0)


class PrefilterOperator:
    """Prefiltering with cached convolution matrices, for small maps that change every step.

    Produces the same chain as :func:`prefilter` for an ``(height, 2 height, 3)`` tensor
    and keeps it differentiable with respect to the source radiance.
    """

    def __init__(self, height: int, n_mips: int = 6, lut_res: int = 64,
                 diffuse_height: int = 16, dtype=torch.float64):
        if n_mips < 2:
            raise ValueError("n_mips must be >= 2")
        self.height = height
        self.levels = [k / (n_mips - 1) for k in range(n_mips)]
        self.heights = _level_heights(height, n_mips)
        self.mats = []
        for k, hk in enumerate(self.heights[1:], start=1):
            dirs, sa = _sphere_grid(hk, dtype)
            self.mats.append(_kernel_rows(dirs, dirs, sa, _ggx_kernel(self.levels[k] ** 2)))
        dh = min(diffuse_height, height)
        self.diffuse_height = dh if height % dh == 0 else height
        dirs, sa = _sphere_grid(self.diffuse_height, dtype)
        self.diffuse_mat = _kernel_rows(dirs, dirs, sa, _diffuse_kernel)
        self.lut = torch.as_tensor(cached_brdf_lut(lut_res), dtype=dtype)

    def __call__(self, src: torch.Tensor) -> PrefilteredEnv:
        if src.shape != (self.height, 2 * self.height, 3):
            raise ValueError(f"expected a ({self.height}, {2 * self.height}, 3) map")
        mips = [src]
        for hk, mat in zip(self.heights[1:], self.mats):
            down = _block_average(src, hk)
            mips.append((mat @ down.reshape(-1, 3)).reshape(hk, 2 * hk, 3))
        dh = self.diffuse_height
        diffuse = (self.diffuse_mat @ _block_average(src, dh).reshape(-1, 3)).reshape(dh, 2 * dh, 3)
        diffuse = diffuse * _DIFFUSE_KERNEL_INTEGRAL / math.pi
        return PrefilteredEnv(mips, diffuse, self.lut, self.levels)


# ---------------------------------------------------------------------------
# differentiable split-sum shading
# ---------------------------------------------------------------------------

def lookup_equirect(tex: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of ``tex`` (H, W, C) along unit directions ``d`` (..., 3)."""
    h, w, c = tex.shape
    theta = torch.atan2(torch.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2 + 1e-30), d[..., 2])
    phi = torch.remainder(torch.atan2(d[..., 1], d[..., 0]), 2 * math.pi)
    y = (theta / math.pi * h - 0.5).clamp(0.0, h - 1.0)
    x = phi / (2 * math.pi) * w - 0.5
    y0 = torch.floor(y).clamp(max=max(h - 2, 0))
    x0 = torch.floor(x)
    ty = (y - y0)[..., None]
    tx = (x - x0)[..., None]
    y0 = y0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x0 = torch.remainder(x0.long(), w)
    x1 = torch.remainder(x0 + 1, w)
    flat = tex.reshape(-1, c)

    def g(yy, xx):
        return flat[(yy * w + xx).reshape(-1)].reshape(*yy.shape, c)

    top = g(y0, x0) * (1 - tx) + g(y0, x1) * tx
    bot = g(y1, x0) * (1 - tx) + g(y1, x1) * tx
    return top * (1 - ty) + bot * ty


def lookup_lut(lut: torch.Tensor, nv: torch.Tensor, rough: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup in the BRDF table with cell-centered samples and edge clamping."""
    res = lut.shape[0]
    x = (nv * res - 0.5).clamp(0.0, res - 1.0)
    y = (rough * res - 0.5).clamp(0.0, res - 1.0)
    x0 = torch.floor(x).clamp(max=res - 2)
    y0 = torch.floor(y).clamp(max=res - 2)
    tx = (x - x0)[..., None]
    ty = (y - y0)[..., None]
    x0, y0 = x0.long(), y0.long()
    flat = lut.reshape(-1, 2)

    def g(i, j):
        return flat[(i * res + j).reshape(-1)].reshape(*i.shape, 2)

    a = g(x0, y0) * (1 - ty) + g(x0, y0 + 1) * ty
    b = g(x0 + 1, y0) * (1 - ty) + g(x0 + 1, y0 + 1) * ty
    return a * (1 - tx) + b * tx


def shade_torch(albedo, roughness, metallic, n, wo, pre_env: PrefilteredEnv) -> torch.Tensor:
    """Batched split-sum radiance, shapes ``(..., 3)`` / ``(...)``; differentiable."""
    ndotv = (n * wo).sum(-1)
    nv = ndotv.clamp_min(NV_EPS)
    refl = 2.0 * ndotv[..., None] * n - wo
    # rough lobes peak between the mirror direction and the normal
    a = roughness[..., None] ** 2
    lerp = (1.0 - a) * (torch.sqrt(1.0 - a) + a)
    refl = n + lerp * (refl - n)
    refl = refl / refl.norm(dim=-1, keepdim=True)
    m = metallic[..., None]
    f0 = DIELECTRIC_F0 * (1.0 - m) + albedo * m
    fv = f0 + (1.0 - f0) * (1.0 - nv[..., None]) ** 5
    irr = lookup_equirect(pre_env.diffuse_irradiance, n)
    diffuse = (1.0 - m) * albedo * (1.0 - f0) * (1.0 - fv) * irr

    pos = roughness * (pre_env.n_mips - 1)
    spec_env = 0.0
    for k, mip in enumerate(pre_env.specular_mips):
        wk = (1.0 - (pos - k).abs()).clamp_min(0.0)
        spec_env = spec_env + wk[..., None] * lookup_equirect(mip, refl)
    ab = lookup_lut(pre_env.brdf_lut, nv, roughness)
    return diffuse + spec_env * (f0 * ab[..., :1] + ab[..., 1:])


def shade(mat: Material, n, wo, pre_env: PrefilteredEnv) -> np.ndarray:
    """Split-sum radiance of one surface point (numpy convenience wrapper)."""
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    out = shade_torch(t(mat.albedo), t(mat.roughness), t(mat.metallic), t(n), t(wo), pre_env)
    return out.detach().numpy()
