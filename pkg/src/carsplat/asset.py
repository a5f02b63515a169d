"""Turning a reconstructed splat set into a canonical, insertable car asset."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .geom import Camera, OrientedBox3, RigidSim3, matrix_to_quat
from .raster import SplatSet, read_rspl

DEFAULT_KEEP_FRACTION = 0.6
BOX_PERCENTILES = (1.0, 99.0)
FOOTER = struct.Struct("<Q")


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class CarAsset:
    splats: SplatSet
    canonical_box: OrientedBox3
    wheel_line_z: float
    metadata: dict = field(default_factory=dict)
    # source frame -> canonical frame; not serialized
    to_canonical: RigidSim3 = field(default_factory=RigidSim3.identity)

    def points(self) -> np.ndarray:
        return self.splats.mu.copy()


def remove_stray_splats(splats: SplatSet, cameras: list[Camera], masks: list[np.ndarray],
                        keep_fraction: float = DEFAULT_KEEP_FRACTION) -> SplatSet:
    """Drop splats behind any camera or outside the car mask in too many views.

    A splat survives when its center lies in front of every camera and falls
    outside the mask in at most ``(1 - keep_fraction)`` of the views in which it
    projects inside the image.
    """
    if len(cameras) != len(masks):
        raise ValueError(f"{len(cameras)} cameras but {len(masks)} masks")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    n = len(splats)
    behind = np.zeros(n, dtype=bool)
    outside = np.zeros(n, dtype=np.int64)
    in_image = np.zeros(n, dtype=np.int64)
    for cam, mask in zip(cameras, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (cam.height, cam.width):
            raise ValueError(f"mask shape {mask.shape} does not match camera {cam.id}")
        pc = cam.world_to_camera(splats.mu)
        z = pc[:, 2]
        behind |= z <= 0
        safe = np.where(z > 0, z, 1.0)
        u = cam.fx * pc[:, 0] / safe + cam.cx
        v = cam.fy * pc[:, 1] / safe + cam.cy
        inside = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        col = np.clip(np.floor(u).astype(np.int64), 0, cam.width - 1)
        row = np.clip(np.floor(v).astype(np.int64), 0, cam.height - 1)
        in_image += inside
        outside += inside & ~mask[row, col]
    # the small slack keeps exact ratios like 4/10 at keep_fraction 0.6 on the kept side
    limit = (1.0 - keep_fraction) * in_image + 1e-9
    keep = ~behind & (outside <= limit)
    return splats.subset(np.nonzero(keep)[0])


def _principal_frame(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    center = points.mean(axis=0)
    cov = np.cov((points - center).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0 or evals[0] <= 1e-10 * evals[-1]:
        raise DegenerateGeometryError("splat centers do not span three dimensions")
    order = np.argsort(evals)[::-1]
    return center, evecs[:, order]


def _front_sign(local: np.ndarray) -> float:
    """+1 keeps +x, -1 flips it, so that the upper half's centroid sits toward -x."""
    top = local[local[:, 2] > np.median(local[:, 2])]
    if len(top) == 0:
        return 1.0
    return -1.0 if top[:, 0].mean() > 0 else 1.0


def canonicalize(splats: SplatSet, front_hint: str | None = None, metadata: dict | None = None) -> CarAsset:
    """Center the splats and align their principal axes with x (longest), y, z.

    The z axis is oriented toward the input's +z (reconstructions are
    gravity-aligned), x follows ``front_hint`` ("+x" keeps the principal
    direction as found, "-x" flips it) or the cabin-rearward heuristic, and y
    completes a right-handed frame.
    """
    if len(splats) < 3:
        raise DegenerateGeometryError("canonicalize needs at least three splats")
    center, axes = _principal_frame(splats.mu)
    if axes[2, 2] < 0:
        axes[:, 2] = -axes[:, 2]
    # deterministic starting sign for x, then decide the front
    if axes[np.argmax(np.abs(axes[:, 0])), 0] < 0:
        axes[:, 0] = -axes[:, 0]
    axes[:, 1] = np.cross(axes[:, 2], axes[:, 0])
    local = (splats.mu - center) @ axes
    if front_hint is None:
        sign = _front_sign(local)
    elif front_hint in ("+x", "x", "+"):
        sign = 1.0
    elif front_hint in ("-x", "-"):
        sign = -1.0
    else:
        raise ValueError(f"front_hint must be '+x' or '-x', got {front_hint!r}")
    if sign < 0:
        # rotate 180 degrees about z: flips x and y together
        axes[:, 0] = -axes[:, 0]
        axes[:, 1] = -axes[:, 1]

    rot = axes.T
    tf = RigidSim3(matrix_to_quat(rot), -rot @ center, 1.0)
    canon = splats.transformed(tf)
    # quantize to the container precision so packaging round-trips exactly
    canon = SplatSet.from_rows(canon.to_rows())

    lo, hi = np.percentile(canon.mu, BOX_PERCENTILES, axis=0)
    half = np.maximum((hi - lo) / 2, 1e-6)
    box = OrientedBox3((lo + hi) / 2, half)
    return CarAsset(canon, box, float(lo[2]), dict(metadata or {}), tf)


# --- container ---------------------------------------------------------------

def _box_to_json(box: OrientedBox3) -> dict:
    return {"center": box.center.tolist(), "half_extents": box.half_extents.tolist(),
            "rotation": box.rotation.tolist()}


def package(asset: CarAsset) -> bytes:
    """RSPL splat block, JSON trailer, then the trailer offset as u64."""
    block = asset.splats.to_bytes()
    trailer = json.dumps({
        "canonical_box": _box_to_json(asset.canonical_box),
        "wheel_line_z": asset.wheel_line_z,
        "metadata": asset.metadata,
    }, sort_keys=True).encode("utf-8")
    return block + trailer + FOOTER.pack(len(block))


def load(data: bytes) -> CarAsset:
    if len(data) < FOOTER.size + 16:
        raise ValueError("asset container truncated")
    (offset,) = FOOTER.unpack_from(data, len(data) - FOOTER.size)
    if offset > len(data) - FOOTER.size:
        raise ValueError("asset trailer offset points past the end of the data")
    splats, end = read_rspl(data[:offset])
    if end != offset:
        raise ValueError("asset splat block length disagrees with the trailer offset")
    try:
        meta = json.loads(data[offset:len(data) - FOOTER.size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"asset trailer is not valid JSON: {exc}") from None
    b = meta["canonical_box"]
    box = OrientedBox3(np.array(b["center"]), np.array(b["half_extents"]), np.array(b["rotation"]))
    return CarAsset(splats, box, float(meta["wheel_line_z"]), meta.get("metadata", {}))


def save_asset(path, asset: CarAsset):
    with open(path, "wb") as f:
        f.write(package(asset))


def load_asset(path) -> CarAsset:
    with open(path, "rb") as f:
        return load(f.read())
