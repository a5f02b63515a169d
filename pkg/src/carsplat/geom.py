"""Camera, box and similarity-transform primitives shared by every stage.

Conventions used throughout the package:

* quaternions are stored as ``(w, x, y, z)``;
* the world frame is right-handed with ``+z`` up;
* cameras follow the pinhole/OpenCV layout (``+x`` right, ``+y`` down,
  looking down ``+z``) and their pose maps world points into the camera frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion with ``w >= 0`` (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotation_angle(q) -> float:
    """Angle in radians of the rotation encoded by ``q``."""
    q = quat_normalize(q)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


@dataclass(frozen=True)
class RigidSim3:
    """Similarity transform ``p -> scale * R p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise ValueError("transform must be finite")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", quat_normalize(q))
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidSim3":
        return cls()

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation, scale: float = 1.0) -> "RigidSim3":
        return cls(matrix_to_quat(rot), translation, scale)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, p):
        """Transform a point or an ``(N, 3)`` array of points."""
        p = np.asarray(p, dtype=np.float64)
        return self.scale * p @ self.matrix.T + self.translation

    def apply_vector(self, v):
        """Rotate direction(s) without scaling or translating."""
        return np.asarray(v, dtype=np.float64) @ self.matrix.T

    def compose(self, other: "RigidSim3") -> "RigidSim3":
        """``self ∘ other``: apply ``other`` first."""
        return RigidSim3(
            quat_mul(self.rotation, other.rotation),
            self.apply(other.translation),
            self.scale * other.scale,
        )

    def inverse(self) -> "RigidSim3":
        q_inv = quat_conj(self.rotation)
        inv_scale = 1.0 / self.scale
        t = -inv_scale * quat_to_matrix(q_inv) @ self.translation
        return RigidSim3(q_inv, t, inv_scale)

    def almost_equal(self, other: "RigidSim3", tol: float = 1e-6) -> bool:
        same_rot = min(
            np.abs(self.rotation - other.rotation).max(),
            np.abs(self.rotation + other.rotation).max(),
        )
        return (
            same_rot <= tol
            and np.abs(self.translation - other.translation).max() <= tol
            and abs(self.scale - other.scale) <= tol
        )

    def to_dict(self) -> dict:
        return {
            "quat": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidSim3":
        return cls(d["quat"], d["translation"], d.get("scale", 1.0))


compose = RigidSim3.compose
inverse = RigidSim3.inverse


def apply(t: RigidSim3, p):
    return t.apply(p)


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidSim3 = field(default_factory=RigidSim3)
    id: str = "cam"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if abs(self.pose.scale - 1.0) > 1e-9:
            raise ValueError("camera pose must have unit scale")

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_deg: float = 50.0,
                up=(0.0, 0.0, 1.0), id: str = "cam") -> "Camera":
        """Camera at ``eye`` looking at ``target`` with world ``up`` pointing image-up."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r_wc = np.stack([right, down, fwd])  # rows: camera axes in world
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        pose = RigidSim3.from_matrix(r_wc, -r_wc @ eye)
        return cls(f, f, width / 2, height / 2, width, height, pose, id)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return self.pose.inverse().translation

    def world_to_camera(self, p):
        return self.pose.apply(p)

    def pixel_rays(self):
        """Unit world-space ray directions through every pixel center, ``(H, W, 3)``."""
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(j - self.cx) / self.fx, (i - self.cy) / self.fy, np.ones_like(j)], -1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.pose.matrix  # camera -> world is R^T

    def transformed(self, world_tf: RigidSim3) -> "Camera":
        """Same view of a world that has been moved by the rigid ``world_tf``."""
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.pose.compose(world_tf.inverse()), self.id)

    def to_dict(self) -> dict:
        q, t = self.pose.rotation, self.pose.translation
        return {
            "id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "qw": q[0], "qx": q[1], "qy": q[2], "qz": q[3],
            "tx": t[0], "ty": t[1], "tz": t[2],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        pose = RigidSim3([d["qw"], d["qx"], d["qy"], d["qz"]], [d["tx"], d["ty"], d["tz"]])
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), pose, str(d.get("id", "cam")))


def project(camera: Camera, point):
    """Pixel coordinates of a world point, or ``None`` when it is behind the camera."""
    x, y, z = camera.world_to_camera(point)
    if z <= 0:
        return None
    return np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])


def unproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    """World point at camera-frame depth ``depth`` seen at ``pixel``."""
    u, v = pixel
    p_cam = np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])
    return camera.pose.inverse().apply(p_cam)


@dataclass(frozen=True)
class OrientedBox3:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    track_id: int = 0
    timestamp: int = 0

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if not np.all(he > 0):
            raise ValueError(f"half extents must be positive, got {he}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation).reshape(4)))

    @property
    def pose(self) -> RigidSim3:
        """Box-local to world transform (unit scale)."""
        return RigidSim3(self.rotation, self.center)

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return self.pose.apply(signs * self.half_extents)

    def contains(self, points) -> np.ndarray:
        local = self.pose.inverse().apply(points)
        return np.all(np.abs(local) <= self.half_extents, axis=-1)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices (Andrew's monotone chain)."""
    pts = sorted(map(tuple, np.asarray(points, dtype=np.float64)))
    pts = list(dict.fromkeys(pts))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def fill_convex_polygon(hull: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean mask of pixels whose centers lie inside a CCW convex polygon."""
    mask = np.zeros((height, width), dtype=bool)
    if len(hull) < 3:
        return mask
    x0 = int(np.clip(np.floor(hull[:, 0].min()), 0, width))
    x1 = int(np.clip(np.ceil(hull[:, 0].max()), 0, width))
    y0 = int(np.clip(np.floor(hull[:, 1].min()), 0, height))
    y1 = int(np.clip(np.ceil(hull[:, 1].max()), 0, height))
    if x0 >= x1 or y0 >= y1:
        return mask
    px, py = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    inside = np.ones(px.shape, dtype=bool)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        inside &= (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) >= 0
    mask[y0:y1, x0:x1] = inside
    return mask


def box_to_mask(camera: Camera, box: OrientedBox3) -> np.ndarray:
    """Filled convex hull of the box corners that project in front of the camera."""
    pts = [project(camera, c) for c in box.corners()]
    pts = [p for p in pts if p is not None]
    if not pts:
        return np.zeros((camera.height, camera.width), dtype=bool)
    return fill_convex_polygon(convex_hull_2d(np.array(pts)), camera.width, camera.height)


def load_cameras_and_tracks(path) -> tuple[dict[str, Camera], dict[int, list[OrientedBox3]]]:
    data = json.loads(Path(path).read_text())
    cameras = {str(c["id"]): Camera.from_dict(c) for c in data.get("cameras", [])}
    tracks: dict[int, list[OrientedBox3]] = {}
    for tr in data.get("tracks", []):
        tid = int(tr["track_id"])
        tracks[tid] = [
            OrientedBox3(f["center"], f["half_extents"], f["quat"], tid, int(f["t"]))
            for f in tr["frames"]
        ]
    return cameras, tracks


def dump_cameras_and_tracks(cameras, tracks) -> dict:
    return {
        "cameras": [c.to_dict() for c in cameras],
        "tracks": [
            {
                "track_id": int(tid),
                "frames": [
                    {"t": b.timestamp, "center": b.center.tolist(),
                     "half_extents": b.half_extents.tolist(), "quat": b.rotation.tolist()}
                    for b in boxes
                ],
            }
            for tid, boxes in tracks.items()
        ],
    }
