"""Tracking, segmentation, color-distribution and feature-distribution metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.transform import Rotation

from .imageio import read_mask

IOU_THRESH = 0.5
N_PROJ = 256
REPORT_KEYS = ("MOTA", "MOTP", "IDF1", "IoU", "W1", "W1_L", "W1_ab", "FID", "KIDx1e3")


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------

@dataclass
class Detection:
    id: int
    bbox: np.ndarray | None = None   # x, y, w, h in pixels
    mask: np.ndarray | None = None   # boolean H x W

    def __post_init__(self):
        if self.bbox is None and self.mask is None:
            raise MetricError("a detection needs a box or a mask")
        if self.bbox is not None:
            self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(4)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def center(self) -> np.ndarray:
        if self.bbox is not None:
            x, y, w, h = self.bbox
            return np.array([x + w / 2, y + h / 2])
        ys, xs = np.nonzero(self.mask)
        return np.array([xs.mean() + 0.5, ys.mean() + 0.5]) if len(xs) else np.zeros(2)


class DetectionSet(dict):
    """``frame -> list[Detection]`` with unique ids per frame."""

    def __init__(self, frames=None):
        super().__init__()
        for frame, dets in (frames or {}).items():
            self.add_frame(frame, dets)

    def add_frame(self, frame: int, dets):
        dets = list(dets)
        ids = [d.id for d in dets]
        if len(set(ids)) != len(ids):
            raise MetricError(f"duplicate ids in frame {frame}")
        self[int(frame)] = dets

    def total(self) -> int:
        return sum(len(v) for v in self.values())

    @classmethod
    def from_jsonl(cls, path) -> "DetectionSet":
        frames: dict[int, list[Detection]] = {}
        with open(path) as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    frames.setdefault(int(d["frame"]), []).append(Detection(int(d["id"]), d["bbox"]))
        return cls(frames)

    @classmethod
    def from_mask_dir(cls, path) -> "DetectionSet":
        """PNG files named ``<frame>_<id>.png``."""
        frames: dict[int, list[Detection]] = {}
        for p in sorted(Path(path).glob("*.png")):
            frame, ident = p.stem.split("_")[:2]
            frames.setdefault(int(frame), []).append(Detection(int(ident), mask=read_mask(p)))
        return cls(frames)

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for frame in sorted(self):
                for d in sorted(self[frame], key=lambda d: d.id):
                    f.write(json.dumps({"frame": frame, "id": d.id, "bbox": d.bbox.tolist()}) + "\n")


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a, b) -> float | None:
    """Intersection over union; ``None`` when both masks are empty."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return None
    return float(np.logical_and(a, b).sum() / union)


def detection_iou(a: Detection, b: Detection) -> float:
    if a.mask is not None and b.mask is not None:
        v = mask_iou(a.mask, b.mask)
        return 0.0 if v is None else v
    if a.bbox is None or b.bbox is None:
        raise MetricError("cannot compare a box-only detection with a mask-only detection")
    return box_iou(a.bbox, b.bbox)


# ---------------------------------------------------------------------------
# CLEAR-MOT
# ---------------------------------------------------------------------------

@dataclass
class Match:
    frame: int
    gt_id: int
    pred_id: int
    iou: float
    center_dist: float


@dataclass
class MatchResult:
    matches: list[Match] = field(default_factory=list)
    misses: int = 0
    false_positives: int = 0
    switches: int = 0
    num_gt: int = 0
    num_pred: int = 0


def match_frames(gt: DetectionSet, pred: DetectionSet, iou_thresh: float = IOU_THRESH) -> MatchResult:
    """Frame-by-frame CLEAR-MOT correspondence.

    Pairs matched in the previous frame are kept while their IoU stays at or
    above ``iou_thresh``; the remaining detections are paired by a maximum
    total-IoU assignment restricted to pairs above the threshold. A switch is
    counted when a ground-truth object is matched to a different prediction id
    than the one it was last matched to.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise MetricError("iou_thresh must lie in (0, 1)")
    res = MatchResult()
    prev: dict[int, int] = {}    # gt id -> pred id matched in the previous frame
    last: dict[int, int] = {}    # gt id -> pred id of its most recent match
    for frame in sorted(set(gt) | set(pred)):
        g = {d.id: d for d in gt.get(frame, [])}
        p = {d.id: d for d in pred.get(frame, [])}
        res.num_gt += len(g)
        res.num_pred += len(p)
        pairs: dict[int, int] = {}
        ious: dict[tuple[int, int], float] = {}
        for gid, pid in prev.items():
            if gid in g and pid in p:
                v = detection_iou(g[gid], p[pid])
                if v >= iou_thresh:
                    pairs[gid] = pid
                    ious[gid, pid] = v
        g_rest = sorted(set(g) - set(pairs))
        p_rest = sorted(set(p) - set(pairs.values()))
        if g_rest and p_rest:
            m = np.array([[detection_iou(g[i], p[j]) for j in p_rest] for i in g_rest])
            valid = m >= iou_thresh
            # pairs below the threshold get a prohibitive cost and are dropped afterwards
            cost = np.where(valid, -m, 1e6)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if valid[r, c]:
                    pairs[g_rest[r]] = p_rest[c]
                    ious[g_rest[r], p_rest[c]] = float(m[r, c])
        for gid in sorted(pairs):
            pid = pairs[gid]
            if gid in last and last[gid] != pid:
                res.switches += 1
            last[gid] = pid
            dist = float(np.linalg.norm(g[gid].center - p[pid].center))
            res.matches.append(Match(frame, gid, pid, ious[gid, pid], dist))
        res.misses += len(g) - len(pairs)
        res.false_positives += len(p) - len(pairs)
        prev = pairs
    return res


def mota(result: MatchResult) -> float:
    if result.num_gt == 0:
        raise MetricError("MOTA is undefined without ground-truth objects")
    return 1.0 - (result.misses + result.false_positives + result.switches) / result.num_gt


def motp(result: MatchResult) -> float:
    """Mean ``1 - IoU`` over matched pairs (0 when nothing matched)."""
    if not result.matches:
        return 0.0
    return float(np.mean([1.0 - m.iou for m in result.matches]))


def motp_center(result: MatchResult) -> float:
    """Mean center distance in pixels over matched pairs."""
    if not result.matches:
        return 0.0
    return float(np.mean([m.center_dist for m in result.matches]))


def idf1(gt: DetectionSet, pred: DetectionSet, iou_thresh: float = IOU_THRESH) -> float:
    """Identity F1 under the trajectory assignment that maximizes identity true positives."""
    gt_ids = sorted({d.id for dets in gt.values() for d in dets})
    pr_ids = sorted({d.id for dets in pred.values() for d in dets})
    n_gt, n_pr = gt.total(), pred.total()
    if n_gt + n_pr == 0:
        return 1.0
    if not gt_ids or not pr_ids:
        return 0.0
    gi = {k: i for i, k in enumerate(gt_ids)}
    pi = {k: i for i, k in enumerate(pr_ids)}
    overlap = np.zeros((len(gt_ids), len(pr_ids)))
    for frame in set(gt) & set(pred):
        for a in gt[frame]:
            for b in pred[frame]:
                if detection_iou(a, b) >= iou_thresh:
                    overlap[gi[a.id], pi[b.id]] += 1
    rows, cols = linear_sum_assignment(-overlap)
    idtp = overlap[rows, cols].sum()
    idfn = n_gt - idtp
    idfp = n_pr - idtp
    return float(2 * idtp / (2 * idtp + idfp + idfn))


def mean_instance_iou(result: MatchResult, gt: DetectionSet, pred: DetectionSet) -> float:
    """Mean mask IoU over matched instances, skipping pairs whose masks are both empty."""
    vals = []
    for m in result.matches:
        a = next(d for d in gt[m.frame] if d.id == m.gt_id)
        b = next(d for d in pred[m.frame] if d.id == m.pred_id)
        if a.mask is not None and b.mask is not None:
            v = mask_iou(a.mask, b.mask)
        else:
            v = box_iou(a.bbox, b.bbox)
        if v is not None:
            vals.append(v)
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# color distributions
# ---------------------------------------------------------------------------

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = _RGB_TO_XYZ.sum(axis=1)


def rgb_to_cielab(pixels) -> np.ndarray:
    """Linear RGB with sRGB primaries to CIE L*a*b* under D65."""
    rgb = np.asarray(pixels, dtype=np.float64)
    xyz = rgb @ _RGB_TO_XYZ.T / D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def _quantiles(sorted_x: np.ndarray, n: int) -> np.ndarray:
    if len(sorted_x) == n:
        return sorted_x
    src = (np.arange(len(sorted_x)) + 0.5) / len(sorted_x)
    dst = (np.arange(n) + 0.5) / n
    return np.interp(dst, src, sorted_x)


def wasserstein_1d(a, b) -> float:
    """W1 between two 1-D empirical distributions (quantile-matched when sizes differ)."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if len(a) == 0 or len(b) == 0:
        raise MetricError("Wasserstein distance needs nonempty sets")
    n = max(len(a), len(b))
    return float(np.mean(np.abs(_quantiles(a, n) - _quantiles(b, n))))


def projection_directions(dim: int, n: int, seed: int = 0) -> np.ndarray:
    """``n`` unit directions, each marginally uniform on the sphere.

    In 2-D and 3-D the set is a randomly rotated, evenly spread lattice
    (stratified angles, Fibonacci sphere), which gives the average over
    directions far less variance than independent draws. Higher dimensions
    use normalized Gaussian samples.
    """
    rng = np.random.default_rng(seed)
    if dim == 2:
        theta = np.pi * (np.arange(n) + rng.uniform()) / n
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if dim == 3:
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        phi = np.pi * (3.0 - np.sqrt(5.0)) * i
        r = np.sqrt(1.0 - z * z)
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
        return pts @ Rotation.random(random_state=rng).as_matrix().T
    dirs = rng.normal(size=(n, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def sliced_wasserstein(a, b, n_proj: int = N_PROJ, seed: int = 0) -> float:
    """Average 1-D W1 over ``n_proj`` random unit directions.

    One-dimensional inputs are compared directly, without projection.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("sliced Wasserstein needs nonempty sets")
    a = a.reshape(len(a), -1) if a.ndim > 1 else a[:, None]
    b = b.reshape(len(b), -1) if b.ndim > 1 else b[:, None]
    if a.shape[1] != b.shape[1]:
        raise MetricError("point sets differ in dimension")
    if n_proj < 1:
        raise MetricError("n_proj must be at least 1")
    if a.shape[1] == 1:
        return wasserstein_1d(a[:, 0], b[:, 0])
    dirs = projection_directions(a.shape[1], n_proj, seed)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    n = max(len(a), len(b))
    if len(pa) != n:
        pa = np.stack([_quantiles(pa[:, k], n) for k in range(n_proj)], axis=1)
    if len(pb) != n:
        pb = np.stack([_quantiles(pb[:, k], n) for k in range(n_proj)], axis=1)
    return float(np.mean(np.abs(pa - pb)))


def color_distances(rgb_a, rgb_b, n_proj: int = N_PROJ, seed: int = 0) -> dict[str, float]:
    """W1 in CIELAB for all three channels, L* alone, and the (a*, b*) plane."""
    la = rgb_to_cielab(np.asarray(rgb_a).reshape(-1, 3))
    lb = rgb_to_cielab(np.asarray(rgb_b).reshape(-1, 3))
    return {
        "W1": sliced_wasserstein(la, lb, n_proj, seed),
        "W1_L": wasserstein_1d(la[:, 0], lb[:, 0]),
        "W1_ab": sliced_wasserstein(la[:, 1:], lb[:, 1:], n_proj, seed),
    }


# ---------------------------------------------------------------------------
# feature distributions
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int
    features: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = len(self.mean)
        if self.covariance.shape != (d, d):
            raise MetricError("covariance shape does not match the mean")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8, rtol=0):
            raise MetricError("covariance is not symmetric")
        if self.n < 2:
            raise MetricError("feature statistics need at least two samples")

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise MetricError("need an (n >= 2, D) feature matrix")
        cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(axis=0), (cov + cov.T) / 2, len(feats), feats)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    tol = 1e-10 * max(1.0, np.abs(w).max())
    if w.min() < -tol:
        raise MetricError(f"{what} is not positive semi-definite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussians fitted to feature sets."""
    if len(a.mean) != len(b.mean):
        raise MetricError("feature dimensions differ")
    sa = _psd_sqrt(a.covariance, "covariance A")
    _psd_sqrt(b.covariance, "covariance B")
    inner = sa @ b.covariance @ sa
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sum(np.sqrt(np.clip(w, 0, None)))
    diff = a.mean - b.mean
    val = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * tr_sqrt
    return float(max(val, 0.0))


def kid(feats_a, feats_b) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x.y / D + 1)^3``."""
    x = np.asarray(feats_a, dtype=np.float64)
    y = np.asarray(feats_b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise MetricError("feature matrices must be 2-D with equal width")
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise MetricError("KID needs at least two samples per set")
    d = x.shape[1]
    kxx = (x @ x.T / d + 1) ** 3
    kyy = (y @ y.T / d + 1) ** 3
    kxy = (x @ y.T / d + 1) ** 3
    return float((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
                 + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
                 - 2 * kxy.mean())


def report(values: dict) -> dict:
    """Metric JSON with the fixed key set; missing metrics are ``null``."""
    unknown = set(values) - set(REPORT_KEYS)
    if unknown:
        raise MetricError(f"unknown report keys: {sorted(unknown)}")
    return {k: (None if values.get(k) is None else float(values[k])) for k in REPORT_KEYS}
