"""Color-partitioned exact nearest-neighbor search over car instance embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Camera, OrientedBox3, box_to_mask
from .imageio import read_matrix, write_matrix

DEFAULT_MIN_AREA_PX = 900
DEFAULT_MAX_OVERLAP = 0.3


class EmptyBankError(LookupError):
    pass


@dataclass
class BankEntry:
    instance_id: str
    embedding: np.ndarray
    color: str
    brand: str = ""
    model: str = ""
    car_type: str = ""
    asset_path: str = ""

    def __post_init__(self):
        self.instance_id = str(self.instance_id)
        self.embedding = np.asarray(self.embedding, dtype=np.float32).reshape(-1)


@dataclass
class Query:
    embedding: np.ndarray
    color: str
    source_box: OrientedBox3 | None = None
    crop: tuple[int, int, int, int] | None = None  # x0, y0, x1, y1 (exclusive)

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float32).reshape(-1)


@dataclass
class _Partition:
    ids: np.ndarray        # (n,) object array of instance ids, sorted
    rows: np.ndarray       # (n,) indices into MemoryBank.entries
    matrix: np.ndarray     # (n, D) float32, row-major


@dataclass
class MemoryBank:
    entries: list[BankEntry]
    dim: int
    partitions: dict[str, _Partition] = field(default_factory=dict)
    everything: _Partition | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def colors(self) -> list[str]:
        return sorted(self.partitions)

    def partition_sizes(self) -> dict[str, int]:
        return {c: len(p.rows) for c, p in sorted(self.partitions.items())}


def _partition(entries: list[BankEntry], rows: list[int], dim: int) -> _Partition:
    rows = sorted(rows, key=lambda r: entries[r].instance_id)
    mat = np.empty((len(rows), dim), dtype=np.float32)
    for i, r in enumerate(rows):
        mat[i] = entries[r].embedding
    ids = np.array([entries[r].instance_id for r in rows], dtype=object)
    return _Partition(ids, np.array(rows, dtype=np.int64), mat)


def build_bank(entries) -> MemoryBank:
    """Group entries by color; each group keeps a dense embedding matrix."""
    entries = list(entries)
    if not entries:
        return MemoryBank([], 0, {}, None)
    dim = len(entries[0].embedding)
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        if len(e.embedding) != dim:
            raise ValueError(f"entry {e.instance_id}: embedding dimension {len(e.embedding)} != {dim}")
        groups.setdefault(e.color, []).append(i)
    parts = {c: _partition(entries, rows, dim) for c, rows in groups.items()}
    return MemoryBank(entries, dim, parts, _partition(entries, list(range(len(entries))), dim))


def _sq_dists(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    # direct difference rather than the |a|^2 - 2ab + |b|^2 expansion, which loses exactness
    d = matrix.astype(np.float64) - q.astype(np.float64)
    return np.einsum("ij,ij->i", d, d)


def retrieve(bank: MemoryBank, query: Query, k: int = 1) -> list[tuple[str, float]]:
    """``k`` nearest entries by Euclidean distance within the query's color group.

    Falls back to the whole bank when no entry has the query color. Ties are
    broken by instance id.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(bank) == 0:
        raise EmptyBankError("memory bank is empty")
    if len(query.embedding) != bank.dim:
        raise ValueError(f"query dimension {len(query.embedding)} != bank dimension {bank.dim}")
    part = bank.partitions.get(query.color) or bank.everything
    d2 = _sq_dists(part.matrix, query.embedding)
    # ids within a partition are sorted, so a stable sort on distance breaks ties by id
    order = np.argsort(d2, kind="stable")[:k]
    return [(str(part.ids[i]), float(np.sqrt(d2[i]))) for i in order]


def brute_force(entries: list[BankEntry], query: Query, k: int = 1) -> list[tuple[str, float]]:
    """Reference scan: every entry, filtered by color, sorted by (distance, id)."""
    pool = [e for e in entries if e.color == query.color] or list(entries)
    q = query.embedding.astype(np.float64)
    scored = [(float(np.sqrt(np.sum((e.embedding.astype(np.float64) - q) ** 2))), e.instance_id)
              for e in pool]
    scored.sort()
    return [(i, d) for d, i in scored[:k]]


def select_crops(camera: Camera, boxes: list[OrientedBox3], min_area_px: int = DEFAULT_MIN_AREA_PX,
                 max_overlap: float = DEFAULT_MAX_OVERLAP) -> list[Query]:
    """Query stubs (no embedding yet) for boxes whose masks are large and isolated.

    When two masks overlap with IoU above ``max_overlap`` only the larger one is
    kept.
    """
    masks = [box_to_mask(camera, b) for b in boxes]
    areas = np.array([m.sum() for m in masks])
    alive = areas >= min_area_px
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if not (alive[i] or alive[j]) or areas[i] == 0 or areas[j] == 0:
                continue
            inter = np.logical_and(masks[i], masks[j]).sum()
            iou = inter / (areas[i] + areas[j] - inter)
            if iou > max_overlap:
                # the larger survives; equal areas keep the first box
                loser = j if areas[i] >= areas[j] else i
                alive[loser] = False
    out = []
    for i in np.nonzero(alive)[0]:
        ys, xs = np.nonzero(masks[i])
        crop = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        out.append(Query(np.zeros(0, dtype=np.float32), "", boxes[i], crop))
    return out


# --- on-disk bank ---------------------------------------------------------

def save_bank(bank_or_entries, manifest_path, matrix_path=None):
    """JSONL manifest plus a raw f32 embedding matrix (``<manifest>.f32`` by default)."""
    entries = bank_or_entries.entries if isinstance(bank_or_entries, MemoryBank) else list(bank_or_entries)
    manifest_path = Path(manifest_path)
    matrix_path = Path(matrix_path) if matrix_path else manifest_path.with_suffix(".f32")
    dim = len(entries[0].embedding) if entries else 0
    mat = np.stack([e.embedding for e in entries]) if entries else np.zeros((0, dim), np.float32)
    write_matrix(matrix_path, mat)
    with open(manifest_path, "w") as f:
        for row, e in enumerate(entries):
            f.write(json.dumps({"instance_id": e.instance_id, "color": e.color, "brand": e.brand,
                                "model": e.model, "car_type": e.car_type,
                                "asset_path": e.asset_path, "embedding_row": row}) + "\n")
    return matrix_path


def load_entries(manifest_path, matrix_path=None) -> list[BankEntry]:
    manifest_path = Path(manifest_path)
    matrix_path = Path(matrix_path) if matrix_path else manifest_path.with_suffix(".f32")
    mat = read_matrix(matrix_path)
    entries = []
    with open(manifest_path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            row = int(d["embedding_row"])
            if not 0 <= row < len(mat):
                raise ValueError(f"{manifest_path}:{n}: embedding_row {row} out of range")
            entries.append(BankEntry(d["instance_id"], mat[row], d["color"], d.get("brand", ""),
                                     d.get("model", ""), d.get("car_type", ""), d.get("asset_path", "")))
    return entries


def load_bank(manifest_path, matrix_path=None) -> MemoryBank:
    return build_bank(load_entries(manifest_path, matrix_path))
