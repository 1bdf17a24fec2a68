"""Point-cloud scenes: representation, sampling, grouping, and file I/O.

A scene is N points of xyz coordinates plus F opaque feature columns,
optionally annotated with axis-aligned boxes and reference captions.
Farthest point sampling picks well-spread patch centers; kNN grouping
builds fixed-size local patches with center-relative coordinates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

_PC_MAGIC = b"PCV2"
_PC_VERSION = 1


@dataclass
class AnnotatedObject:
    object_id: str
    aabb: np.ndarray  # (cx, cy, cz, sx, sy, sz), sizes strictly positive
    labels: set[str] = field(default_factory=set)
    reference_captions: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(6)
        if np.any(self.aabb[3:] <= 0):
            raise ValueError(f"object '{self.object_id}' has non-positive box size")


@dataclass
class PointCloud:
    coords: np.ndarray            # (N, 3) meters
    features: np.ndarray          # (N, F)
    objects: list[AnnotatedObject] = field(default_factory=list)
    seed_hint: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.coords), -1)
        if len(self.features) != len(self.coords):
            raise ValueError(
                f"coords rows ({len(self.coords)}) != feature rows ({len(self.features)})")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point coordinates must be finite")

    @property
    def n_points(self) -> int:
        return len(self.coords)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def rows(self) -> np.ndarray:
        """Points as an (N, 3+F) array, xyz first."""
        return np.concatenate([self.coords, self.features], axis=1)


@dataclass
class PatchSet:
    center_indices: np.ndarray    # (M,) distinct indices into the cloud
    patch_points: np.ndarray      # (M, K, 3+F), xyz recentered per patch

    @property
    def m_patches(self) -> int:
        return len(self.center_indices)

    @property
    def k_neighbors(self) -> int:
        return self.patch_points.shape[1]


def farthest_point_sample(cloud: PointCloud, m: int, seed: int | None = None,
                          first_index: int | None = None) -> np.ndarray:
    """Select m well-spread center indices by iterative max-min distance.

    The first center is drawn uniformly from a seeded RNG (the cloud's
    seed_hint wins over ``seed``); each later center maximizes its minimum
    distance to the chosen set, ties broken by lowest index.
    ``first_index`` overrides the random first pick, which permutation
    tests use to align runs.
    """
    n = cloud.n_points
    if m < 1 or m > n:
        raise ValueError(f"cannot sample {m} centers from {n} points")
    if first_index is None:
        rng_seed = cloud.seed_hint if cloud.seed_hint is not None else seed
        rng = np.random.default_rng(rng_seed)
        first_index = int(rng.integers(n))

    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first_index
    dists = np.linalg.norm(cloud.coords - cloud.coords[first_index], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dists))  # argmax returns the lowest tying index
        chosen[i] = nxt
        dists = np.minimum(dists, np.linalg.norm(cloud.coords - cloud.coords[nxt], axis=1))
    return chosen


def knn_group(cloud: PointCloud, centers: np.ndarray, k: int) -> PatchSet:
    """Group the k nearest points around each center, coordinates recentered.

    The center is always its own first neighbor (guarantees a zero xyz row
    even when other points share its coordinates); the remaining k-1 slots
    fill by ascending distance, ties broken by lowest index.
    """
    n = cloud.n_points
    if k < 1 or k > n:
        raise ValueError(f"cannot gather {k} neighbors from {n} points")
    centers = np.asarray(centers, dtype=np.int64)
    rows = cloud.rows()
    patches = np.empty((len(centers), k, rows.shape[1]), dtype=np.float64)
    for pi, ci in enumerate(centers):
        d = np.linalg.norm(cloud.coords - cloud.coords[ci], axis=1)
        order = np.argsort(d, kind="stable")
        order = np.concatenate(([ci], order[order != ci]))[:k]
        patch = rows[order].copy()
        patch[:, :3] -= cloud.coords[ci]
        patches[pi] = patch
    return PatchSet(center_indices=centers.copy(), patch_points=patches)


# ----------------------------------------------------------------------
# scene files
# ----------------------------------------------------------------------
def save_scene_binary(path, cloud: PointCloud) -> None:
    rows = cloud.rows().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_PC_MAGIC)
        fh.write(struct.pack("<HII", _PC_VERSION, cloud.n_points, cloud.feature_dim))
        fh.write(rows.tobytes())


def load_scene_binary(path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _PC_MAGIC:
        raise FormatError(f"bad scene magic {blob[:4]!r} at byte 0")
    if len(blob) < 14:
        raise FormatError(f"scene header truncated at byte {len(blob)}")
    version, n, f = struct.unpack_from("<HII", blob, 4)
    if version != _PC_VERSION:
        raise FormatError(f"unsupported scene version {version}")
    width = 3 + f
    floats = np.frombuffer(blob, dtype="<f4", offset=14)
    full_rows = len(floats) // width
    if full_rows < n:
        raise FormatError(
            f"scene truncated at row {full_rows}: header declares {n} rows")
    rows = floats[:n * width].astype(np.float64).reshape(n, width)
    bad = np.flatnonzero(~np.isfinite(rows[:, :3]).all(axis=1))
    if bad.size:
        raise FormatError(f"non-finite coordinate at row {bad[0]}")
    return PointCloud(coords=rows[:, :3], features=rows[:, 3:])


def save_scene_json(path, cloud: PointCloud) -> None:
    doc = {
        "points": cloud.rows().tolist(),
        "feature_dim": cloud.feature_dim,
        "objects": [
            {
                "id": obj.object_id,
                "box": obj.aabb.tolist(),
                "labels": sorted(obj.labels),
                "captions": list(obj.reference_captions),
            }
            for obj in cloud.objects
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene_json(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"scene JSON parse error: {exc}") from exc
    try:
        f = int(doc["feature_dim"])
        points = doc["points"]
    except KeyError as exc:
        raise FormatError(f"scene JSON missing key {exc}") from exc
    rows = np.empty((len(points), 3 + f), dtype=np.float64)
    for i, row in enumerate(points):
        if len(row) != 3 + f:
            raise FormatError(
                f"scene row {i} has {len(row)} values, expected {3 + f}")
        rows[i] = row
    if rows.size and not np.all(np.isfinite(rows[:, :3])):
        bad = int(np.flatnonzero(~np.isfinite(rows[:, :3]).all(axis=1))[0])
        raise FormatError(f"non-finite coordinate at row {bad}")
    objects = []
    for rec in doc.get("objects", []):
        try:
            objects.append(AnnotatedObject(
                object_id=str(rec["id"]),
                aabb=rec["box"],
                labels=set(rec.get("labels", [])),
                reference_captions=list(rec.get("captions", [])),
            ))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad object record: {exc}") from exc
    return PointCloud(coords=rows[:, :3], features=rows[:, 3:], objects=objects)


def load_scene(path) -> PointCloud:
    """Dispatch on content: binary magic first, JSON otherwise."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _PC_MAGIC:
        return load_scene_binary(path)
    return load_scene_json(path)
