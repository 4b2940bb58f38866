"""Dataset preparation: DBSCAN part splitting, small-part filtering, pose
extraction, the synthetic procedural corpus, and the part bundle file format.

Raw objects arrive as labeled point groups (a "legs" group may hold several
fused legs). Preparation splits groups by density, drops degenerate
fragments, normalizes every part, attaches pose metadata, and registers the
results in two views: *items* (whole objects, the query side) and the
*warehouse* (the flat pool of spare parts, the candidate side).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .errors import (
    BadMagicError,
    ConfigError,
    InvalidInputError,
    TruncatedFileError,
    VersionMismatchError,
)

log = logging.getLogger(__name__)

NOISE = -1

# Group splitting defaults: eps as a fraction of the group's aabb diagonal,
# so the threshold adapts to object scale.
SPLIT_EPS_FRACTION = 0.05
SPLIT_MIN_PTS = 5
MIN_PART_POINTS = 10


@dataclass
class Part:
    """A normalized part plus the pose that maps it back to its object."""

    cloud: np.ndarray
    pose: geo.PoseMeta
    part_label: int
    object_class: int
    source_object: str
    part_id: int


@dataclass
class ObjectAssembly:
    object_class: int
    parts: list[Part]
    object_id: str


@dataclass
class RawObject:
    """Generator/scanner output: labeled point groups in the object frame."""

    object_id: str
    class_name: str
    groups: list[tuple[str, np.ndarray]]


@dataclass
class DatasetPair:
    items: list[ObjectAssembly]
    warehouse: list[Part]
    class_names: list[str]
    part_label_names: list[str]
    splits: dict = field(default_factory=dict)

    def class_id(self, name: str) -> int:
        return self.class_names.index(name)


# ---------------------------------------------------------------------------
# clustering


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; returns a per-point cluster id, -1 for noise.

    A point is a core point when its eps-neighborhood (itself included)
    holds at least ``min_pts`` points. Clusters are the connected components
    of core points; border points join the lowest-id adjacent cluster.
    """
    cloud = geo.as_cloud(points)
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    if min_pts < 1:
        raise InvalidInputError("min_pts must be >= 1")
    n = len(cloud)
    tree = cKDTree(cloud)
    neighbors = tree.query_ball_point(cloud, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = cluster
        frontier = [i]
        while frontier:
            j = frontier.pop()
            for k in neighbors[j]:
                if core[k] and labels[k] == NOISE:
                    labels[k] = cluster
                    frontier.append(k)
        cluster += 1

    # Border points: non-core with at least one core neighbor; ties go to
    # the lowest cluster id.
    for i in range(n):
        if core[i] or labels[i] != NOISE:
            continue
        adjacent = [labels[k] for k in neighbors[i] if core[k]]
        if adjacent:
            labels[i] = min(adjacent)
    return labels


def split_part_group(group, eps_fraction: float = SPLIT_EPS_FRACTION,
                     min_pts: int = SPLIT_MIN_PTS) -> list[np.ndarray]:
    """Split a fused point group into its density-connected components.

    Noise points are absorbed into the nearest cluster by centroid distance
    rather than dropped; losing surface coverage hurts more than a few
    misassigned points.
    """
    cloud = geo.as_cloud(group)
    eps = eps_fraction * geo.aabb(cloud).diagonal
    if eps <= 0:
        return [cloud]
    labels = dbscan(cloud, eps, min_pts)
    ids = sorted(set(labels[labels != NOISE]))
    if not ids:
        return [cloud]
    centroids = np.stack([cloud[labels == cid].mean(axis=0) for cid in ids])
    out = labels.copy()
    noise_idx = np.flatnonzero(labels == NOISE)
    for i in noise_idx:
        d2 = ((centroids - cloud[i]) ** 2).sum(axis=1)
        out[i] = ids[int(np.argmin(d2))]
    return [cloud[out == cid] for cid in ids]


def filter_small_parts(parts, min_points: int = MIN_PART_POINTS) -> list[np.ndarray]:
    """Keep clouds with at least ``min_points`` points, order preserved."""
    if min_points < 1:
        raise InvalidInputError("min_points must be >= 1")
    return [p for p in parts if len(p) >= min_points]


# ---------------------------------------------------------------------------
# dataset building


def subsample(points, max_points: int) -> np.ndarray:
    """Deterministic stride subsample down to at most ``max_points``."""
    cloud = geo.as_cloud(points)
    if len(cloud) <= max_points:
        return cloud
    idx = np.linspace(0, len(cloud) - 1, max_points).round().astype(int)
    return cloud[idx]


def make_part(points, part_label: int, object_class: int, source_object: str,
              part_id: int) -> Part:
    """Normalize a cloud, compute its canonical axis, and wrap it as a Part.

    Values are quantized to float32 precision so an in-memory Part equals
    its bundle-file round trip bit for bit.
    """
    cloud, pose = geo.normalize_part(points)
    axis, kind = geo.canonical_axis(cloud)
    q = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    pose = geo.PoseMeta(centroid=q(pose.centroid), scale=float(np.float32(pose.scale)),
                        axis=q(axis), axis_kind=kind)
    return Part(cloud=q(cloud), pose=pose, part_label=part_label,
                object_class=object_class, source_object=source_object,
                part_id=part_id)


def build_datasets(raw_objects: list[RawObject], seed: int = 0,
                   eps_fraction: float = SPLIT_EPS_FRACTION,
                   min_pts: int = SPLIT_MIN_PTS,
                   min_part_points: int = MIN_PART_POINTS,
                   max_part_points: int = 256,
                   test_fraction: float = 0.2) -> DatasetPair:
    """Split, filter, normalize and register every raw object.

    Objects reduced to fewer than two parts are excluded from items but
    their parts still enter the warehouse. Stored parts are stride-capped at
    ``max_part_points``; raw groups keep full density for splitting.
    Deterministic for a fixed seed.
    """
    class_names = sorted({r.class_name for r in raw_objects})
    if len(class_names) < 2:
        raise ConfigError("need at least 2 object classes")
    label_names = sorted({f"{r.class_name}/{g_label}" for r in raw_objects for g_label, _ in r.groups})

    items: list[ObjectAssembly] = []
    warehouse: list[Part] = []
    next_id = 1
    for raw in raw_objects:
        class_id = class_names.index(raw.class_name)
        parts: list[Part] = []
        for group_label, group_points in raw.groups:
            label_id = label_names.index(f"{raw.class_name}/{group_label}")
            clouds = filter_small_parts(
                split_part_group(group_points, eps_fraction, min_pts), min_part_points)
            for cloud in clouds:
                cloud = subsample(cloud, max_part_points)
                parts.append(make_part(cloud, label_id, class_id, raw.object_id, next_id))
                next_id += 1
        warehouse.extend(parts)
        if len(parts) >= 2:
            items.append(ObjectAssembly(object_class=class_id, parts=parts,
                                        object_id=raw.object_id))
        else:
            log.warning("object %s reduced to %d part(s); kept in warehouse only",
                        raw.object_id, len(parts))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    n_test = int(round(test_fraction * len(items)))
    test_ids = sorted(items[i].object_id for i in order[:n_test])
    train_ids = sorted(items[i].object_id for i in order[n_test:])
    splits = {"train": train_ids, "test": test_ids}
    return DatasetPair(items=items, warehouse=warehouse, class_names=class_names,
                       part_label_names=label_names, splits=splits)


# ---------------------------------------------------------------------------
# synthetic corpus

BUILTIN_CLASSES = ("table", "chair", "plane")

# Sampling density is tied to the splitting rule: with eps at 5% of a
# group's aabb diagonal and min_pts = 5, a part stays density-connected
# when its point spacing is about half of eps.
_SPACING_FACTOR = 0.5
_MIN_PART_SAMPLES = 96
_MAX_PART_SAMPLES = 3000
_GAP_MARGIN = 1.7


@dataclass
class _Draft:
    """One true part before sampling: primitive, dims, object-frame offset."""

    label: str
    kind: str  # "box", "cyl" (z-aligned) or "cylx" (x-aligned)
    dims: tuple
    offset: np.ndarray

    @property
    def area(self) -> float:
        if self.kind == "box":
            ex, ey, ez = self.dims
            return 2.0 * (ex * ey + ey * ez + ex * ez)
        radius, height = self.dims
        return 2 * np.pi * radius * height + 2 * np.pi * radius ** 2

    @property
    def longest(self) -> float:
        if self.kind == "box":
            return max(self.dims)
        return max(2 * self.dims[0], self.dims[1])


def _sample_box_surface(rng, extents, n) -> np.ndarray:
    """Uniform points on the surface of an axis-aligned box at the origin."""
    ext = np.asarray(extents, dtype=np.float64)
    ex, ey, ez = ext
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    axis = faces // 2
    side = np.where(faces % 2 == 0, 0.5, -0.5)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = side[sel] * ext[a]
        pts[sel, others[0]] = uv[sel, 0] * ext[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * ext[others[1]]
    return pts


def _sample_cylinder_surface(rng, radius, height, n) -> np.ndarray:
    """Uniform points on a z-aligned cylinder (lateral surface plus caps)."""
    lateral = 2 * np.pi * radius * height
    caps = 2 * np.pi * radius ** 2
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    ns = int(on_side.sum())
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-0.5, 0.5, size=ns) * height
    nc = n - ns
    r = radius * np.sqrt(rng.uniform(size=nc))
    pts[~on_side, 0] = r * np.cos(theta[~on_side])
    pts[~on_side, 1] = r * np.sin(theta[~on_side])
    pts[~on_side, 2] = np.where(rng.uniform(size=nc) < 0.5, height / 2, -height / 2)
    return pts


def _random_rotation(rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _axis_angle_rotation(axis, angle) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _sample_draft(rng, draft: _Draft, n: int) -> np.ndarray:
    if draft.kind == "box":
        pts = _sample_box_surface(rng, draft.dims, n)
    else:
        pts = _sample_cylinder_surface(rng, draft.dims[0], draft.dims[1], n)
        if draft.kind == "cylx":
            pts = pts[:, [2, 0, 1]]
    return pts + draft.offset


def _make_table(rng) -> list[_Draft]:
    n_legs = int(rng.integers(3, 6))
    width = rng.uniform(0.6, 0.9)
    depth = width * rng.uniform(0.85, 1.15)
    height = rng.uniform(0.5, 0.7)
    drafts = [_Draft("top", "box", (width, depth, rng.uniform(0.03, 0.06)),
                     np.array([0.0, 0.0, height]))]
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1), (0, 0)][:n_legs]
    for cx, cy in corners:
        drafts.append(_Draft("leg", "cyl", (rng.uniform(0.02, 0.04), height),
                             np.array([cx * 0.42 * width, cy * 0.42 * depth, height / 2])))
    return drafts


def _make_chair(rng) -> list[_Draft]:
    n_legs = int(rng.integers(3, 5))
    width = rng.uniform(0.42, 0.55)
    depth = width * rng.uniform(0.9, 1.15)
    seat_h = rng.uniform(0.38, 0.5)
    drafts = [
        _Draft("seat", "box", (width, depth, rng.uniform(0.03, 0.06)),
               np.array([0.0, 0.0, seat_h])),
        _Draft("back", "box", (width, rng.uniform(0.02, 0.04), width * rng.uniform(0.9, 1.15)),
               np.array([0.0, -depth / 2, seat_h + width * 0.6])),
    ]
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)][:n_legs]
    side = rng.uniform(0.03, 0.05)
    for cx, cy in corners:
        drafts.append(_Draft("leg", "box", (side, side, seat_h),
                             np.array([cx * 0.42 * width, cy * 0.42 * depth, seat_h / 2])))
    return drafts


def _make_plane(rng) -> list[_Draft]:
    length = rng.uniform(0.9, 1.3)
    radius = rng.uniform(0.06, 0.1)
    span = rng.uniform(0.8, 1.2)
    chord = rng.uniform(0.18, 0.28)
    drafts = [
        _Draft("fuselage", "cylx", (radius, length), np.array([0.0, 0.0, 0.0])),
    ]
    for side in (-1, 1):
        drafts.append(_Draft("wing", "box", (chord, span / 2, rng.uniform(0.015, 0.03)),
                             np.array([0.1 * length, side * (span / 4 + 1.6 * radius), 0.0])))
    drafts.append(_Draft("tail", "box", (chord * 0.6, rng.uniform(0.015, 0.03), rng.uniform(0.15, 0.25)),
                         np.array([-0.45 * length, 0.0, 0.12])))
    return drafts


_BUILDERS = {"table": _make_table, "chair": _make_chair, "plane": _make_plane}


def _group_eps_floor(drafts: list[_Draft]) -> float:
    """Lower bound on the eps the splitter will use for this group."""
    diag = max(d.longest for d in drafts)
    if len(drafts) > 1:
        offs = np.stack([d.offset for d in drafts])
        pairwise = np.linalg.norm(offs[:, None, :] - offs[None, :, :], axis=2)
        diag = max(diag, float(pairwise.max()))
    return SPLIT_EPS_FRACTION * diag


def _min_gap(parts: list[np.ndarray]) -> float:
    gap = np.inf
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            d2 = ((parts[i][:, None, :] - parts[j][None, :, :]) ** 2).sum(axis=2)
            gap = min(gap, float(np.sqrt(d2.min())))
    return gap


def _rotate_group(rng, parts: list[np.ndarray]) -> list[np.ndarray]:
    """Rotate each part about its centroid without density-bridging the group.

    Full random rotations are retried while any two parts come close enough
    for DBSCAN to merge them; after repeated failures the rotation angles
    shrink until the layout is safe.
    """
    if len(parts) == 1:
        center = parts[0].mean(axis=0)
        return [(parts[0] - center) @ _random_rotation(rng).T + center]
    eps_hint = SPLIT_EPS_FRACTION * geo.aabb(np.concatenate(parts)).diagonal
    for attempt in range(40):
        shrink = 1.0 if attempt < 20 else 0.6 ** (attempt - 19)
        rotated = []
        for pts in parts:
            center = pts.mean(axis=0)
            if shrink >= 1.0:
                rot = _random_rotation(rng)
            else:
                axis = rng.normal(size=3)
                rot = _axis_angle_rotation(axis, shrink * rng.uniform(0, np.pi))
            rotated.append((pts - center) @ rot.T + center)
        eps = max(eps_hint, SPLIT_EPS_FRACTION * geo.aabb(np.concatenate(rotated)).diagonal)
        if _min_gap(rotated) >= _GAP_MARGIN * eps:
            return rotated
    log.warning("group rotation retries exhausted; keeping canonical orientation")
    return parts


def generate_synthetic(class_names, count: int, seed: int) -> list[RawObject]:
    """Procedural desk-scale corpus with ground-truth part labels.

    Objects are canonically oriented; each true part is rotated about its
    own centroid by a seeded random rotation so downstream alignment is
    actually exercised. Same-label parts are fused into one group to force
    DBSCAN splitting. Point counts follow surface area so every part stays
    density-connected under the splitter's eps rule.
    """
    for name in class_names:
        if name not in _BUILDERS:
            raise ConfigError(f"unknown synthetic class {name!r}")
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    objects = []
    for i in range(count):
        class_name = class_names[i % len(class_names)]
        drafts = _BUILDERS[class_name](rng)
        by_label: dict[str, list[_Draft]] = {}
        for d in drafts:
            by_label.setdefault(d.label, []).append(d)
        groups = []
        for label in sorted(by_label):
            members = by_label[label]
            eps_floor = _group_eps_floor(members)
            spacing = _SPACING_FACTOR * eps_floor
            parts = []
            for d in members:
                n = int(np.clip(d.area / spacing ** 2, _MIN_PART_SAMPLES, _MAX_PART_SAMPLES))
                parts.append(_sample_draft(rng, d, n))
            parts = _rotate_group(rng, parts)
            groups.append((label, np.concatenate(parts, axis=0)))
        objects.append(RawObject(object_id=f"{class_name}_{i:04d}",
                                 class_name=class_name, groups=groups))
    return objects


# ---------------------------------------------------------------------------
# part bundle files

PART_MAGIC = b"PREP"
PART_VERSION = 1


def write_part(path, part: Part):
    """Serialize one part bundle (little-endian binary)."""
    cloud32 = np.ascontiguousarray(part.cloud, dtype="<f4")
    if part.pose.axis is None or part.pose.axis_kind is None:
        raise InvalidInputError("part pose must carry a canonical axis")
    with open(path, "wb") as fh:
        fh.write(PART_MAGIC)
        fh.write(struct.pack("<H", PART_VERSION))
        fh.write(struct.pack("<Q", part.part_id))
        fh.write(struct.pack("<H", part.object_class))
        fh.write(struct.pack("<H", part.part_label))
        fh.write(struct.pack("<I", len(part.cloud)))
        fh.write(np.asarray(part.pose.centroid, dtype="<f4").tobytes())
        fh.write(struct.pack("<f", part.pose.scale))
        fh.write(np.asarray(part.pose.axis, dtype="<f4").tobytes())
        fh.write(struct.pack("<B", int(part.pose.axis_kind)))
        fh.write(cloud32.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def read_part(path, source_object: str = "") -> Part:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PART_MAGIC:
            raise BadMagicError(f"not a part bundle: magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != PART_VERSION:
            raise VersionMismatchError(f"unsupported part bundle version {version}")
        (part_id,) = struct.unpack("<Q", _read_exact(fh, 8))
        (object_class,) = struct.unpack("<H", _read_exact(fh, 2))
        (part_label,) = struct.unpack("<H", _read_exact(fh, 2))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        centroid = np.frombuffer(_read_exact(fh, 12), dtype="<f4").astype(np.float64)
        (scale,) = struct.unpack("<f", _read_exact(fh, 4))
        axis = np.frombuffer(_read_exact(fh, 12), dtype="<f4").astype(np.float64)
        (kind,) = struct.unpack("<B", _read_exact(fh, 1))
        cloud = np.frombuffer(_read_exact(fh, 12 * count), dtype="<f4")
        cloud = cloud.reshape(count, 3).astype(np.float64)
    pose = geo.PoseMeta(centroid=centroid, scale=scale, axis=axis,
                        axis_kind=geo.AxisKind(kind))
    return Part(cloud=cloud, pose=pose, part_label=part_label,
                object_class=object_class, source_object=source_object,
                part_id=part_id)


def save_dataset(directory, pair: DatasetPair):
    """Write part bundles plus a JSON manifest describing the dataset."""
    directory = Path(directory)
    parts_dir = directory / "parts"
    parts_dir.mkdir(parents=True, exist_ok=True)
    rel_paths = {}
    for part in pair.warehouse:
        rel = f"parts/{part.part_id:08d}.prep"
        write_part(directory / rel, part)
        rel_paths[part.part_id] = rel
    manifest = {
        "version": 1,
        "classes": pair.class_names,
        "part_labels": pair.part_label_names,
        "items": [
            {
                "object_id": item.object_id,
                "object_class": item.object_class,
                "parts": [rel_paths[p.part_id] for p in item.parts],
            }
            for item in pair.items
        ],
        "warehouse": [rel_paths[p.part_id] for p in pair.warehouse],
        "splits": pair.splits,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(directory) -> DatasetPair:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != 1:
        raise VersionMismatchError("unsupported manifest version")
    parts_by_rel = {}
    warehouse = []
    for rel in manifest["warehouse"]:
        part = read_part(directory / rel)
        parts_by_rel[rel] = part
        warehouse.append(part)
    items = []
    for entry in manifest["items"]:
        parts = [parts_by_rel[rel] for rel in entry["parts"]]
        for p in parts:
            p.source_object = entry["object_id"]
        items.append(ObjectAssembly(object_class=entry["object_class"],
                                    parts=parts, object_id=entry["object_id"]))
    return DatasetPair(items=items, warehouse=warehouse,
                       class_names=manifest["classes"],
                       part_label_names=manifest["part_labels"],
                       splits=manifest.get("splits", {}))
