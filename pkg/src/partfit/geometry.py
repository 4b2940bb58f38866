"""Pure point-cloud math: chamfer distance, normalization, principal axes,
canonical alignment and axis-aligned boxes.

All functions are pure and operate on ``(N, 3)`` float arrays. Nothing here
owns state, so everything is safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneratePartError, InvalidInputError

# Above this cloud size nearest-neighbor queries switch from the brute-force
# scan to a k-d tree. Results are identical either way; the squared distance
# of the winning pair is always recomputed from coordinates.
BRUTE_FORCE_LIMIT = 512


class AxisKind(IntEnum):
    ELONGATED = 0
    PLANAR = 1


# Axis-ratio threshold separating rod-like from sheet-like parts:
# elongated iff lambda1 > ELONGATION_RATIO * lambda2.
ELONGATION_RATIO = 2.0


@dataclass
class PoseMeta:
    """Original-frame placement of a normalized part.

    ``axis``/``axis_kind`` may be unset for freshly normalized clouds and are
    filled in once the canonical axis has been computed.
    """

    centroid: np.ndarray
    scale: float
    axis: Optional[np.ndarray] = None
    axis_kind: Optional[AxisKind] = None

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if self.scale <= 0.0:
            raise InvalidInputError("pose scale must be positive")
        if self.axis is not None:
            self.axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
            if abs(np.linalg.norm(self.axis) - 1.0) > 1e-6:
                raise InvalidInputError("pose axis must be unit length")


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64).reshape(3))
        if np.any(self.min > self.max):
            raise InvalidInputError("aabb min must be <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))


def as_cloud(points) -> np.ndarray:
    """Validate and return points as an ``(N, 3)`` float64 array."""
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
        raise InvalidInputError(f"expected (N, 3) points, got shape {cloud.shape}")
    if not np.isfinite(cloud).all():
        raise InvalidInputError("point coordinates must be finite")
    return cloud


def _nearest_indices(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor index pairs in both directions.

    Below the size limit a single Gram-matrix pass serves both directions;
    above it, k-d trees. The winning squared distances are always
    recomputed from coordinates, so both backends return identical values.
    """
    if max(len(p), len(q)) < BRUTE_FORCE_LIMIT:
        d2 = (p * p).sum(axis=1)[:, None] + (q * q).sum(axis=1)[None, :]
        d2 -= 2.0 * (p @ q.T)
        return np.argmin(d2, axis=1), np.argmin(d2, axis=0)
    return cKDTree(q).query(p)[1], cKDTree(p).query(q)[1]


def chamfer_distance(p, q, reduction: str = "mean") -> float:
    """Symmetric chamfer distance between two clouds.

    ``sum`` adds the squared nearest-neighbor distances in both directions;
    ``mean`` divides each directed sum by its source cloud's cardinality so
    clouds of different sizes contribute comparably. Arguments are ordered
    canonically first, which makes symmetry exact rather than approximate.
    """
    p = as_cloud(p)
    q = as_cloud(q)
    if reduction not in ("sum", "mean"):
        raise InvalidInputError(f"unknown reduction {reduction!r}")
    swapped = (len(p), p.tobytes()) > (len(q), q.tobytes())
    a, b = (q, p) if swapped else (p, q)
    idx_ab, idx_ba = _nearest_indices(a, b)
    d_ab = ((a - b[idx_ab]) ** 2).sum(axis=1)
    d_ba = ((b - a[idx_ba]) ** 2).sum(axis=1)
    if reduction == "sum":
        return float(d_ab.sum() + d_ba.sum())
    return float(d_ab.mean() + d_ba.mean())


def normalize_part(points) -> tuple[np.ndarray, PoseMeta]:
    """Center a cloud at the origin and scale it into the unit ball.

    The returned pose records the original centroid and scale, so
    ``denormalize_part`` inverts the transform exactly.
    """
    cloud = as_cloud(points)
    centroid = cloud.mean(axis=0)
    shifted = cloud - centroid
    scale = float(np.linalg.norm(shifted, axis=1).max())
    if scale < 1e-12:
        raise DegeneratePartError("all points coincident, cannot normalize")
    return shifted / scale, PoseMeta(centroid=centroid, scale=scale)


def denormalize_part(cloud, pose: PoseMeta) -> np.ndarray:
    return as_cloud(cloud) * pose.scale + pose.centroid


def principal_axes(points) -> list[tuple[float, np.ndarray]]:
    """Eigenpairs of the point covariance, descending by eigenvalue.

    Eigenvectors are orthonormal; signs are as returned by the solver (use
    ``canonical_axis`` for a sign-fixed direction).
    """
    cloud = as_cloud(points)
    if len(cloud) < 3:
        raise InvalidInputError("principal axes need at least 3 points")
    centered = cloud - cloud.mean(axis=0)
    cov = centered.T @ centered / len(cloud)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[-1] < 1e-18:
        raise InvalidInputError("all points coincident, covariance is zero")
    order = np.argsort(eigvals)[::-1]
    return [(float(eigvals[i]), eigvecs[:, i].copy()) for i in order]


def classify_axis_kind(eigenvalues, ratio: float = ELONGATION_RATIO) -> AxisKind:
    """Rod-like (elongated) versus sheet-like (planar) from sorted eigenvalues."""
    ev = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(ev < 0) or np.any(np.diff(ev) > 1e-12):
        raise InvalidInputError("eigenvalues must be sorted descending and non-negative")
    return AxisKind.ELONGATED if ev[0] > ratio * ev[1] else AxisKind.PLANAR


def canonical_axis(points) -> tuple[np.ndarray, AxisKind]:
    """Per-part alignment direction: the dominant principal component for
    elongated parts, the surface normal (smallest component) for planar ones.

    The sign is fixed so the largest-magnitude component is positive, which
    makes downstream alignment deterministic.
    """
    pairs = principal_axes(points)
    kind = classify_axis_kind([ev for ev, _ in pairs])
    vec = pairs[0][1] if kind == AxisKind.ELONGATED else pairs[-1][1]
    pivot = int(np.argmax(np.abs(vec)))
    if vec[pivot] < 0:
        vec = -vec
    return vec, kind


def rotation_between(a, b) -> np.ndarray:
    """Rotation matrix taking unit vector ``a`` onto unit vector ``b``.

    The antiparallel case rotates pi about an arbitrary axis perpendicular
    to ``a``, chosen deterministically.
    """
    a = np.asarray(a, dtype=np.float64).reshape(3)
    b = np.asarray(b, dtype=np.float64).reshape(3)
    for name, v in (("a", a), ("b", b)):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise InvalidInputError(f"vector {name} must be unit length")
    c = float(np.dot(a, b))
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        # Pi rotation about any axis perpendicular to a: pick the basis
        # vector least aligned with a to build one.
        basis = np.eye(3)[int(np.argmin(np.abs(a)))]
        u = np.cross(a, basis)
        u /= np.linalg.norm(u)
        return 2.0 * np.outer(u, u) - np.eye(3)
    v = np.cross(a, b)
    vx = np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def align_cloud(cloud, axis, target_axis) -> np.ndarray:
    """Rotate a cloud so its saved axis lands on ``target_axis``."""
    rot = rotation_between(axis, target_axis)
    return as_cloud(cloud) @ rot.T


def aligned_chamfer(cloud_a, axis_a, cloud_b, axis_b, reduction: str = "mean") -> float:
    """Chamfer distance after rotating b's canonical axis onto a's.

    Canonically-oriented comparison; both clouds are expected to be
    normalized already.
    """
    rotated_b = align_cloud(cloud_b, axis_b, axis_a)
    return chamfer_distance(cloud_a, rotated_b, reduction=reduction)


def aabb(points) -> Aabb:
    cloud = as_cloud(points)
    return Aabb(cloud.min(axis=0), cloud.max(axis=0))


def scale_box(box: Aabb, factor: float) -> Aabb:
    """Expand (or shrink) a box about its center."""
    if factor <= 0:
        raise InvalidInputError("scale factor must be positive")
    half = 0.5 * (box.max - box.min) * factor
    return Aabb(box.center - half, box.center + half)


def crop(points, box: Aabb) -> np.ndarray:
    """Points inside the closed box. May be empty; emptiness is a signal,
    not an error."""
    cloud = as_cloud(points)
    mask = np.all((cloud >= box.min) & (cloud <= box.max), axis=1)
    return cloud[mask]
