"""Stage-1 objective: dot-product similarity against a hybrid label/chamfer
target matrix, with a steepness curriculum.

Same-label pairs get a hard target of 1. Cross-label pairs get a soft
target from a decaying exponential kernel over their chamfer distance,
anchored at the dataset's matched/mismatched mean distances (d_low/d_high).
The kernel steepness k grows during training, sharpening the transition
from "similar" to "dissimilar".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from . import geometry as geo
from .errors import ContractViolationError, DegenerateStatsError, InvalidInputError

# Chamfer conventions for every statistic aggregated across parts: mean
# reduction (cardinality-independent) on normalized, axis-aligned clouds.
CHAMFER_REDUCTION = "mean"


@dataclass(frozen=True)
class DistanceStats:
    """Mean chamfer distances of matched / mismatched part pairs."""

    d_low: float
    d_high: float
    subset_size: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.d_low < self.d_high:
            raise DegenerateStatsError(
                f"need 0 <= d_low < d_high, got ({self.d_low}, {self.d_high})")

    def to_dict(self) -> dict:
        return {"d_low": self.d_low, "d_high": self.d_high,
                "subset_size": self.subset_size, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "DistanceStats":
        return DistanceStats(d["d_low"], d["d_high"], d["subset_size"], d["seed"])


@dataclass(frozen=True)
class SteepnessSchedule:
    """Linear ramp of the kernel steepness over stage-1 epochs."""

    k_start: float = 1.0
    k_end: float = 10.0
    total_epochs: int = 49

    def __post_init__(self):
        if not 0 < self.k_start <= self.k_end:
            raise InvalidInputError("need 0 < k_start <= k_end")
        if self.total_epochs < 0:
            raise InvalidInputError("total_epochs must be >= 0")


def steepness_at(epoch: int, schedule: SteepnessSchedule) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise InvalidInputError("epoch outside the schedule")
    if schedule.total_epochs == 0:
        return schedule.k_start
    t = epoch / schedule.total_epochs
    return schedule.k_start + (schedule.k_end - schedule.k_start) * t


def part_distance(part_a, part_b) -> float:
    """Canonical part-to-part distance: chamfer on normalized clouds after
    rotating b's saved axis onto a's."""
    return geo.aligned_chamfer(part_a.cloud, part_a.pose.axis,
                               part_b.cloud, part_b.pose.axis,
                               reduction=CHAMFER_REDUCTION)


def estimate_distance_stats(warehouse, subset_size: int, seed: int) -> DistanceStats:
    """Sample matched and mismatched part pairs uniformly and average their
    chamfer distances."""
    if subset_size < 2:
        raise InvalidInputError("subset_size must be >= 2")
    labels = [p.part_label for p in warehouse]
    label_counts = {}
    for lab in labels:
        label_counts[lab] = label_counts.get(lab, 0) + 1
    if len(label_counts) < 2:
        raise DegenerateStatsError("cannot estimate stats from a single part label")
    if max(label_counts.values()) < 2:
        raise DegenerateStatsError("no label has two parts, no matched pairs exist")

    rng = np.random.default_rng(seed)
    matched, mismatched = [], []
    budget = 200 * subset_size
    n = len(warehouse)
    while (len(matched) < subset_size or len(mismatched) < subset_size) and budget > 0:
        budget -= 1
        i, j = rng.integers(0, n), rng.integers(0, n)
        if i == j:
            continue
        bucket = matched if labels[i] == labels[j] else mismatched
        if len(bucket) < subset_size:
            bucket.append((int(i), int(j)))
    if len(matched) < subset_size or len(mismatched) < subset_size:
        raise DegenerateStatsError("could not sample enough pairs")

    d_low = float(np.mean([part_distance(warehouse[i], warehouse[j]) for i, j in matched]))
    d_high = float(np.mean([part_distance(warehouse[i], warehouse[j]) for i, j in mismatched]))
    return DistanceStats(d_low=d_low, d_high=d_high, subset_size=subset_size, seed=seed)


def soft_target(d_ij: float, k: float, stats: DistanceStats) -> float:
    """Chamfer kernel mapping [d_low, d_high] onto [1, 0].

    Distances are clamped into the anchor interval first; the raw formula
    leaves [0, 1] outside it.
    """
    if k <= 0:
        raise InvalidInputError("steepness k must be positive")
    d = float(np.clip(d_ij, stats.d_low, stats.d_high))
    # (e^{k d_high} - e^{k d}) / (e^{k d_high} - e^{k d_low}), computed with
    # non-positive exponents to stay overflow-free at large k.
    num = 1.0 - np.exp(k * (d - stats.d_high))
    den = 1.0 - np.exp(k * (stats.d_low - stats.d_high))
    return float(num / den)


def build_target_matrix(parts, labels, k: float, stats: DistanceStats,
                        pair_cache: dict | None = None) -> np.ndarray:
    """Ground-truth similarity matrix: 1 for same-label pairs, the chamfer
    kernel value otherwise. Symmetric with unit diagonal by construction."""
    n = len(parts)
    if n < 2:
        raise InvalidInputError("batch must hold at least 2 parts")
    if len(labels) != n:
        raise InvalidInputError("one label per part required")
    target = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] == labels[j]:
                continue
            if pair_cache is not None:
                key = (min(parts[i].part_id, parts[j].part_id),
                       max(parts[i].part_id, parts[j].part_id))
                d = pair_cache.get(key)
                if d is None:
                    d = part_distance(parts[i], parts[j])
                    pair_cache[key] = d
            else:
                d = part_distance(parts[i], parts[j])
            g = soft_target(d, k, stats)
            target[i, j] = g
            target[j, i] = g
    return target


def similarity_loss(features: gc.Tensor, target: np.ndarray) -> gc.Tensor:
    """Mean squared difference between the feature dot-product matrix and the
    target matrix; differentiable through the features."""
    norms = np.linalg.norm(features.value, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ContractViolationError("similarity_loss requires unit-norm features")
    sim = gc.matmul(features, gc.transpose(features))
    return gc.squared_error(sim, target)
