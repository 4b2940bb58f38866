"""Completion-then-retrieve baselines and the evaluation harness.

Published completion networks are out of scope at desk scale; a seeded
surrogate stands in for them, producing the missing part's points with
quality dialed by a jitter level (plus point dropping and bounding-box
outliers, the failure modes completion models actually exhibit). The
baselines then retrieve by raw chamfer distance or by encoder feature
distance, and the harness compares them against context ranking.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import geometry as geo
from . import relnet as rn
from . import retrieval as rv
from . import simloss as sl
from .dataprep import Part
from .errors import InvalidInputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurrogateConfig:
    sigma: float = 0.0
    drop_fraction: float = 0.0
    outlier_fraction: float = 0.0
    bbox_factor: float = 1.1

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidInputError("sigma must be >= 0")
        for frac in (self.drop_fraction, self.outlier_fraction):
            if not 0.0 <= frac < 1.0:
                raise InvalidInputError("fractions must be in [0, 1)")
        if self.bbox_factor <= 0:
            raise InvalidInputError("bbox factor must be positive")


@dataclass(frozen=True)
class EvalRow:
    method: str
    mean_cd: float
    mean_time: float
    samples: int


def surrogate_complete(context_points, true_part_points, config: SurrogateConfig,
                       seed: int) -> np.ndarray:
    """Oracle stand-in for a completion network.

    ``context_points`` (the object minus the part) is what a real completion
    model would consume; the surrogate ignores it and only needs the ground
    truth it perturbs: jitter, random point drops, and outliers.
    """
    truth = geo.as_cloud(true_part_points)
    rng = np.random.default_rng(seed)
    pts = truth + rng.normal(scale=config.sigma, size=truth.shape) if config.sigma > 0 \
        else truth.copy()
    n = len(pts)
    n_drop = min(int(config.drop_fraction * n), n - 1)
    if n_drop > 0:
        keep = np.sort(rng.choice(n, size=n - n_drop, replace=False))
        pts = pts[keep]
    n_out = int(config.outlier_fraction * n)
    if n_out > 0:
        # outliers spill past the ROI crop box so cropping has work to do
        box = geo.scale_box(geo.aabb(truth), config.bbox_factor * 2.0)
        outliers = rng.uniform(box.min, box.max, size=(n_out, 3))
        pts = np.concatenate([pts, outliers])
    return pts


def crop_to_roi(completed_points, missing_box: geo.Aabb, factor: float) -> np.ndarray:
    """Points of the completed cloud inside the scaled region of interest.
    May be empty; callers treat emptiness as a skip signal."""
    if factor < 1.0:
        raise InvalidInputError("roi factor must be >= 1")
    return geo.crop(completed_points, geo.scale_box(missing_box, factor))


def retrieve_by_chamfer(query_points, warehouse: list[Part], k: int) -> list[tuple[Part, float]]:
    """Rank warehouse parts by chamfer distance to the query region, both
    sides normalized and axis-aligned first. Ascending, part-id tie-break."""
    if not warehouse:
        raise InvalidInputError("warehouse is empty")
    cloud, _ = geo.normalize_part(query_points)
    axis, _ = geo.canonical_axis(cloud)
    scored = []
    for part in warehouse:
        d = geo.aligned_chamfer(cloud, axis, part.cloud, part.pose.axis,
                                reduction=sl.CHAMFER_REDUCTION)
        scored.append((d, part.part_id, part))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [(part, d) for d, _, part in scored[:k]]


def retrieve_by_feature(query_points, enc_params: dict, index: rv.WarehouseIndex,
                        k: int) -> list[tuple[int, float]]:
    """Rank indexed parts by Euclidean distance in feature space. Returns
    (part_id, distance) pairs, ascending."""
    cloud, _ = geo.normalize_part(query_points)
    query = enc.encode_part(cloud, enc_params).astype(np.float32)
    dists = np.linalg.norm(index.features.astype(np.float64) -
                           query.astype(np.float64), axis=1)
    order = np.lexsort((index.part_ids, dists))
    return [(int(index.part_ids[i]), float(dists[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# evaluation harness


def part_cd(retrieved: Part, original: Part) -> float:
    """Reporting metric: normalized, axis-aligned mean chamfer distance."""
    return sl.part_distance(original, retrieved)


def evaluate_all(items, index: rv.WarehouseIndex, bundle: rn.ModelBundle,
                 warehouse: list[Part], seed: int, n_queries: int = 100,
                 sigmas=(0.0, 0.05, 0.1),
                 drop_fraction: float = 0.1, outlier_fraction: float = 0.05,
                 roi_factor: float = 1.1) -> tuple[list[EvalRow], dict]:
    """One random part removed per query; every method retrieves a
    replacement and is charged the chamfer distance to the original.

    Samples where any method fails (empty crop, degenerate region) are
    excluded pairwise so means stay comparable. Wall time is measured per
    sample on the calling thread.
    """
    if not items:
        raise InvalidInputError("no evaluation items")
    by_id = {p.part_id: p for p in warehouse}
    rng = np.random.default_rng(seed)
    methods = ["context"]
    for s in sigmas:
        methods.append(f"chamfer(sigma={s:.2f})")
    for s in sigmas:
        methods.append(f"feature(sigma={s:.2f})")

    records: dict[str, list] = {m: [] for m in methods}
    times: dict[str, list] = {m: [] for m in methods}
    excluded = 0
    for q in range(n_queries):
        item = items[int(rng.integers(0, len(items)))]
        removed = item.parts[int(rng.integers(0, len(item.parts)))]
        truth_points = geo.denormalize_part(removed.cloud, removed.pose)
        roi = geo.aabb(truth_points)
        context = rv.context_from_item(item, index, skip_ids=[removed.part_id])
        slot = rv.SlotTarget(centroid=removed.pose.centroid, axis=removed.pose.axis,
                             scale=removed.pose.scale)
        sample_cd: dict[str, float] = {}
        sample_time: dict[str, float] = {}
        ok = True

        t0 = time.perf_counter()
        top = rv.rank_candidates(context, slot, item.object_class, index, bundle, k=1)
        sample_time["context"] = time.perf_counter() - t0
        sample_cd["context"] = part_cd(by_id[top[0].part_id], removed)

        for s in sigmas:
            cfg = SurrogateConfig(sigma=s, drop_fraction=drop_fraction,
                                  outlier_fraction=outlier_fraction, bbox_factor=roi_factor)
            surrogate = surrogate_complete(None, truth_points, cfg,
                                           seed=seed * 100003 + q)
            region = crop_to_roi(surrogate, roi, roi_factor)
            if len(region) < 3:
                log.warning("query %d sigma %.2f: empty/degenerate crop, sample skipped", q, s)
                ok = False
                break
            t0 = time.perf_counter()
            hits = retrieve_by_chamfer(region, warehouse, k=1)
            sample_time[f"chamfer(sigma={s:.2f})"] = time.perf_counter() - t0
            sample_cd[f"chamfer(sigma={s:.2f})"] = part_cd(hits[0][0], removed)

            t0 = time.perf_counter()
            feats = retrieve_by_feature(region, bundle.enc_params, index, k=1)
            sample_time[f"feature(sigma={s:.2f})"] = time.perf_counter() - t0
            sample_cd[f"feature(sigma={s:.2f})"] = part_cd(by_id[feats[0][0]], removed)

        if not ok:
            excluded += 1
            continue
        for m in methods:
            records[m].append(sample_cd[m])
            times[m].append(sample_time[m])

    rows = [EvalRow(method=m,
                    mean_cd=float(np.mean(records[m])) if records[m] else float("nan"),
                    mean_time=float(np.mean(times[m])) if times[m] else float("nan"),
                    samples=len(records[m]))
            for m in methods]
    info = {"excluded": excluded, "n_queries": n_queries, "sigmas": list(sigmas),
            "seed": seed}
    return rows, info
