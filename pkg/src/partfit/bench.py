"""Warehouse-scoring throughput probe.

Tiles a real index up to the requested candidate count and times one full
ranking pass (token assembly, batched transformer forward, suitability
sort) against a synthetic multi-part query. Run as a module so thread
counts can be pinned via environment variables before numpy loads:

    OMP_NUM_THREADS=1 python3 -m partfit.bench --model m.ckpt --index w.pfix \
        --candidates 10000 --parts 10 --workers 1
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from . import relnet as rn
from . import retrieval as rv


def tiled_index(index: rv.WarehouseIndex, n_candidates: int) -> rv.WarehouseIndex:
    reps = int(np.ceil(n_candidates / len(index)))

    def tile(arr):
        return np.concatenate([arr] * reps)[:n_candidates]

    return rv.WarehouseIndex(
        part_ids=np.arange(1, n_candidates + 1, dtype=np.uint64),
        features=tile(index.features),
        centroids=tile(index.centroids),
        scales=tile(index.scales),
        axes=tile(index.axes),
        axis_kinds=tile(index.axis_kinds),
        part_labels=tile(index.part_labels),
        object_classes=tile(index.object_classes),
        encoder_hash=index.encoder_hash,
    )


def synthetic_context(bundle: rn.ModelBundle, n_parts: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    d = bundle.rel_config.feature_dim
    parts = []
    for i in range(n_parts):
        f = rng.normal(size=d)
        f /= np.linalg.norm(f)
        parts.append(rv.ContextPart(feature=f.astype(np.float32),
                                    centroid=rng.uniform(-0.5, 0.5, size=3),
                                    scale=float(rng.uniform(0.1, 0.5)),
                                    part_id=i + 1))
    slot = rv.SlotTarget(centroid=rng.uniform(-0.5, 0.5, size=3))
    return parts, slot


def throughput_probe(model_path, index_path, n_candidates: int, n_parts: int,
                     workers: int, k: int = 10, seed: int = 0) -> dict:
    bundle = rn.load_model(model_path)
    index = tiled_index(rv.load_index(index_path), n_candidates)
    context, slot = synthetic_context(bundle, n_parts, seed=seed)
    # warm-up pass so BLAS initialization is not billed to the measurement
    rv.rank_candidates(context, slot, 0, tiled_index(index, 256), bundle, k=k,
                       workers=workers)
    t0 = time.perf_counter()
    top = rv.rank_candidates(context, slot, 0, index, bundle, k=k, workers=workers)
    elapsed = time.perf_counter() - t0
    return {
        "elapsed_s": elapsed,
        "candidates": n_candidates,
        "parts": n_parts,
        "workers": workers,
        "k": len(top),
        "top1": top[0].part_id,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description="rank-candidates throughput probe")
    parser.add_argument("--model", required=True)
    parser.add_argument("--index", required=True)
    parser.add_argument("--candidates", type=int, default=10000)
    parser.add_argument("--parts", type=int, default=10)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    result = throughput_probe(args.model, args.index, args.candidates, args.parts,
                              args.workers, seed=args.seed)
    print(json.dumps(result))


if __name__ == "__main__":
    main()
