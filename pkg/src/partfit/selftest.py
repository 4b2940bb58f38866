"""Self-contained invariant suites for the CLI selftest command.

Quick versions of the heavyweight checks the test suite runs: gradient
checks against central finite differences, permutation/padding invariance,
the DBSCAN brute-force oracle, and the closed-form fixtures. Every suite
returns (name, ok, detail) so the CLI can print one line per suite and a
machine-readable exit code.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from . import dataprep as dp
from . import encoder as enc
from . import geometry as geo
from . import gradcore as gc
from . import relnet as rn
from . import simloss as sl


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return g


def gradient_suite(trials: int = 20) -> tuple[bool, str]:
    worst = 0.0
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        rows, cols = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        w = rng.normal(size=(cols, cols))
        target = rng.normal(size=(rows, cols))
        recipe = seed % 3

        def build(x):
            p = gc.parameter(x, "p")
            h = gc.matmul(p, gc.constant(w))
            if recipe == 0:
                h = gc.layer_norm(gc.relu(h))
            elif recipe == 1:
                h = gc.softmax(h)
            else:
                h = gc.unit_rows(gc.add(h, gc.constant(target)))
            return p, gc.squared_error(h, target)

        x0 = rng.normal(size=(rows, cols)) + 0.1
        p, loss = build(x0.copy())
        gc.backward(loss)
        numeric = _fd(lambda x: float(build(x)[1].value), x0.copy())
        denom = max(np.abs(numeric).max(), np.abs(p.grad).max(), 1e-8)
        worst = max(worst, float(np.abs(p.grad - numeric).max() / denom))
    return worst <= 1e-4, f"worst relative error {worst:.2e} over {trials} graphs"


def adam_fixture_suite() -> tuple[bool, str]:
    x = gc.parameter(np.array([1.0]), "x")
    loss = gc.squared_error(x, np.zeros(1))
    gc.backward(loss)
    gc.adam_step([x], gc.AdamState(), lr=0.1)
    err = abs(x.value[0] - 0.9)
    return err <= 1e-9, f"first Adam step error {err:.1e}"


def closed_form_suite() -> tuple[bool, str]:
    checks = []
    checks.append(abs(geo.chamfer_distance([(0, 0, 0)], [(1, 0, 0)], "sum") - 2.0) < 1e-12)
    checks.append(abs(geo.chamfer_distance([(0, 0, 0), (1, 0, 0)], [(0, 0, 0)], "mean") - 0.5) < 1e-12)
    stats = sl.DistanceStats(0.0, 1.0, 1, 0)
    checks.append(abs(sl.soft_target(0.0, 1.0, stats) - 1.0) < 1e-12)
    checks.append(abs(sl.soft_target(1.0, 1.0, stats) - 0.0) < 1e-12)
    expected = (math.e - math.exp(0.5)) / (math.e - 1.0)
    checks.append(abs(sl.soft_target(0.5, 1.0, stats) - expected) < 1e-9)
    f = gc.parameter(np.eye(2), "f")
    checks.append(abs(sl.similarity_loss(f, np.ones((2, 2))).value - 0.5) < 1e-12)
    checks.append(abs(gc.lr_schedule(100, 1000, 100, 1e-3, 1e-5) - 1e-3) < 1e-15)
    checks.append(abs(gc.lr_schedule(1000, 1000, 100, 1e-3, 1e-5) - 1e-5) < 1e-12)
    bad = [i for i, ok in enumerate(checks) if not ok]
    return not bad, "all fixtures match" if not bad else f"fixtures failed: {bad}"


def permutation_suite(cases: int = 15) -> tuple[bool, str]:
    cfg = enc.EncoderConfig(point_widths=(16, 24), head_widths=(16, 8))
    params = enc.init_params(cfg, np.random.default_rng(0))
    rel_cfg = rn.RelNetConfig(num_classes=3, feature_dim=8, layers=1, heads=2, model_width=16)
    rel_params = rn.init_params(rel_cfg, np.random.default_rng(1))
    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(int(rng.integers(4, 60)), 3))
        pts -= pts.mean(axis=0)
        pts /= np.linalg.norm(pts, axis=1).max()
        a = enc.encode_part(pts, params)
        b = enc.encode_part(pts[rng.permutation(len(pts))], params)
        if not np.array_equal(a, b):
            return False, f"encoder permutation invariance broken at seed {seed}"
        m = int(rng.integers(1, 7))
        tokens = rng.normal(size=(m, rel_cfg.token_width))
        la = rn.classify_sequences(rel_params, [tokens], rel_cfg, dtype=np.float64)[0]
        lb = rn.classify_sequences(rel_params, [tokens[rng.permutation(m)]], rel_cfg,
                                   dtype=np.float64)[0]
        worst = max(worst, float(np.abs(la - lb).max()))
    return worst <= 1e-5, f"worst relnet permutation delta {worst:.2e}"


def padding_suite(cases: int = 10) -> tuple[bool, str]:
    cfg = enc.EncoderConfig(point_widths=(16, 24), head_widths=(16, 8))
    params = enc.init_params(cfg, np.random.default_rng(2))
    worst = 0.0
    for seed in range(cases):
        rng = np.random.default_rng(100 + seed)
        clouds = []
        for _ in range(int(rng.integers(2, 5))):
            pts = rng.normal(size=(int(rng.integers(3, 50)), 3))
            pts -= pts.mean(axis=0)
            clouds.append(pts / np.linalg.norm(pts, axis=1).max())
        batch = enc.encode_batch(clouds, params)
        for i, c in enumerate(clouds):
            worst = max(worst, float(np.abs(batch[i] - enc.encode_part(c, params)).max()))
    return worst <= 1e-6, f"worst padding delta {worst:.2e}"


def _dbscan_reference(pts, eps, min_pts):
    n = len(pts)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    nb = [np.flatnonzero(d2[i] <= eps * eps) for i in range(n)]
    core = np.array([len(nb[i]) >= min_pts for i in range(n)])
    labels = np.full(n, -1, dtype=np.int64)
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = cid
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for kk in nb[j]:
                if core[kk] and labels[kk] == -1:
                    labels[kk] = cid
                    queue.append(kk)
        cid += 1
    for i in range(n):
        if not core[i] and labels[i] == -1:
            adjacent = [labels[kk] for kk in nb[i] if core[kk]]
            if adjacent:
                labels[i] = min(adjacent)
    return labels


def _partition(labels):
    clusters: dict = {}
    noise = set()
    for i, lab in enumerate(labels):
        if lab == -1:
            noise.add(i)
        else:
            clusters.setdefault(lab, set()).add(i)
    return frozenset(frozenset(c) for c in clusters.values()), frozenset(noise)


def dbscan_suite(instances: int = 30) -> tuple[bool, str]:
    for seed in range(instances):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 120))
        pts = rng.uniform(-1, 1, size=(n, 3))
        eps = float(rng.uniform(0.05, 0.5))
        min_pts = int(rng.integers(2, 8))
        if _partition(dp.dbscan(pts, eps, min_pts)) != \
                _partition(_dbscan_reference(pts, eps, min_pts)):
            return False, f"partition mismatch at seed {seed}"
    return True, f"{instances} instances match the brute-force oracle"


SUITES = [
    ("gradient-checks", gradient_suite),
    ("adam-fixture", adam_fixture_suite),
    ("closed-form-fixtures", closed_form_suite),
    ("permutation-invariance", permutation_suite),
    ("padding-equivalence", padding_suite),
    ("dbscan-oracle", dbscan_suite),
]


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in SUITES:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed suite is a failed suite
            ok, detail = False, f"crashed: {exc}"
        results.append((name, ok, detail))
    return results
