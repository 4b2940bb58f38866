"""Run manifests: config snapshot, seeds, input/output hashes, timings.

Every artifact-producing command writes one next to its output so any run
can be reproduced and verified. Artifact bytes are seed-deterministic;
manifests themselves carry wall-clock timings and are not compared.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(path) -> str:
    """Hash of a file, or of a directory's sorted (relative path, file hash)
    listing."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for sub in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(sub.relative_to(path)).encode())
        h.update(sha256_file(sub).encode())
    return h.hexdigest()


class RunTimer:
    def __init__(self):
        self.started = time.time()
        self._t0 = time.perf_counter()
        self.laps: dict[str, float] = {}

    def lap(self, name: str):
        now = time.perf_counter()
        self.laps[name] = round(now - self._t0, 4)
        self._t0 = now

    def total(self) -> float:
        return round(time.time() - self.started, 4)


def write_run_manifest(path, command: str, config: dict, seed,
                       inputs: dict, outputs: dict, timer: RunTimer,
                       extra: dict | None = None) -> dict:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": hash_tree(p)}
                   for name, p in inputs.items()},
        "outputs": {name: {"path": str(p), "sha256": hash_tree(p)}
                    for name, p in outputs.items()},
        "timings": dict(timer.laps, total_s=timer.total()),
        "started_unix": timer.started,
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
