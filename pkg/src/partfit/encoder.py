"""Part encoder: a PointNet-style network mapping a variable-cardinality
normalized cloud to a unit-norm feature vector.

Shared per-point MLP, masked max pool over points, head MLP, then division
by the Euclidean norm. Max pooling makes the features exactly permutation
invariant, and masked pooling makes padded batching results match per-part
encoding.

Two forward paths exist on purpose: a gradcore path used by training
(float64, differentiable) and a plain numpy path used everywhere else
(float64 by default, float32 for the throughput-critical index/ranking
code). Both share the same parameter dictionary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ContractViolationError, InvalidInputError


@dataclass(frozen=True)
class EncoderConfig:
    """Layer widths: 3 -> point_widths (shared MLP) -> pool -> head_widths."""

    point_widths: tuple = (64, 128, 256)
    head_widths: tuple = (128, 64)

    def __post_init__(self):
        if self.feature_dim < 8:
            raise InvalidInputError("feature dimension must be >= 8")
        if any(w <= 0 for w in self.point_widths + self.head_widths):
            raise InvalidInputError("layer widths must be positive")

    @property
    def feature_dim(self) -> int:
        return self.head_widths[-1]

    def to_dict(self) -> dict:
        return {"point_widths": list(self.point_widths), "head_widths": list(self.head_widths)}

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(point_widths=tuple(d["point_widths"]),
                             head_widths=tuple(d["head_widths"]))


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: EncoderConfig, rng) -> dict:
    """Fresh float64 encoder parameters, Glorot-uniform weights, zero biases."""
    params = {}
    widths = (3,) + tuple(config.point_widths)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"enc.point{i}.w"] = _glorot(rng, a, b)
        params[f"enc.point{i}.b"] = np.zeros(b)
    widths = (config.point_widths[-1],) + tuple(config.head_widths)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"enc.head{i}.w"] = _glorot(rng, a, b)
        params[f"enc.head{i}.b"] = np.zeros(b)
    return params


def _layer_names(params, prefix):
    names = []
    i = 0
    while f"enc.{prefix}{i}.w" in params:
        names.append((f"enc.{prefix}{i}.w", f"enc.{prefix}{i}.b"))
        i += 1
    return names


def check_normalized(cloud):
    """Encoder inputs must satisfy the normalization postconditions."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) < 1:
        raise ContractViolationError(f"expected (N, 3) cloud, got {cloud.shape}")
    if np.linalg.norm(cloud.mean(axis=0)) > 1e-3:
        raise ContractViolationError("cloud centroid is not at the origin")
    if abs(np.linalg.norm(cloud, axis=1).max() - 1.0) > 1e-3:
        raise ContractViolationError("cloud max norm is not 1")
    return cloud


def cast_params(params: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


# ---------------------------------------------------------------------------
# numpy forward (inference)


def _forward_padded(params, pts, mask, dtype):
    """(B, N, 3) padded points + (B, N) mask -> (B, d) unit features."""
    b, n, _ = pts.shape
    h = pts.reshape(b * n, 3).astype(dtype, copy=False)
    for w_name, b_name in _layer_names(params, "point"):
        h = np.maximum(h @ params[w_name] + params[b_name], 0.0)
    h = h.reshape(b, n, -1)
    neg = np.array(-np.inf, dtype=dtype)
    pooled = np.where(mask[:, :, None], h, neg).max(axis=1)
    heads = _layer_names(params, "head")
    g = pooled
    for w_name, b_name in heads[:-1]:
        g = np.maximum(g @ params[w_name] + params[b_name], 0.0)
    w_name, b_name = heads[-1]
    g = g @ params[w_name] + params[b_name]
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def encode_part(cloud, params, dtype=np.float64) -> np.ndarray:
    """Encode one normalized cloud to a d-dimensional unit feature."""
    cloud = check_normalized(cloud)
    params = cast_params(params, dtype) if dtype != np.float64 else params
    feats = _forward_padded(params, cloud[None, :, :].astype(dtype),
                            np.ones((1, len(cloud)), dtype=bool), dtype)
    return feats[0]


def encode_batch(clouds, params, dtype=np.float64) -> np.ndarray:
    """Encode a list of normalized clouds, padded to the longest one."""
    if not clouds:
        raise InvalidInputError("encode_batch needs at least one cloud")
    clouds = [check_normalized(c) for c in clouds]
    params = cast_params(params, dtype) if dtype != np.float64 else params
    n_max = max(len(c) for c in clouds)
    pts = np.zeros((len(clouds), n_max, 3), dtype=dtype)
    mask = np.zeros((len(clouds), n_max), dtype=bool)
    for i, c in enumerate(clouds):
        pts[i, : len(c)] = c
        mask[i, : len(c)] = True
    return _forward_padded(params, pts, mask, dtype)


# ---------------------------------------------------------------------------
# gradcore forward (training)


def encode_batch_training(params: dict, clouds) -> gc.Tensor:
    """Differentiable padded-batch encoding; params maps names to gc.Tensor."""
    clouds = [check_normalized(c) for c in clouds]
    b = len(clouds)
    n_max = max(len(c) for c in clouds)
    pts = np.zeros((b, n_max, 3))
    mask = np.zeros((b, n_max))
    for i, c in enumerate(clouds):
        pts[i, : len(c)] = c
        mask[i, : len(c)] = 1.0
    h = gc.reshape(gc.constant(pts), (b * n_max, 3))
    for w_name, b_name in _layer_names(params, "point"):
        h = gc.relu(gc.add(gc.matmul(h, params[w_name]), params[b_name]))
    width = h.shape[-1]
    h = gc.reshape(h, (b, n_max, width))
    pooled = gc.reduce_max(h, axis=1, mask=mask)
    heads = _layer_names(params, "head")
    g = pooled
    for w_name, b_name in heads[:-1]:
        g = gc.relu(gc.add(gc.matmul(g, params[w_name]), params[b_name]))
    w_name, b_name = heads[-1]
    g = gc.add(gc.matmul(g, params[w_name]), params[b_name])
    return gc.unit_rows(g)
