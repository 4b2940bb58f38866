"""Relation network: a shallow pre-norm transformer over part tokens with a
learned classification token, plus a K-way head.

Each part token is the part's unit feature vector concatenated with a
deterministic sinusoidal embedding of its centroid, so identical geometries
at different locations stay distinguishable. There is no positional
encoding; logits are invariant to part-token order.

Centroids are expressed in a context frame: the constellation of part
bounding balls (centroid, scale pairs) recentered and rescaled into the
unit ball. Computing the frame from pose summaries rather than raw points
keeps it identical between "intact object" and "damaged object plus the
original part proposed at its own slot" - the two must tokenize
identically.

Tokens are sorted by centroid before the classification token is prepended.
Attention makes the order irrelevant mathematically; sorting makes it
irrelevant bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import gradcore as gc
from .encoder import EncoderConfig
from .errors import InvalidInputError
from .simloss import DistanceStats


@dataclass(frozen=True)
class RelNetConfig:
    num_classes: int
    feature_dim: int = 64
    layers: int = 2
    heads: int = 4
    model_width: int = 96
    ff_multiplier: int = 2
    centroid_freqs: tuple = (np.pi, 2 * np.pi, 4 * np.pi)

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        if self.model_width % self.heads != 0:
            raise InvalidInputError("model width must be divisible by heads")

    @property
    def embed_dim(self) -> int:
        return 6 * len(self.centroid_freqs)

    @property
    def token_width(self) -> int:
        return self.feature_dim + self.embed_dim

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "feature_dim": self.feature_dim,
                "layers": self.layers, "heads": self.heads,
                "model_width": self.model_width, "ff_multiplier": self.ff_multiplier,
                "centroid_freqs": list(self.centroid_freqs)}

    @staticmethod
    def from_dict(d: dict) -> "RelNetConfig":
        d = dict(d)
        d["centroid_freqs"] = tuple(d["centroid_freqs"])
        return RelNetConfig(**d)


def centroid_embedding(centroids, config: RelNetConfig) -> np.ndarray:
    """Deterministic sinusoidal code of centroids: per coordinate, sin/cos at
    each frequency. (M, 3) -> (M, embed_dim); parameter-free."""
    cents = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if not np.isfinite(cents).all():
        raise InvalidInputError("centroids must be finite")
    freqs = np.asarray(config.centroid_freqs)
    phases = cents[:, :, None] * freqs[None, None, :]  # (M, 3, F)
    emb = np.stack([np.sin(phases), np.cos(phases)], axis=-1)  # (M, 3, F, 2)
    return emb.reshape(len(cents), -1)


def context_frame(centroids, scales) -> tuple[np.ndarray, float]:
    """Bounding-ball frame of a part constellation: center = mean centroid,
    radius = farthest part-ball surface. Depends only on pose summaries."""
    cents = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    scales = np.asarray(scales, dtype=np.float64)
    center = cents.mean(axis=0)
    radius = float((np.linalg.norm(cents - center, axis=1) + scales).max())
    return center, max(radius, 1e-9)


def ordered_tokens(features, centroids, scales, config: RelNetConfig):
    """Part tokens in canonical (centroid-sorted) order, without the
    classification token. Returns (tokens (M, token_width), order)."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    cents = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    scales = np.asarray(scales, dtype=np.float64)
    if len(features) < 1:
        raise InvalidInputError("need at least one part token")
    if features.shape[1] != config.feature_dim:
        raise InvalidInputError(f"feature width {features.shape[1]} != {config.feature_dim}")
    center, radius = context_frame(cents, scales)
    mapped = (cents - center) / radius
    order = np.lexsort((scales, cents[:, 2], cents[:, 1], cents[:, 0]))
    emb = centroid_embedding(mapped[order], config)
    return np.concatenate([features[order], emb], axis=1), order


def assemble_tokens(features, centroids, scales, params, config: RelNetConfig) -> np.ndarray:
    """Full token sequence: classification token followed by part tokens."""
    tokens, _ = ordered_tokens(features, centroids, scales, config)
    return np.concatenate([np.asarray(params["rel.cls"], dtype=np.float64), tokens], axis=0)


# ---------------------------------------------------------------------------
# parameters


def init_params(config: RelNetConfig, rng) -> dict:
    """Fresh float64 relation-network parameters."""

    def glorot(a, b):
        limit = np.sqrt(6.0 / (a + b))
        return rng.uniform(-limit, limit, size=(a, b))

    w = config.model_width
    tw = config.token_width
    ff = config.ff_multiplier * w
    params = {
        "rel.cls": rng.normal(scale=0.02, size=(1, tw)),
        "rel.proj.w": glorot(tw, w),
        "rel.proj.b": np.zeros(w),
        "rel.final.g": np.ones(w),
        "rel.final.b": np.zeros(w),
        "rel.head.w1": glorot(w, w),
        "rel.head.b1": np.zeros(w),
        "rel.head.w2": glorot(w, config.num_classes),
        "rel.head.b2": np.zeros(config.num_classes),
    }
    for i in range(config.layers):
        p = f"rel.l{i}"
        params[f"{p}.ln1.g"] = np.ones(w)
        params[f"{p}.ln1.b"] = np.zeros(w)
        params[f"{p}.ln2.g"] = np.ones(w)
        params[f"{p}.ln2.b"] = np.zeros(w)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}"] = glorot(w, w)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attn.{name}"] = np.zeros(w)
        params[f"{p}.ff.w1"] = glorot(w, ff)
        params[f"{p}.ff.b1"] = np.zeros(ff)
        params[f"{p}.ff.w2"] = glorot(ff, w)
        params[f"{p}.ff.b2"] = np.zeros(w)
    return params


# ---------------------------------------------------------------------------
# gradcore forward (training)


def _ln_affine_t(x, gain, bias):
    return gc.add(gc.mul(gc.layer_norm(x), gain), bias)


def classify_training(params, part_tokens: np.ndarray, config: RelNetConfig) -> gc.Tensor:
    """Differentiable logits for one token sequence (params map to gc.Tensor).

    ``part_tokens`` excludes the classification token, which is a learned
    parameter and is prepended here.
    """
    if len(part_tokens) < 1:
        raise InvalidInputError("need at least one part token")
    seq = gc.concat([params["rel.cls"], gc.constant(part_tokens)], axis=0)
    x = gc.add(gc.matmul(seq, params["rel.proj.w"]), params["rel.proj.b"])
    w = config.model_width
    dh = w // config.heads
    for i in range(config.layers):
        p = f"rel.l{i}"
        h = _ln_affine_t(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = gc.add(gc.matmul(h, params[f"{p}.attn.wq"]), params[f"{p}.attn.bq"])
        k = gc.add(gc.matmul(h, params[f"{p}.attn.wk"]), params[f"{p}.attn.bk"])
        v = gc.add(gc.matmul(h, params[f"{p}.attn.wv"]), params[f"{p}.attn.bv"])
        head_outs = []
        for j in range(config.heads):
            qj = gc.slice_cols(q, j * dh, (j + 1) * dh)
            kj = gc.slice_cols(k, j * dh, (j + 1) * dh)
            vj = gc.slice_cols(v, j * dh, (j + 1) * dh)
            scores = gc.scale(gc.matmul(qj, gc.transpose(kj)), 1.0 / np.sqrt(dh))
            head_outs.append(gc.matmul(gc.softmax(scores), vj))
        att = gc.concat(head_outs, axis=-1)
        att = gc.add(gc.matmul(att, params[f"{p}.attn.wo"]), params[f"{p}.attn.bo"])
        x = gc.add(x, att)
        h2 = _ln_affine_t(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        f = gc.relu(gc.add(gc.matmul(h2, params[f"{p}.ff.w1"]), params[f"{p}.ff.b1"]))
        f = gc.add(gc.matmul(f, params[f"{p}.ff.w2"]), params[f"{p}.ff.b2"])
        x = gc.add(x, f)
    x = _ln_affine_t(x, params["rel.final.g"], params["rel.final.b"])
    cls = gc.gather_rows(x, [0])
    h = gc.relu(gc.add(gc.matmul(cls, params["rel.head.w1"]), params["rel.head.b1"]))
    return gc.add(gc.matmul(h, params["rel.head.w2"]), params["rel.head.b2"])


# ---------------------------------------------------------------------------
# numpy forward (inference, batched, padding-masked)


def _ln_affine(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def _softmax_masked(scores, key_mask):
    scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def classify_batch(params, part_tokens: np.ndarray, mask: np.ndarray,
                   config: RelNetConfig, dtype=np.float32) -> np.ndarray:
    """Batched logits: (B, M, token_width) padded part tokens + (B, M) mask
    -> (B, num_classes). The classification token is prepended internally
    and is never masked."""
    p = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    b, m, tw = part_tokens.shape
    seq = np.empty((b, m + 1, tw), dtype=dtype)
    seq[:, 0, :] = p["rel.cls"][0]
    seq[:, 1:, :] = part_tokens
    full_mask = np.concatenate([np.ones((b, 1), dtype=bool), mask.astype(bool)], axis=1)
    t = m + 1
    w = config.model_width
    h_n = config.heads
    dh = w // h_n
    x = (seq.reshape(b * t, tw) @ p["rel.proj.w"] + p["rel.proj.b"]).reshape(b, t, w)
    for i in range(config.layers):
        pre = f"rel.l{i}"
        h = _ln_affine(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        flat = h.reshape(b * t, w)
        q = (flat @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"]).reshape(b, t, h_n, dh).transpose(0, 2, 1, 3)
        k = (flat @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"]).reshape(b, t, h_n, dh).transpose(0, 2, 1, 3)
        v = (flat @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"]).reshape(b, t, h_n, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) / np.asarray(np.sqrt(dh), dtype=dtype)
        att = np.matmul(_softmax_masked(scores, full_mask), v)
        att = att.transpose(0, 2, 1, 3).reshape(b * t, w)
        att = att @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"]
        x = x + att.reshape(b, t, w)
        h2 = _ln_affine(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        f = np.maximum(h2.reshape(b * t, w) @ p[f"{pre}.ff.w1"] + p[f"{pre}.ff.b1"], 0)
        f = f @ p[f"{pre}.ff.w2"] + p[f"{pre}.ff.b2"]
        x = x + f.reshape(b, t, w)
    x = _ln_affine(x, p["rel.final.g"], p["rel.final.b"])
    cls = x[:, 0, :]
    h = np.maximum(cls @ p["rel.head.w1"] + p["rel.head.b1"], 0)
    return h @ p["rel.head.w2"] + p["rel.head.b2"]


def classify_sequences(params, sequences: list[np.ndarray], config: RelNetConfig,
                       dtype=np.float32) -> np.ndarray:
    """Pad a list of per-object part-token arrays and classify them."""
    if not sequences:
        raise InvalidInputError("no sequences to classify")
    m_max = max(len(s) for s in sequences)
    tw = config.token_width
    tokens = np.zeros((len(sequences), m_max, tw), dtype=dtype)
    mask = np.zeros((len(sequences), m_max), dtype=bool)
    for i, s in enumerate(sequences):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return classify_batch(params, tokens, mask, config, dtype=dtype)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class ModelBundle:
    """Everything inference needs: both parameter sets, configs, label tables
    and the distance statistics recorded at training time."""

    enc_params: dict
    rel_params: dict
    enc_config: EncoderConfig
    rel_config: RelNetConfig
    class_names: list
    part_label_names: list
    stats: Optional[DistanceStats] = None
    train_config: Optional[dict] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def encoder_fingerprint(enc_params: dict) -> str:
    return gc.tensor_fingerprint({k: v for k, v in enc_params.items() if k.startswith("enc.")})


def save_model(path, bundle: ModelBundle):
    tensors = {}
    tensors.update(bundle.enc_params)
    tensors.update(bundle.rel_params)
    config = {
        "encoder": bundle.enc_config.to_dict(),
        "relnet": bundle.rel_config.to_dict(),
        "classes": list(bundle.class_names),
        "part_labels": list(bundle.part_label_names),
        "stats": bundle.stats.to_dict() if bundle.stats else None,
        "train": bundle.train_config,
    }
    gc.save_checkpoint(path, tensors, config)


def load_model(path) -> ModelBundle:
    tensors, config = gc.load_checkpoint(path)
    enc_params = {k: v for k, v in tensors.items() if k.startswith("enc.")}
    rel_params = {k: v for k, v in tensors.items() if k.startswith("rel.")}
    stats = DistanceStats.from_dict(config["stats"]) if config.get("stats") else None
    return ModelBundle(
        enc_params=enc_params,
        rel_params=rel_params,
        enc_config=EncoderConfig.from_dict(config["encoder"]),
        rel_config=RelNetConfig.from_dict(config["relnet"]),
        class_names=config["classes"],
        part_label_names=config["part_labels"],
        stats=stats,
        train_config=config.get("train"),
    )
