"""Warehouse index, suitability ranking, and multi-slot repair sessions.

The index holds one pre-encoded record per warehouse part and is immutable
after build. Ranking scores every indexed part by inserting its feature
into the query context at the target slot and reading the classifier's
probability for the query's class; candidate scoring is a pure map and can
fan out over worker threads.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import encoder as enc
from . import geometry as geo
from . import relnet as rn
from .dataprep import ObjectAssembly, Part
from .errors import (
    BadMagicError,
    InvalidChoiceError,
    InvalidInputError,
    NotFoundError,
    TruncatedFileError,
    VersionMismatchError,
)

INDEX_MAGIC = b"PFIX"
INDEX_VERSION = 1

# Candidate scoring batch size: big enough to amortize kernel launches,
# small enough to stay cache-friendly.
SCORE_CHUNK = 1024


@dataclass(frozen=True)
class SlotTarget:
    """Where a missing part belongs: centroid, optional axis and scale."""

    centroid: np.ndarray
    axis: Optional[np.ndarray] = None
    scale: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=np.float64).reshape(3))
        if not np.isfinite(self.centroid).all():
            raise InvalidInputError("slot centroid must be finite")
        if self.axis is not None:
            axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
            norm = np.linalg.norm(axis)
            if not np.isfinite(norm) or norm < 1e-9:
                raise InvalidInputError("slot axis must be a nonzero vector")
            object.__setattr__(self, "axis", axis / norm)
        if self.scale is not None and not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidInputError("slot scale must be positive")


@dataclass(frozen=True)
class ContextPart:
    """One part of the query context: feature plus pose summary."""

    feature: np.ndarray
    centroid: np.ndarray
    scale: float
    part_id: Optional[int] = None
    part_label: Optional[int] = None


@dataclass(frozen=True)
class RankedCandidate:
    part_id: int
    suitability: float
    rank: int
    part_label: int
    object_class: int
    logit: float
    slot: int = 0


class WarehouseIndex:
    """Immutable pre-encoded warehouse. Arrays are write-protected; the
    checksum lets audits prove scoring never mutates the index."""

    def __init__(self, part_ids, features, centroids, scales, axes, axis_kinds,
                 part_labels, object_classes, encoder_hash: str):
        self.part_ids = np.asarray(part_ids, dtype=np.uint64)
        self.features = np.asarray(features, dtype=np.float32)
        self.centroids = np.asarray(centroids, dtype=np.float32)
        self.scales = np.asarray(scales, dtype=np.float32)
        self.axes = np.asarray(axes, dtype=np.float32)
        self.axis_kinds = np.asarray(axis_kinds, dtype=np.uint8)
        self.part_labels = np.asarray(part_labels, dtype=np.uint16)
        self.object_classes = np.asarray(object_classes, dtype=np.uint16)
        self.encoder_hash = encoder_hash
        if len(self.part_ids) == 0:
            raise InvalidInputError("index must hold at least one part")
        norms = np.linalg.norm(self.features.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise InvalidInputError("index features must be unit norm")
        for arr in self._arrays():
            arr.flags.writeable = False
        self._row_of = {int(pid): i for i, pid in enumerate(self.part_ids)}

    def _arrays(self):
        return (self.part_ids, self.features, self.centroids, self.scales,
                self.axes, self.axis_kinds, self.part_labels, self.object_classes)

    def __len__(self):
        return len(self.part_ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def row_of(self, part_id: int) -> int:
        row = self._row_of.get(int(part_id))
        if row is None:
            raise NotFoundError(f"part {part_id} not in index")
        return row

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self._arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(self.encoder_hash.encode())
        return h.hexdigest()


def build_index(warehouse: list[Part], enc_params: dict, chunk: int = 256) -> WarehouseIndex:
    """Encode every warehouse part once and freeze the records."""
    if not warehouse:
        raise InvalidInputError("cannot index an empty warehouse")
    feats = []
    for start in range(0, len(warehouse), chunk):
        block = warehouse[start : start + chunk]
        try:
            feats.append(enc.encode_batch([p.cloud for p in block], enc_params))
        except Exception as exc:
            for p in block:
                try:
                    enc.encode_part(p.cloud, enc_params)
                except Exception as part_exc:
                    raise InvalidInputError(f"part {p.part_id} failed to encode: {part_exc}") from exc
            raise
    features = np.concatenate(feats).astype(np.float32)
    return WarehouseIndex(
        part_ids=[p.part_id for p in warehouse],
        features=features,
        centroids=[p.pose.centroid for p in warehouse],
        scales=[p.pose.scale for p in warehouse],
        axes=[p.pose.axis for p in warehouse],
        axis_kinds=[int(p.pose.axis_kind) for p in warehouse],
        part_labels=[p.part_label for p in warehouse],
        object_classes=[p.object_class for p in warehouse],
        encoder_hash=rn.encoder_fingerprint(enc_params),
    )


def save_index(path, index: WarehouseIndex):
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<H", INDEX_VERSION))
        digest = bytes.fromhex(index.encoder_hash)
        fh.write(struct.pack("<B", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<H", index.feature_dim))
        fh.write(struct.pack("<I", len(index)))
        for i in range(len(index)):
            fh.write(struct.pack("<QHH", int(index.part_ids[i]),
                                 int(index.object_classes[i]), int(index.part_labels[i])))
            fh.write(index.centroids[i].astype("<f4").tobytes())
            fh.write(struct.pack("<f", float(index.scales[i])))
            fh.write(index.axes[i].astype("<f4").tobytes())
            fh.write(struct.pack("<B", int(index.axis_kinds[i])))
            fh.write(index.features[i].astype("<f4").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def load_index(path) -> WarehouseIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != INDEX_MAGIC:
            raise BadMagicError(f"not an index file: magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != INDEX_VERSION:
            raise VersionMismatchError(f"unsupported index version {version}")
        (hash_len,) = struct.unpack("<B", _read_exact(fh, 1))
        encoder_hash = _read_exact(fh, hash_len).hex()
        (dim,) = struct.unpack("<H", _read_exact(fh, 2))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        ids = np.empty(count, dtype=np.uint64)
        classes = np.empty(count, dtype=np.uint16)
        labels = np.empty(count, dtype=np.uint16)
        cents = np.empty((count, 3), dtype=np.float32)
        scales = np.empty(count, dtype=np.float32)
        axes = np.empty((count, 3), dtype=np.float32)
        kinds = np.empty(count, dtype=np.uint8)
        feats = np.empty((count, dim), dtype=np.float32)
        for i in range(count):
            ids[i], classes[i], labels[i] = struct.unpack("<QHH", _read_exact(fh, 12))
            cents[i] = np.frombuffer(_read_exact(fh, 12), dtype="<f4")
            (scales[i],) = struct.unpack("<f", _read_exact(fh, 4))
            axes[i] = np.frombuffer(_read_exact(fh, 12), dtype="<f4")
            (kinds[i],) = struct.unpack("<B", _read_exact(fh, 1))
            feats[i] = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4")
    return WarehouseIndex(ids, feats, cents, scales, axes, kinds, labels, classes,
                          encoder_hash)


# ---------------------------------------------------------------------------
# scoring


def context_from_item(item: ObjectAssembly, index: WarehouseIndex,
                      skip_ids=()) -> list[ContextPart]:
    """Query context for an object whose parts are already indexed."""
    skip = set(int(s) for s in skip_ids)
    out = []
    for p in item.parts:
        if p.part_id in skip:
            continue
        out.append(ContextPart(feature=index.features[index.row_of(p.part_id)],
                               centroid=p.pose.centroid, scale=p.pose.scale,
                               part_id=p.part_id, part_label=p.part_label))
    return out


def _ranking_tokens(context: list[ContextPart], slot: SlotTarget,
                    config: rn.RelNetConfig):
    """Base token sequence with a zeroed candidate row; returns (tokens f32,
    candidate row position)."""
    feats = np.stack([np.asarray(p.feature, dtype=np.float64) for p in context]
                     + [np.zeros(config.feature_dim)])
    cents = np.stack([p.centroid for p in context] + [slot.centroid])
    scales = np.array([p.scale for p in context] + [slot.scale if slot.scale else 0.0])
    tokens, order = rn.ordered_tokens(feats, cents, scales, config)
    cand_pos = int(np.flatnonzero(order == len(context))[0])
    return tokens.astype(np.float32), cand_pos


def rank_candidates(context: list[ContextPart], slot: SlotTarget, class_id: int,
                    index: WarehouseIndex, bundle: rn.ModelBundle, k: int,
                    workers: int = 1) -> list[RankedCandidate]:
    """Score every indexed part as the filler of ``slot`` and return the
    top-k by class probability (ties broken by ascending part id)."""
    if not context:
        raise InvalidInputError("query context must hold at least one part")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if not 0 <= class_id < bundle.rel_config.num_classes:
        raise InvalidInputError(f"class id {class_id} out of range")
    if bundle.rel_config.feature_dim != index.feature_dim:
        raise InvalidInputError("index and model feature dimensions differ")
    expected = rn.encoder_fingerprint(bundle.enc_params)
    if index.encoder_hash != expected:
        raise InvalidInputError(
            f"index encoder hash {index.encoder_hash[:12]}... does not match "
            f"model encoder hash {expected[:12]}...")

    config = bundle.rel_config
    base_tokens, cand_pos = _ranking_tokens(context, slot, config)
    t, tw = base_tokens.shape
    d = config.feature_dim
    n = len(index)

    def score_chunk(start: int, stop: int) -> np.ndarray:
        block = index.features[start:stop]
        tokens = np.broadcast_to(base_tokens, (len(block), t, tw)).copy()
        tokens[:, cand_pos, :d] = block
        mask = np.ones((len(block), t), dtype=bool)
        return rn.classify_batch(bundle.rel_params, tokens, mask, config, dtype=np.float32)

    spans = [(s, min(s + SCORE_CHUNK, n)) for s in range(0, n, SCORE_CHUNK)]
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logits = list(pool.map(lambda span: score_chunk(*span), spans))
    else:
        logits = [score_chunk(*span) for span in spans]
    logits = np.concatenate(logits)
    probs = rn.softmax_probs(logits)[:, class_id]

    order = np.lexsort((index.part_ids, -probs.astype(np.float64)))
    top = order[: min(k, n)]
    return [
        RankedCandidate(part_id=int(index.part_ids[i]),
                        suitability=float(probs[i]),
                        rank=r + 1,
                        part_label=int(index.part_labels[i]),
                        object_class=int(index.object_classes[i]),
                        logit=float(logits[i, class_id]))
        for r, i in enumerate(top)
    ]


def context_probability(context: list[ContextPart], class_id: int,
                        bundle: rn.ModelBundle) -> float:
    """Class probability of a bare context (no candidate, no slot)."""
    feats = np.stack([np.asarray(p.feature, dtype=np.float64) for p in context])
    cents = np.stack([p.centroid for p in context])
    scales = np.array([p.scale for p in context])
    tokens, _ = rn.ordered_tokens(feats, cents, scales, bundle.rel_config)
    logits = rn.classify_sequences(bundle.rel_params, [tokens.astype(np.float32)],
                                   bundle.rel_config, dtype=np.float32)
    return float(rn.softmax_probs(logits)[0, class_id])


def candidate_probability(context: list[ContextPart], slot: SlotTarget,
                          candidate_feature, class_id: int,
                          bundle: rn.ModelBundle) -> float:
    """Class probability with one candidate feature placed at the slot.

    Shares the token path with rank_candidates, so scoring the original
    part at its true slot reproduces the intact object's probability."""
    config = bundle.rel_config
    base_tokens, cand_pos = _ranking_tokens(context, slot, config)
    tokens = base_tokens[None, :, :].copy()
    tokens[0, cand_pos, : config.feature_dim] = np.asarray(candidate_feature, dtype=np.float32)
    mask = np.ones((1, tokens.shape[1]), dtype=bool)
    logits = rn.classify_batch(bundle.rel_params, tokens, mask, config, dtype=np.float32)
    return float(rn.softmax_probs(logits)[0, class_id])


# ---------------------------------------------------------------------------
# placement and sessions


def place_part(part: Part, slot: SlotTarget) -> np.ndarray:
    """Materialize a normalized part at a slot: rotate its canonical axis
    onto the slot axis (translation-only when no axis is given), scale, and
    translate."""
    cloud = part.cloud
    if slot.axis is not None:
        if part.pose.axis is None:
            raise InvalidInputError("part pose carries no axis to align")
        rot = geo.rotation_between(part.pose.axis, slot.axis)
        cloud = cloud @ rot.T
    scale = slot.scale if slot.scale is not None else part.pose.scale
    return cloud * scale + slot.centroid


@dataclass
class Session:
    """A live repair interaction: context, slot targets, choice history.

    All unfilled slots stay open at once; a choice fills the slot its
    candidate was ranked for, matching a workflow where several parts are
    missing and the user picks whichever replacement suits best first.
    """

    object_class: int
    parts: list
    slots: list
    filled: list = field(default_factory=list)
    history: list = field(default_factory=list)
    last_shown: Optional[list] = None  # merged RankedCandidates across open slots

    def __post_init__(self):
        if not self.filled:
            self.filled = [False] * len(self.slots)

    @property
    def complete(self) -> bool:
        return all(self.filled)

    @property
    def open_slots(self) -> list[int]:
        return [i for i, done in enumerate(self.filled) if not done]

    @property
    def active_slot(self) -> Optional[int]:
        """Lowest open slot index (a display hint; all open slots rank)."""
        remaining = self.open_slots
        return remaining[0] if remaining else None


def session_candidates(session: Session, index: WarehouseIndex,
                       bundle: rn.ModelBundle, k: int, workers: int = 1) -> list[RankedCandidate]:
    """Rank candidates for every open slot, interleave by per-slot rank, and
    remember what was shown (choices must come from the shown ranking)."""
    if session.complete:
        return []
    per_slot = []
    for slot_idx in session.open_slots:
        ranking = rank_candidates(session.parts, session.slots[slot_idx],
                                  session.object_class, index, bundle, k,
                                  workers=workers)
        per_slot.append([RankedCandidate(part_id=c.part_id, suitability=c.suitability,
                                         rank=c.rank, part_label=c.part_label,
                                         object_class=c.object_class, logit=c.logit,
                                         slot=slot_idx)
                         for c in ranking])
    merged = []
    for round_idx in range(max(len(r) for r in per_slot)):
        for ranking in per_slot:
            if round_idx < len(ranking):
                merged.append(ranking[round_idx])
    merged = merged[:k]
    merged = [RankedCandidate(part_id=c.part_id, suitability=c.suitability,
                              rank=i + 1, part_label=c.part_label,
                              object_class=c.object_class, logit=c.logit, slot=c.slot)
              for i, c in enumerate(merged)]
    session.last_shown = merged
    return merged


def advance_session(session: Session, chosen_part_id: int,
                    index: WarehouseIndex) -> Session:
    """Apply a choice: the chosen part joins the context at the slot it was
    ranked for, and that slot closes. No-op when already complete."""
    if session.complete:
        return session
    if not session.last_shown:
        raise InvalidChoiceError("no ranking has been shown for this step")
    chosen = next((c for c in session.last_shown if c.part_id == chosen_part_id), None)
    if chosen is None:
        raise InvalidChoiceError(f"part {chosen_part_id} was not in the shown ranking")
    row = index.row_of(chosen_part_id)
    slot = session.slots[chosen.slot]
    scale = slot.scale if slot.scale is not None else float(index.scales[row])
    session.parts = session.parts + [ContextPart(
        feature=index.features[row],
        centroid=slot.centroid,
        scale=scale,
        part_id=int(chosen_part_id),
        part_label=int(index.part_labels[row]),
    )]
    session.history.append({
        "slot": chosen.slot,
        "shown": [c.part_id for c in session.last_shown],
        "chosen": int(chosen_part_id),
        "suitability": chosen.suitability,
    })
    session.filled[chosen.slot] = True
    session.last_shown = None
    return session
