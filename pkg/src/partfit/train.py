"""Two-stage training orchestration.

Stage 1 trains the part encoder against the chamfer-kernel similarity
targets with the steepness curriculum. Stage 2 freezes the encoder,
precomputes every part feature once, and trains the relation network for
object classification with part-dropout augmentation (inference always sees
incomplete objects, so training should too).

Both stages are bit-reproducible for a fixed seed and thread count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from . import encoder as enc
from . import gradcore as gc
from . import relnet as rn
from . import simloss as sl
from .dataprep import ObjectAssembly, Part
from .errors import ConfigError, InvalidInputError, NonFiniteError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    stage1_epochs: int = 50
    stage2_epochs: int = 20
    stage1_batch: int = 64
    stage2_batch: int = 8
    lr_peak: float = 1e-3
    stage2_lr_peak: float = 2e-3
    lr_min: float = 1e-5
    warmup_frac: float = 0.05
    k_start: float = 1.0
    k_end: float = 10.0
    part_dropout: float = 0.5
    part_corrupt: float = 0.85
    stats_pairs: int = 1000

    def __post_init__(self):
        if min(self.stage1_epochs, self.stage2_epochs, self.stage1_batch, self.stage2_batch) < 1:
            raise InvalidInputError("epochs and batch sizes must be positive")
        for prob in (self.part_dropout, self.part_corrupt):
            if not 0.0 <= prob < 1.0:
                raise InvalidInputError("augmentation probabilities must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


def balanced_batches(labels, batch_size: int, rng) -> list[list[int]]:
    """Round-robin over shuffled per-label pools so every batch mixes labels.

    Batches left with fewer than two distinct labels are dropped; their
    similarity targets would be all ones.
    """
    pools: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        pools.setdefault(int(lab), []).append(idx)
    for pool in pools.values():
        rng.shuffle(pool)
    order = sorted(pools)
    batches = []
    current: list[int] = []
    while any(pools[lab] for lab in order):
        for lab in order:
            if pools[lab]:
                current.append(pools[lab].pop())
                if len(current) == batch_size:
                    batches.append(current)
                    current = []
    if len(current) >= 2:
        batches.append(current)
    kept = []
    for batch in batches:
        if len({labels[i] for i in batch}) >= 2:
            kept.append(batch)
        else:
            log.debug("dropping single-label batch of %d parts", len(batch))
    return kept


def train_stage1(enc_params: dict, warehouse: list[Part], config: TrainConfig,
                 stats: sl.DistanceStats) -> tuple[dict, list[float]]:
    """Metric-learning stage: returns trained encoder parameters and the
    per-epoch loss curve."""
    labels = [p.part_label for p in warehouse]
    if len(set(labels)) < 2:
        raise ConfigError("stage 1 needs at least 2 part labels")
    params = {k: gc.parameter(v.copy(), k) for k, v in enc_params.items()}
    plist = [params[k] for k in sorted(params)]
    state = gc.AdamState()
    rng = np.random.default_rng(config.seed)

    batches_per_epoch = max(1, len(warehouse) // config.stage1_batch)
    total_steps = config.stage1_epochs * batches_per_epoch
    warmup = max(1, int(round(config.warmup_frac * total_steps)))
    schedule = sl.SteepnessSchedule(config.k_start, config.k_end,
                                    total_epochs=max(config.stage1_epochs - 1, 0))
    pair_cache: dict = {}
    history = []
    step = 0
    for epoch in range(config.stage1_epochs):
        k = sl.steepness_at(epoch, schedule)
        epoch_losses = []
        for batch_idx in balanced_batches(labels, config.stage1_batch, rng):
            parts = [warehouse[i] for i in batch_idx]
            target = sl.build_target_matrix(parts, [p.part_label for p in parts],
                                            k, stats, pair_cache=pair_cache)
            gc.zero_grad(plist)
            try:
                feats = enc.encode_batch_training(params, [p.cloud for p in parts])
                loss = sl.similarity_loss(feats, target)
                gc.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"stage 1 diverged at epoch {epoch}, step {step}: {exc}") from exc
            lr = gc.lr_schedule(min(step, total_steps), total_steps, warmup,
                                config.lr_peak, config.lr_min)
            gc.adam_step(plist, state, lr)
            epoch_losses.append(float(loss.value))
            step += 1
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        history.append(mean_loss)
        log.info("stage1 epoch %d/%d k=%.2f loss=%.6f",
                 epoch + 1, config.stage1_epochs, k, mean_loss)
    return {k_: p.value for k_, p in params.items()}, history


def precompute_features(enc_params: dict, parts: list[Part], chunk: int = 256) -> dict:
    """Frozen-encoder features for every part, keyed by part_id (float64)."""
    features = {}
    for start in range(0, len(parts), chunk):
        block = parts[start : start + chunk]
        feats = enc.encode_batch([p.cloud for p in block], enc_params)
        for part, feat in zip(block, feats):
            features[part.part_id] = feat
    return features


def object_part_tokens(item: ObjectAssembly, feature_lookup: dict,
                       config: rn.RelNetConfig, keep: list[int] | None = None,
                       feature_overrides: dict | None = None) -> np.ndarray:
    """Canonical part tokens for an object, optionally restricted to a subset
    of part indices (dropout) or with some features swapped out (negative
    augmentation)."""
    parts = item.parts if keep is None else [item.parts[i] for i in keep]
    overrides = feature_overrides or {}
    feats = np.stack([overrides.get(i, feature_lookup[p.part_id])
                      for i, p in enumerate(parts)])
    cents = np.stack([p.pose.centroid for p in parts])
    scales = np.array([p.pose.scale for p in parts])
    tokens, _ = rn.ordered_tokens(feats, cents, scales, config)
    return tokens


def train_stage2(enc_params: dict, rel_params: dict, items: list[ObjectAssembly],
                 config: TrainConfig, rel_config: rn.RelNetConfig,
                 negative_pool: list[Part] | None = None) -> tuple[dict, list[dict]]:
    """Classification stage with the encoder frozen.

    The encoder enters only through precomputed constant features, so its
    weights cannot drift by construction; callers can additionally verify
    the checkpoint fingerprint.

    Two augmentations make the classifier usable as a suitability judge:
    part dropout (inference always sees incomplete objects) and negative
    feature corruption. For the latter, a twin of the object is built with
    one part's feature swapped for a random wrong-label warehouse part and
    trained toward the uniform distribution; without it the class can be
    read off the centroid constellation alone and candidate features would
    never matter at ranking time.

    Returns relation-net parameters and a per-epoch history of loss and
    training accuracy.
    """
    if not items:
        raise ConfigError("stage 2 needs training objects")
    present = {item.object_class for item in items}
    if present != set(range(rel_config.num_classes)):
        missing = sorted(set(range(rel_config.num_classes)) - present)
        raise ConfigError(f"classes without training samples: {missing}")

    pool = negative_pool if negative_pool is not None else [p for it in items for p in it.parts]
    feature_lookup = precompute_features(
        enc_params, [p for it in items for p in it.parts] + list(pool))
    pool_features = np.stack([feature_lookup[p.part_id] for p in pool])
    pool_labels = np.array([p.part_label for p in pool])
    uniform = np.full(rel_config.num_classes, 1.0 / rel_config.num_classes)

    params = {k: gc.parameter(v.copy(), k) for k, v in rel_params.items()}
    plist = [params[k] for k in sorted(params)]
    state = gc.AdamState()
    rng = np.random.default_rng(config.seed + 1)

    steps_per_epoch = int(np.ceil(len(items) / config.stage2_batch))
    total_steps = config.stage2_epochs * steps_per_epoch
    warmup = max(1, int(round(config.warmup_frac * total_steps)))
    history = []
    step = 0
    for epoch in range(config.stage2_epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        hits = 0
        for start in range(0, len(items), config.stage2_batch):
            batch = [items[i] for i in order[start : start + config.stage2_batch]]
            gc.zero_grad(plist)
            losses = []
            try:
                for item in batch:
                    keep = list(range(len(item.parts)))
                    if len(item.parts) >= 3 and rng.uniform() < config.part_dropout:
                        drop = int(rng.integers(0, len(item.parts)))
                        keep.remove(drop)
                    tokens = object_part_tokens(item, feature_lookup, rel_config, keep)
                    logits = rn.classify_training(params, tokens, rel_config)
                    losses.append(gc.cross_entropy(logits, [item.object_class]))
                    if int(np.argmax(logits.value)) == item.object_class:
                        hits += 1
                    for hard in (False, True):
                        if rng.uniform() >= config.part_corrupt:
                            continue
                        victim = int(rng.integers(0, len(keep)))
                        true_part = item.parts[keep[victim]]
                        wrong = np.flatnonzero(pool_labels != true_part.part_label)
                        if len(wrong) == 0:
                            continue
                        if hard:
                            # lookalike negative: teaches the ordering near the
                            # tie frontier without fighting geometric reality,
                            # so the target keeps some true-class mass
                            sims = pool_features[wrong] @ feature_lookup[true_part.part_id]
                            top = wrong[np.argsort(sims)[::-1][:16]]
                            donor = int(top[rng.integers(0, len(top))])
                            target = 0.7 * uniform
                            target[item.object_class] += 0.3
                        else:
                            donor = int(wrong[rng.integers(0, len(wrong))])
                            target = uniform
                        corrupted = object_part_tokens(
                            item, feature_lookup, rel_config, keep,
                            feature_overrides={victim: pool_features[donor]})
                        bad_logits = rn.classify_training(params, corrupted, rel_config)
                        losses.append(gc.cross_entropy_soft(bad_logits, target))
                total = losses[0]
                for extra in losses[1:]:
                    total = gc.add(total, extra)
                loss = gc.scale(total, 1.0 / len(losses))
                gc.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"stage 2 diverged at epoch {epoch}, step {step}: {exc}") from exc
            lr = gc.lr_schedule(min(step, total_steps), total_steps, warmup,
                                config.stage2_lr_peak, config.lr_min)
            gc.adam_step(plist, state, lr)
            epoch_losses.append(float(loss.value))
            step += 1
        acc = hits / len(items)
        history.append({"loss": float(np.mean(epoch_losses)), "accuracy": acc})
        log.info("stage2 epoch %d/%d loss=%.6f train_acc=%.3f",
                 epoch + 1, config.stage2_epochs, history[-1]["loss"], acc)
    return {k: p.value for k, p in params.items()}, history
