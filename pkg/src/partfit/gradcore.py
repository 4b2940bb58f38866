"""Minimal reverse-mode autodiff over dense float64 arrays.

Just enough machinery to train the part encoder and the relation
transformer: a small primitive set with exact adjoints, bias-corrected Adam,
a warmup-then-cosine learning-rate schedule, and a binary checkpoint
container. Every primitive validates that its output is finite; NaN or Inf
anywhere trips a fault immediately instead of corrupting a training run.

A graph is recorded implicitly by the Tensor nodes an expression creates.
Graphs are single-shot: one backward pass per recording.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    InvalidInputError,
    NonFiniteError,
    TruncatedFileError,
    UsageError,
    VersionMismatchError,
)

DTYPE = np.float64


class Tensor:
    """One node of a recorded computation."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_done")

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._done = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "param" if self.name else ("op" if self._parents else "const")
        return f"Tensor({kind}, shape={self.value.shape})"


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value, name: str) -> Tensor:
    if not name:
        raise UsageError("parameters must be named")
    return Tensor(value, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward) -> Tensor:
    out = np.asarray(value, dtype=DTYPE)
    # one-pass finiteness fault: NaN/Inf anywhere propagates into the sum
    if not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NonFiniteError("primitive produced a non-finite value")
    requires = any(p.requires_grad for p in parents)
    return Tensor(out, requires_grad=requires,
                  _parents=tuple(parents) if requires else (),
                  _backward=backward if requires else None)


def _accum(t: Tensor, g: np.ndarray):
    # Adopting g without a copy is safe: backward runs in reverse topological
    # order, so any aliased upstream gradient has already been consumed.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=DTYPE)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise InvalidInputError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ b.value.T)
        if b.requires_grad:
            _accum(b, a.value.T @ g)

    return _make(a.value @ b.value, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.value.shape))

    return _make(a.value + b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(a.value * b.value, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(out):
        _accum(a, out.grad * c)

    return _make(a.value * c, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    value = np.maximum(a.value, 0.0)

    def backward(out):
        _accum(a, out.grad * (out.value > 0.0))

    return _make(value, (a,), backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        s = out.value
        g = out.grad
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(value, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    mean = a.value.mean(axis=-1, keepdims=True)
    var = a.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.value - mean) * inv

    def backward(out):
        g = out.grad
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - xhat * gx))

    return _make(xhat, (a,), backward)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise InvalidInputError("concat needs at least one operand")
    if axis not in (-1, 0):
        raise InvalidInputError("concat supports axis -1 or 0")
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        g = out.grad
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            idx = (Ellipsis, slice(start, stop)) if axis == -1 else (slice(start, stop),)
            _accum(p, g[idx])

    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise InvalidInputError("transpose expects a 2-D operand")

    def backward(out):
        _accum(a, out.grad.T)

    return _make(a.value.T, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def backward(out):
        _accum(a, out.grad.reshape(a.value.shape))

    return _make(a.value.reshape(shape), (a,), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)

    def backward(out):
        g = np.zeros_like(a.value)
        g[..., start:stop] = out.grad
        _accum(a, g)

    return _make(a.value[..., start:stop], (a,), backward)


def _prepare_mask(mask, value_shape, axis) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise InvalidInputError("mask entries must be 0 or 1")
    mask = mask.astype(bool)
    if mask.ndim == len(value_shape) - 1:
        mask = np.expand_dims(mask, axis=-1)
    if mask.ndim != len(value_shape):
        raise InvalidInputError("mask rank must match operand (or omit the last axis)")
    return np.broadcast_to(mask, value_shape)


def reduce_max(a, axis: int, mask=None) -> Tensor:
    """Max over one axis; masked rows are ignored entirely.

    A slice with every row masked has no defined maximum and raises.
    """
    a = _as_tensor(a)
    if mask is None:
        work = a.value
    else:
        m = _prepare_mask(mask, a.value.shape, axis)
        if not m.any(axis=axis).all():
            raise InvalidInputError("reduce_max over a fully masked slice")
        work = np.where(m, a.value, -np.inf)
    idx = np.argmax(work, axis=axis)
    value = np.take_along_axis(work, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(out):
        g = np.zeros_like(a.value)
        np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
        _accum(a, g)

    return _make(value, (a,), backward)


def reduce_mean(a, axis: int, mask=None) -> Tensor:
    """Mean over one axis; with a mask, only unmasked rows contribute."""
    a = _as_tensor(a)
    if mask is None:
        value = a.value.mean(axis=axis)
        count = a.value.shape[axis]

        def backward(out):
            g = np.expand_dims(out.grad, axis) / count
            _accum(a, np.broadcast_to(g, a.value.shape).copy())

        return _make(value, (a,), backward)

    m = _prepare_mask(mask, a.value.shape, axis)
    counts = m.sum(axis=axis)
    if (counts == 0).any():
        raise InvalidInputError("reduce_mean over a fully masked slice")
    value = np.where(m, a.value, 0.0).sum(axis=axis) / counts

    def backward(out):
        g = np.expand_dims(out.grad / counts, axis)
        _accum(a, np.where(m, g, 0.0))

    return _make(value, (a,), backward)


def gather_rows(a, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(out):
        g = np.zeros_like(a.value)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    return _make(a.value[idx], (a,), backward)


def unit_rows(a) -> Tensor:
    """Normalize each row to unit Euclidean length."""
    a = _as_tensor(a)
    norms = np.linalg.norm(a.value, axis=-1, keepdims=True)
    if (norms == 0.0).any():
        raise InvalidInputError("cannot unit-normalize a zero row")
    value = a.value / norms

    def backward(out):
        g = out.grad
        y = out.value
        _accum(a, (g - y * (g * y).sum(axis=-1, keepdims=True)) / norms)

    return _make(value, (a,), backward)


def squared_error(pred, target) -> Tensor:
    """Mean squared error over all entries, as a scalar."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pred.value.shape:
        raise InvalidInputError(f"target shape {target.shape} != prediction shape {pred.value.shape}")
    diff = pred.value - target

    def backward(out):
        _accum(pred, (2.0 / diff.size) * diff * out.grad)

    return _make((diff ** 2).mean(), (pred,), backward)


def cross_entropy_soft(logits, targets) -> Tensor:
    """Mean cross entropy against full target distributions (rows sum to 1)."""
    logits = _as_tensor(logits)
    value2d = logits.value if logits.value.ndim == 2 else logits.value[None, :]
    targets2d = np.asarray(targets, dtype=DTYPE)
    if targets2d.ndim == 1:
        targets2d = targets2d[None, :]
    if targets2d.shape != value2d.shape:
        raise InvalidInputError("targets must match logits shape")
    shifted = value2d - value2d.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = (targets2d * (logz - shifted)).sum(axis=-1)

    def backward(out):
        probs = np.exp(shifted - logz)
        g = (probs - targets2d) * (out.grad / len(targets2d))
        _accum(logits, g.reshape(logits.value.shape))

    return _make(nll.mean(), (logits,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _as_tensor(logits)
    value2d = logits.value if logits.value.ndim == 2 else logits.value[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.shape[0] != value2d.shape[0]:
        raise InvalidInputError("one label per logits row required")
    shifted = value2d - value2d.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1)) + value2d.max(axis=-1)
    nll = logz - value2d[np.arange(len(labels)), labels]

    def backward(out):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(len(labels)), labels] -= 1.0
        g = probs * (out.grad / len(labels))
        _accum(logits, g.reshape(logits.value.shape))

    return _make(nll.mean(), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Propagate gradients from a recorded scalar loss to every parameter."""
    if loss.value.ndim != 0:
        raise UsageError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any parameter")
    if loss._done:
        raise UsageError("backward already ran for this recording")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.asarray(1.0, dtype=DTYPE)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
        node._done = True


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    """Per-parameter Adam moment accumulators, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float):
    """One bias-corrected Adam update. Parameters without a gradient are
    treated as zero-gradient."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in params:
        if p.name is None:
            raise UsageError("adam_step requires named parameters")
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
        v = state.v.get(p.name)
        if v is None:
            v = state.v[p.name] = np.zeros_like(p.value)
        if m.shape != p.value.shape:
            raise UsageError(f"moment shape mismatch for {p.name}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.value = p.value - lr * mhat / (np.sqrt(vhat) + state.eps)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr_peak: float, lr_min: float = 0.0) -> float:
    """Linear warmup to lr_peak, then cosine annealing down to lr_min."""
    if not 0 <= step <= total_steps:
        raise InvalidInputError("step out of range")
    if warmup_steps >= total_steps:
        raise InvalidInputError("warmup must be shorter than the schedule")
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + 0.5 * (lr_peak - lr_min) * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"GCKP"
CHECKPOINT_VERSION = 1


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(buf)}")
    return buf


def save_checkpoint(path, tensors: dict, config: dict):
    """Write named float64 tensors plus a config echo to a versioned file."""
    payload = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint back as ({name: ndarray}, config)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"not a checkpoint file: magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = json.loads(_read_exact(fh, cfg_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8")
            tensors[name] = data.reshape(shape).copy()
        return tensors, config


def tensor_fingerprint(tensors: dict) -> str:
    """Stable sha256 over named tensors; used to bind indexes to encoders."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()
