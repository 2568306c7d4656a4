"""Reverse-mode automatic differentiation over dense numpy tensors.

Operations executed inside an active :class:`Tape` record themselves in
creation order; ``Tape.backward`` replays that list in reverse, skipping
nodes the loss never reached. Gradient buffers are treated as immutable:
accumulation rebinds ``tensor.grad`` rather than writing in place, so a
gradient may safely alias another node's buffer or a view.

Cosine similarity is defined as 0 (with zero gradient) whenever either
row has norm below 1e-12, which keeps collapsed embeddings finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_DTYPE = np.float64
_CHECK_FINITE = True
_ACTIVE_TAPE: "Tape | None" = None

COSINE_EPS = 1e-12


class AutodiffError(ValueError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


def set_default_dtype(dtype) -> None:
    """Switch tensor precision; float64 for checks, float32 allowed for speed."""
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise AutodiffError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not math.isfinite(float(np.sum(arr))):
        raise AutodiffError(f"{op}: non-finite output")


class Tensor:
    """Dense real tensor; a leaf parameter when created directly."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no gradient flow."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of op outputs; creation order is topological order."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise AutodiffError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and sweep the record once, in reverse."""
        if loss.size != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    if _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _ACTIVE_TAPE._nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Rebinding (never in-place) keeps aliased/viewed gradient buffers valid.
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise AutodiffError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    _check_finite(data, "add")
    out = Tensor(data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise AutodiffError(f"elementwise_mul: incompatible shapes {a.shape} and {b.shape}") from None
    _check_finite(data, "elementwise_mul")
    out = Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * s
    _check_finite(data, "scalar_mul")
    out = Tensor(data)

    def backward(g):
        _accum(a, g * s)

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data
    _check_finite(data, "matmul")
    out = Tensor(data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record(out, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise AutodiffError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise AutodiffError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    _check_finite(data, "concat")
    out = Tensor(data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                _accum(t, g[tuple(index)])

    return _record(out, tuple(tensors), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise AutodiffError(f"slice_cols: bad range [{start}:{stop}] for shape {a.shape}")
    out = Tensor(a.data[:, start:stop])

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[:, start:stop] = g
        _accum(a, buf)

    return _record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    out = Tensor(data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(data)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _record(out, (a,), backward)


def sum(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis)
    _check_finite(data, "sum")
    out = Tensor(data)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise AutodiffError(f"reshape: cannot view {a.shape} as {shape}") from None
    out = Tensor(data)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise AutodiffError(f"transpose: expected 2-d tensor, got shape {a.shape}")
    out = Tensor(a.data.T)

    def backward(g):
        _accum(a, g.T)

    return _record(out, (a,), backward)


def rows(table: Tensor, indices) -> Tensor:
    """Gather rows; gradients scatter-add back into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise AutodiffError(f"rows: need 2-d table and 1-d indices, got {table.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise AutodiffError(f"rows: index out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _accum(table, buf)

    return _record(out, (table,), backward)


def l2_norm_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise AutodiffError(f"l2_norm_rows: expected 2-d tensor, got shape {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1))
    out = Tensor(norms)

    def backward(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        _accum(a, (g / safe)[:, None] * a.data * (norms > 0.0)[:, None])

    return _record(out, (a,), backward)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity; rows with norm < 1e-12 yield 0, zero grad."""
    if a.shape != b.shape or a.ndim != 2:
        raise AutodiffError(f"cosine_rows: incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    dots = (a.data * b.data).sum(axis=1)
    ok = (na > COSINE_EPS) & (nb > COSINE_EPS)
    denom = np.where(ok, na * nb, 1.0)
    data = np.where(ok, dots / denom, 0.0)
    _check_finite(data, "cosine_rows")
    out = Tensor(data)

    def backward(g):
        gm = np.where(ok, g, 0.0)
        cos = data
        if a.requires_grad:
            da = (gm / denom)[:, None] * b.data - (gm * cos / np.where(ok, na * na, 1.0))[:, None] * a.data
            _accum(a, np.where(ok[:, None], da, 0.0))
        if b.requires_grad:
            db = (gm / denom)[:, None] * a.data - (gm * cos / np.where(ok, nb * nb, 1.0))[:, None] * b.data
            _accum(b, np.where(ok[:, None], db, 0.0))

    return _record(out, (a, b), backward)


def softmax_cross_entropy(logits: Tensor, target_indices) -> Tensor:
    """Fused, shift-stabilized softmax + cross entropy; one loss per row."""
    targets = np.asarray(target_indices, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise AutodiffError(
            f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise AutodiffError("softmax_cross_entropy: target index out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    batch = np.arange(z.shape[0])
    losses = np.log(total) - shifted[batch, targets]
    _check_finite(losses, "softmax_cross_entropy")
    out = Tensor(losses)
    probs = exp / total[:, None]

    def backward(g):
        dz = probs * g[:, None]
        dz[batch, targets] -= g
        _accum(logits, dz)

    return _record(out, (logits,), backward)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax for inference-time probabilities."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_global_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    grads = [p for p in params if p.requires_grad and p.grad is not None]
    total = math.sqrt(math.fsum(float((p.grad * p.grad).sum()) for p in grads))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / total
        for p in grads:
            p.grad = p.grad * scale
    return total


class Adam:
    """Adam with bias correction; frozen tensors are never touched.

    ``row_masks`` optionally restricts updates of a named tensor to the
    rows where the mask is 1 (used for partially trainable embeddings).
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 row_masks: Mapping[str, np.ndarray] | None = None):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items() if p.requires_grad}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items() if p.requires_grad}
        self.row_masks = {n: np.asarray(m, dtype=_DTYPE) for n, m in (row_masks or {}).items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise AutodiffError(f"adam_step: gradient shape {g.shape} != param shape {p.data.shape} for {name}")
            mask = self.row_masks.get(name)
            if mask is not None:
                g = g * mask[:, None]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class GradCheckReport:
    """Per-parameter max relative error of backward vs central differences."""

    max_rel_err: dict[str, float]

    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    def failures(self, tolerance: float) -> list[str]:
        return [n for n, e in self.max_rel_err.items() if e >= tolerance]

    def passed(self, tolerance: float) -> bool:
        return not self.failures(tolerance)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               h: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be a deterministic function of ``params`` returning a
    scalar tensor. Relative error uses ``max(|analytic|, |numeric|, floor)``
    as the denominator.
    """
    zero_grads(params.values())
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {n: (np.array(p.grad) if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}
    report: dict[str, float] = {}
    for name, p in params.items():
        worst = 0.0
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(loss_fn().data)
            flat[j] = orig - h
            f_minus = float(loss_fn().data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
        report[name] = worst
    return GradCheckReport(report)
