"""Dense float32 tensors with reverse-mode autodiff on a recording tape.

Every op computes eagerly with numpy and, when a tape is active and an
input requires gradients, appends a backward rule to the tape. Calling
``backward`` on a scalar walks the recorded ops in reverse order, which is
a reverse topological order because ops are recorded in execution order.

Forward outputs are checked for NaN/Inf; a non-finite result raises
``NumericError`` at the op that produced it. Broadcasting is supported
along leading axes and singleton dims (numpy semantics); gradients are
summed back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

_ACTIVE_TAPE: "Tape | None" = None

_MALLOC_TUNED = False


def tune_allocator() -> None:
    """Keep large numpy buffers in the heap instead of mmap round trips.

    glibc returns big allocations to the OS on free, so a training step
    page-faults every fresh intermediate. Raising the mmap/trim thresholds
    removes that tax (roughly 25% of step time). No-op off glibc; safe to
    call repeatedly.
    """
    global _MALLOC_TUNED
    if _MALLOC_TUNED:
        return
    _MALLOC_TUNED = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        # 32 MB: far above any single activation buffer, small enough that
        # the arena trims back instead of growing without bound
        libc.mallopt(-3, 32 << 20)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 32 << 20)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense float32 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_owned", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._grad_owned = False
        self._tape: Tape | None = None

    # -- introspection -------------------------------------------------

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
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ----------------------------------------------

    def detach(self) -> "Tensor":
        """A tensor sharing this data but cut from the tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._grad_owned = False
        out._tape = None
        return out

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Keep by reference; copy lazily on the second accumulation so
            # single-consumer nodes pay nothing.
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self) -> None:
        """Backpropagate from this scalar through its recording tape.

        Repeated calls without zeroing grads accumulate into ``grad``.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        tape = self._tape() if self._tape is not None else None
        if tape is None:
            raise ContractError("backward() on a tensor whose tape is gone or never existed")
        tape.backward(self)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Tape:
    """Ordered record of ops for one reverse-mode sweep.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``. Ops recorded earlier are replayed later during the
    backward walk, so traversal order is reverse topological. A tape is not
    thread safe; never run two backward passes on one tape concurrently.

    Recorded tensors hold only a weak reference back to their tape, so
    dropping the tape frees the whole graph promptly (no gc cycles).
    """

    __slots__ = ("_entries", "__weakref__")

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out.requires_grad = True
        out._tape = weakref.ref(self)
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Walk recorded ops in reverse, accumulating into leaf ``grad``s.

        Gradient flow between recorded intermediates lives in a per-call
        table, so calling backward again adds exactly one more unit of
        gradient to every leaf.
        """
        if loss.data.size != 1:
            raise ContractError("backward() requires a scalar loss")
        flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        flow_pop = flow.pop
        flow_get = flow.get
        for out, inputs, backward_fn in reversed(self._entries):
            g = flow_pop(id(out), None)
            if g is None:
                continue
            grads = backward_fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is not None:
                    key = id(inp)
                    prev = flow_get(key)
                    flow[key] = gi if prev is None else prev + gi
                else:
                    inp.accumulate_grad(gi)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _ACTIVE_TAPE
    saved, _ACTIVE_TAPE = _ACTIVE_TAPE, None
    try:
        yield
    finally:
        _ACTIVE_TAPE = saved


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        _ACTIVE_TAPE.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    for x, y in zip(reversed(a), reversed(b)):
        if x != y and x != 1 and y != 1:
            return False
    return True


# -- elementwise ---------------------------------------------------------


def _binary(a, b, op: str, fwd, bwd):
    a, b = _wrap(a), _wrap(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor.__new__(Tensor)
    with np.errstate(all="ignore"):  # non-finite results raise below instead
        out.data = fwd(a.data, b.data)
    out.requires_grad = False
    out.grad = None
    out._grad_owned = False
    out._tape = None
    _check_finite(out.data, op)
    # gradients are only materialized for inputs that can use them
    return _record(out, (a, b), bwd(a, b, a.requires_grad, b.requires_grad))


def add(a, b) -> Tensor:
    def bwd(a, b, need_a, need_b):
        def fn(g):
            return (
                _unbroadcast(g, a.shape) if need_a else None,
                _unbroadcast(g, b.shape) if need_b else None,
            )

        return fn

    return _binary(a, b, "add", np.add, bwd)


def sub(a, b) -> Tensor:
    def bwd(a, b, need_a, need_b):
        def fn(g):
            return (
                _unbroadcast(g, a.shape) if need_a else None,
                _unbroadcast(-g, b.shape) if need_b else None,
            )

        return fn

    return _binary(a, b, "sub", np.subtract, bwd)


def mul(a, b) -> Tensor:
    def bwd(a, b, need_a, need_b):
        ad, bd = a.data, b.data

        def fn(g):
            return (
                _unbroadcast(g * bd, a.shape) if need_a else None,
                _unbroadcast(g * ad, b.shape) if need_b else None,
            )

        return fn

    return _binary(a, b, "mul", np.multiply, bwd)


def div(a, b) -> Tensor:
    def bwd(a, b, need_a, need_b):
        ad, bd = a.data, b.data

        def fn(g):
            ga = g / bd if need_a else None
            gb = -g * ad / (bd * bd) if need_b else None
            return (
                _unbroadcast(ga, a.shape) if need_a else None,
                _unbroadcast(gb, b.shape) if need_b else None,
            )

        return fn

    return _binary(a, b, "div", np.divide, bwd)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if (a.data < 0).any():
        raise DomainError("sqrt of negative input")
    out_data = np.sqrt(a.data)
    out = Tensor(out_data)
    _check_finite(out.data, "sqrt")

    def fn(g):
        return (g * (0.5 / np.maximum(out_data, np.float32(1e-30))),)

    return _record(out, (a,), fn)


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    out = Tensor(out_data)
    _check_finite(out.data, "exp")

    def fn(g):
        return (g * out_data,)

    return _record(out, (a,), fn)


def log(a) -> Tensor:
    a = _wrap(a)
    if (a.data <= 0).any():
        raise DomainError("log of non-positive input")
    out = Tensor(np.log(a.data))
    _check_finite(out.data, "log")
    ad = a.data

    def fn(g):
        return (g / ad,)

    return _record(out, (a,), fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # sigma(x) = (1 + tanh(x/2)) / 2: exact, overflow-free, one transcendental
    out = np.tanh(x * np.float32(0.5))
    out += np.float32(1.0)
    out *= np.float32(0.5)
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x), the swish gate used by the gated MLP."""
    a = _wrap(a)
    s = _sigmoid(a.data)
    out = Tensor(a.data * s)
    _check_finite(out.data, "silu")
    ad = a.data

    def fn(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _record(out, (a,), fn)


# -- reductions ------------------------------------------------------------


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        if not -ndim <= axis < ndim:
            raise DimensionError(f"axis {axis} out of range for ndim {ndim}")
        return axis % ndim
    raise DimensionError(f"axis must be int or None, got {axis!r}")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    ax = _norm_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=ax, keepdims=keepdims, dtype=np.float32))
    _check_finite(out.data, "sum")
    shape = a.shape

    def fn(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), fn)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.size if ax is None else a.shape[ax]
    out = Tensor(a.data.mean(axis=ax, keepdims=keepdims, dtype=np.float32))
    _check_finite(out.data, "mean")
    shape = a.shape
    inv_n = np.float32(1.0 / n)

    def fn(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * inv_n, shape),)

    return _record(out, (a,), fn)


# -- shape manipulation -----------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    try:
        out = Tensor.__new__(Tensor)
        out.data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    out.requires_grad = False
    out.grad = None
    out._grad_owned = False
    out._tape = None
    orig = a.shape

    def fn(g):
        return (g.reshape(orig),)

    return _record(out, (a,), fn)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _wrap(a)
    out = Tensor.__new__(Tensor)
    # contiguous output: batched matmul on permuted views hits a slow path
    out.data = np.ascontiguousarray(np.transpose(a.data, axes))
    out.requires_grad = False
    out.grad = None
    out._grad_owned = False
    out._tape = None
    inv = None if axes is None else tuple(np.argsort(axes))

    def fn(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record(out, (a,), fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis, differentiable."""
    a = _wrap(a)
    ax = _norm_axis(axis, a.ndim)
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(a.ndim))
    out = Tensor.__new__(Tensor)
    out.data = a.data[idx]
    out.requires_grad = False
    out.grad = None
    out._grad_owned = False
    out._tape = None
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=np.float32)
        full[idx] = g
        return (full,)

    return _record(out, (a,), fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    ax = _norm_axis(axis, parts[0].ndim)
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    sizes = [p.shape[ax] for p in parts]

    def fn(g):
        grads = []
        offset = 0
        for s in sizes:
            idx = tuple(
                slice(None) if i != ax else slice(offset, offset + s) for i in range(g.ndim)
            )
            grads.append(g[idx])
            offset += s
        return tuple(grads)

    return _record(out, tuple(parts), fn)


# -- matmul and lookups -------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    s = x.swapaxes(-1, -2)
    # 2D gemm handles a transposed view natively; batched gemm does not
    return s if x.ndim <= 2 else np.ascontiguousarray(s)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    _check_finite(out.data, "matmul")
    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def fn(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(bd)), a_shape) if need_a else None
        gb = _unbroadcast(np.matmul(_swap_last(ad), g), b_shape) if need_b else None
        return (ga, gb)

    return _record(out, (a, b), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise DimensionError("embedding ids out of range")
    out = Tensor(table.data[ids])
    v, d = table.shape

    def fn(g):
        gt = np.zeros((v, d), dtype=np.float32)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _record(out, (table,), fn)


def take_last_axis(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis (e.g. target logits)."""
    a = _wrap(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(f"index shape {idx.shape} must match leading dims {a.shape[:-1]}")
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=np.float32)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _record(out, (a,), fn)


def softmax_rows(a, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row-stabilized softmax over the last axis; rows sum to 1.

    ``additive_mask`` (a constant, e.g. the causal mask) is added to the
    input before normalization without appearing on the tape.
    """
    a = _wrap(a)
    logits = a.data if additive_mask is None else a.data + additive_mask
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(out_data)
    _check_finite(out.data, "softmax_rows")

    def fn(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _record(out, (a,), fn)


def constant(data) -> Tensor:
    """A tensor that never takes gradients (masks, rotary tables)."""
    return Tensor(data)


# -- fused kernels for the transformer hot path --------------------------------
#
# These are ordinary tape ops with hand-derived backward rules, fused to cut
# allocation and dispatch overhead in the training loop. The composed
# equivalents remain the reference; tests check both against oracles.


def rms_normalize(h: Tensor, gamma: Tensor, eps: float) -> Tensor:
    """h / sqrt(mean(h^2, last) + eps) * gamma, one tape node."""
    h, gamma = _wrap(h), _wrap(gamma)
    hd = h.data
    with np.errstate(over="ignore"):
        ms = np.mean(np.square(hd), axis=-1, keepdims=True, dtype=np.float32)
    # an overflowed energy would silently normalize to zero; surface it here
    _check_finite(ms, "rms_normalize")
    ms += np.float32(eps)
    rinv = 1.0 / np.sqrt(ms)
    normed = hd * rinv
    out = Tensor.__new__(Tensor)
    out.data = normed * gamma.data
    out.requires_grad = False
    out.grad = None
    out._grad_owned = False
    out._tape = None
    _check_finite(out.data, "rms_normalize")
    d = hd.shape[-1]
    need_h, need_g = h.requires_grad, gamma.requires_grad

    def fn(g):
        w = g * gamma.data
        gh = None
        if need_h:
            radial = np.sum(w * hd, axis=-1, keepdims=True, dtype=np.float32)
            radial *= rinv * rinv / np.float32(d)
            gh = (w - hd * radial) * rinv
        gg = None
        if need_g:
            gg = _unbroadcast(g * normed, gamma.shape)
        return (gh, gg)

    return _record(out, (h, gamma), fn)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (i, i + half) by position-dependent angles.

    ``cos``/``sin`` broadcast against the two feature halves; the backward
    rule is the inverse rotation applied to the gradient.
    """
    x = _wrap(x)
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out_data = np.empty_like(x.data)
    out_data[..., :half] = x1 * cos - x2 * sin
    out_data[..., half:] = x1 * sin + x2 * cos
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._grad_owned = False
    out._tape = None

    def fn(g):
        g1, g2 = g[..., :half], g[..., half:]
        gx = np.empty_like(g)
        gx[..., :half] = g1 * cos + g2 * sin
        gx[..., half:] = g2 * cos - g1 * sin
        return (gx,)

    return _record(out, (x,), fn)


def attention_core(q: Tensor, k: Tensor, v: Tensor, additive_mask: np.ndarray) -> Tensor:
    """softmax(q k^T + mask) v over the last two axes, one tape node.

    Inputs are [batch, heads, T, head_dim] with the scale already folded
    into q. Saves the probability tensor for the closed-form backward.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    kt = _swap_last(k.data)
    scores = np.matmul(q.data, kt)
    scores += additive_mask
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    probs = scores
    out = Tensor.__new__(Tensor)
    out.data = np.matmul(probs, v.data)
    out.requires_grad = False
    out.grad = None
    out._grad_owned = False
    out._tape = None
    _check_finite(out.data, "attention_core")
    need_q, need_k, need_v = q.requires_grad, k.requires_grad, v.requires_grad

    def fn(g):
        gv = np.matmul(_swap_last(probs), g) if need_v else None
        gq = gk = None
        if need_q or need_k:
            dprobs = np.matmul(g, _swap_last(v.data))
            dprobs *= probs
            dot = dprobs.sum(axis=-1, keepdims=True)
            # dscores = probs * (dprobs_raw - dot); dprobs already holds
            # probs * dprobs_raw, so subtract probs * dot
            dprobs -= probs * dot
            dscores = dprobs
            if need_q:
                gq = np.matmul(dscores, k.data)
            if need_k:
                gk = np.matmul(_swap_last(dscores), q.data)
        return (gq, gk, gv)

    return _record(out, (q, k, v), fn)


# -- gradient verification -----------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
    max_probes: int = 32,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    Probes at most ``max_probes`` random coordinates of ``x``. The error at
    each coordinate is |analytic - fd| / (|fd| + 1e-8).
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    rng = rng or np.random.default_rng(0)

    base = np.ascontiguousarray(x.data, dtype=np.float32)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
        if loss.size != 1:
            raise ContractError("grad_check requires a scalar-valued function")
        tape.backward(loss)
    if probe.grad is None:
        analytic = np.zeros(base.size, dtype=np.float64)
    else:
        analytic = probe.grad.reshape(-1).astype(np.float64)

    n = base.size
    coords = np.arange(n) if n <= max_probes else rng.choice(n, size=max_probes, replace=False)
    worst = 0.0
    flat = base.reshape(-1)
    for c in coords:
        orig = flat[c]
        with no_grad():
            flat[c] = orig + step
            hi = float(f(Tensor(base)).item())
            hi_x = float(flat[c])
            flat[c] = orig - step
            lo = float(f(Tensor(base)).item())
            lo_x = float(flat[c])
        flat[c] = orig
        # divide by the realized float32 step, not the nominal one
        fd = (hi - lo) / (hi_x - lo_x)
        err = abs(analytic[c] - fd) / (abs(fd) + 1e-8)
        worst = max(worst, err)
    return worst
