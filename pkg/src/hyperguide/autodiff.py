"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every primitive records a vector-Jacobian product that is itself written in
terms of primitives. Running ``Tape.gradient`` while an outer tape is active
therefore lets the outer tape differentiate through the backward pass, which
is what exact MAML needs. Nesting is capped at two tapes.

    >>> x = Tensor(3.0)
    >>> with Tape() as tape:
    ...     tape.watch(x)
    ...     y = x * x
    >>> float(tape.gradient(y, x).data)
    6.0
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

MAX_TAPE_DEPTH = 2

_uids = itertools.count()
_active_tapes: list["Tape"] = []


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ZeroNormError(ValueError):
    """Raised when a direction is requested from a zero vector."""


class Tensor:
    """Dense float64 array with an identity used by tapes."""

    __slots__ = ("data", "uid")
    __array_priority__ = 1000

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)
        self.uid = next(_uids)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.uid = next(_uids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return Tensor._wrap(x)
    return Tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """Fresh untracked copy; no tape sees a path through it."""
    return Tensor(as_tensor(x).data.copy())


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of primitive applications that touch watched tensors.

    Ops are recorded while the tape is the active context. ``gradient`` may be
    called after the ``with`` block exits or, for nested differentiation,
    while it is still open.
    """

    records: list = field(default_factory=list)
    generation: int = 0
    _live: set = field(default_factory=set, repr=False)
    _watched: dict = field(default_factory=dict, repr=False)
    _paused: bool = field(default=False, repr=False)

    def __enter__(self):
        if len(_active_tapes) >= MAX_TAPE_DEPTH:
            raise TapeError(f"tape nesting deeper than {MAX_TAPE_DEPTH} is not supported")
        self.generation = len(_active_tapes) + 1
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def watch(self, *tensors):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("only Tensors can be watched")
            self._live.add(t.uid)
            self._watched[t.uid] = t
        return tensors[0] if len(tensors) == 1 else tensors

    def watches(self, t: Tensor) -> bool:
        return t.uid in self._live

    def gradient(self, loss: Tensor, sources):
        """d loss / d sources. ``sources`` may be a Tensor, a sequence or a mapping.

        Sources the loss does not depend on get zero gradients.
        """
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss.uid not in self._live:
            raise TapeError("loss was not computed from anything watched by this tape")
        if isinstance(sources, Tensor):
            flat = [sources]
        elif isinstance(sources, Mapping):
            flat = list(sources.values())
        else:
            flat = list(sources)
        keep = {t.uid for t in flat}

        grads = {loss.uid: Tensor(np.ones(loss.shape))}
        self._paused = True
        try:
            for rec in reversed(self.records):
                g = grads.get(rec.output.uid)
                if g is None:
                    continue
                if rec.output.uid not in keep:
                    del grads[rec.output.uid]
                in_grads = rec.vjp(g)
                for t, gi in zip(rec.inputs, in_grads):
                    if gi is None or t.uid not in self._live:
                        continue
                    prev = grads.get(t.uid)
                    grads[t.uid] = gi if prev is None else add(prev, gi)
        finally:
            self._paused = False

        def pick(t):
            g = grads.get(t.uid)
            return Tensor(np.zeros(t.shape)) if g is None else g

        if isinstance(sources, Tensor):
            return pick(sources)
        if isinstance(sources, Mapping):
            return {k: pick(t) for k, t in sources.items()}
        return [pick(t) for t in flat]


@contextlib.contextmanager
def paused():
    """Stop every currently active tape from recording; tapes opened inside still record."""
    prev = [(t, t._paused) for t in _active_tapes]
    for t, _ in prev:
        t._paused = True
    try:
        yield
    finally:
        for t, p in prev:
            t._paused = p


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of ``loss`` for every watched tensor, keyed by tensor uid."""
    watched = list(tape._watched.values())
    grads = tape.gradient(loss, watched)
    return {t.uid: g for t, g in zip(watched, grads)}


def _emit(op: str, data, inputs: tuple, vjp) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    # a sum is non-finite iff some entry is (or the sum overflows, which is no better)
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteError(f"non-finite value produced by '{op}' (output shape {data.shape})")
    out = Tensor._wrap(data)
    for tape in _active_tapes:
        if tape._paused:
            continue
        if any(t.uid in tape._live for t in inputs):
            tape.records.append(_Record(op, inputs, out, lambda g, out=out: vjp(g, out)))
            tape._live.add(out.uid)
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    s = tsum(g, axes, keepdims=True) if axes else g
    return reshape(s, shape)


# elementwise binary ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g, out: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out):
        ga = div(g, b)
        return _unbroadcast(ga, a.shape), _unbroadcast(neg(mul(ga, out)), b.shape)

    return _emit("div", a.data / b.data, (a, b), vjp)


# elementwise unary -------------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g, out: (neg(g),))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _emit("pow", a.data ** p, (a,), lambda g, out: (mul(g, mul(p, power(a, p - 1.0))),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _emit("exp", np.exp(a.data), (a,), lambda g, out: (mul(g, out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", np.log(a.data), (a,), lambda g, out: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sqrt", np.sqrt(a.data), (a,), lambda g, out: (div(mul(g, 0.5), out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _emit("relu", a.data * mask, (a,), lambda g, out: (mul(g, mask),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _emit("tanh", np.tanh(a.data), (a,),
                 lambda g, out: (mul(g, sub(1.0, mul(out, out))),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    data[~pos] = ez / (1.0 + ez)
    return _emit("sigmoid", data, (a,), lambda g, out: (mul(g, mul(out, sub(1.0, out))),))


# linear algebra and reductions -------------------------------------------------

def swapaxes(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _emit("swapaxes", np.swapaxes(a.data, -1, -2), (a,), lambda g, out: (swapaxes(g),))


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g, out):
        return (_unbroadcast(matmul(g, swapaxes(b)), a.shape),
                _unbroadcast(matmul(swapaxes(a), g), b.shape))

    return _emit("matmul", np.matmul(a.data, b.data), (a, b), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _emit("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _emit("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, out: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, out: (reshape(g, a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    return _emit("slice", a.data[index], (a,), lambda g, out: (_scatter(g, index, a.shape),))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def _scatter(g, index, shape) -> Tensor:
    g = as_tensor(g)
    data = np.zeros(shape)
    if _is_basic_index(index):
        data[index] += g.data
    else:
        np.add.at(data, index, g.data)
    return _emit("scatter", data, (g,), lambda h, out: (getitem(h, index),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g, out):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _emit("concat", np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)

    def vjp(g, out):
        inner = tsum(mul(g, out), axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _emit("softmax", e / e.sum(axis=axis, keepdims=True), (a,), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy over the example axis (second to last).

    ``logits`` has shape (..., n, C) and ``labels`` integer shape (..., n);
    the result has the leading batch shape (a scalar for plain 2-D logits).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n_cls = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError("label out of range")
    n = logits.shape[-2]
    onehot = np.eye(n_cls)[labels]
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    loss = (lse - picked).mean(axis=-1)

    def vjp(g, out):
        scale = reshape(g, g.shape + (1, 1))
        return (mul(sub(softmax(logits, -1), onehot), mul(scale, 1.0 / n)),)

    return _emit("softmax_ce", loss, (logits,), vjp)


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """L2 norm along ``axis``; the subgradient at the origin is zero."""
    a = as_tensor(a)
    nrm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    zero = (nrm == 0).astype(np.float64)
    out_data = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def vjp(g, out):
        gk = g if keepdims else reshape(g, nrm.shape)
        ok = out if keepdims else reshape(out, nrm.shape)
        return (mul(gk, div(a, add(ok, zero))),)

    return _emit("norm", out_data, (a,), vjp)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na, nb = norm(a, axis), norm(b, axis)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise ZeroNormError("cosine similarity of a zero vector is undefined")
    return div(tsum(mul(a, b), axis), mul(na, nb))


# numerical oracle -------------------------------------------------------------

def finite_diff(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# optimisation helpers ---------------------------------------------------------

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict:
    """Rescale all gradients jointly so that their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{k}'")
    n = global_norm(grads)
    if n <= max_norm:
        return dict(grads)
    scale = max_norm / n
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update. Returns new params and new state; inputs are untouched."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    step = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - ADAM_B1 ** step
    c2 = 1.0 - ADAM_B2 ** step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{k}' {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{k}'")
        m = ADAM_B1 * state.m.get(k, np.zeros_like(p)) + (1 - ADAM_B1) * g
        v = ADAM_B2 * state.v.get(k, np.zeros_like(p)) + (1 - ADAM_B2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(step, m_new, v_new)


def tensors(params: Mapping[str, np.ndarray]) -> dict:
    return {k: Tensor(v) for k, v in params.items()}


def value_and_grad(fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn`` on tensor copies of ``params``; return (loss, numpy gradients)."""
    ts = tensors(params)
    with Tape() as tape:
        tape.watch(*ts.values())
        loss = fn(ts)
    grads = tape.gradient(loss, ts)
    return float(loss.data), {k: g.data for k, g in grads.items()}
