"""Minimal reverse-mode autodiff tensor engine.

Eager numpy-backed tensors with a dynamic per-forward tape: every operation
records its parents and a vector-Jacobian product closure on the result
tensor. ``backward(loss)`` walks the tape in reverse topological order and
accumulates ``.grad`` on every reachable tensor with ``requires_grad``.

Precision is a process-wide switch (``set_default_dtype``): float64 for
gradient-check builds, float32 for training and benchmark builds.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NumericalError(RuntimeError):
    """Raised when a computation produces NaN/Inf where it must not."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the process-wide float dtype ("float32"/"float64" or numpy dtype)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (test helper)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording inside the context (inference / teacher evals)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional real array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, expected scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the primitive set")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


class Parameter(Tensor):
    """Trainable tensor with a unique dotted name path within its model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str | None = None):
        # owns its buffer: parameters are mutated in place by optimizers
        super().__init__(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


# -- element-wise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        if isinstance(a, (int, float)):
            a, b = b, a
        s = float(b)
        return Tensor._from_op(a.data + s, (a,), lambda g: (g,))
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        if isinstance(a, (int, float)):
            a, b = b, a
        s = float(b)
        return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,))
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-dimension broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} have mismatched inner dims")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ b_data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a_data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


# -- activations and normalization -------------------------------------------


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    x_data = x.data

    def vjp(g):
        return (g * (sig * (1.0 + x_data * (1.0 - sig))),)

    return Tensor._from_op(out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned per-channel scale/offset."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match channels ({c},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    gain_data = gain.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gy = g * gain_data
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), vjp)


# -- lookup, shaping, reduction -----------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integer, got dtype {ids.dtype}")
    out = table.data[ids]
    vocab = table.shape

    def vjp(g):
        gt = np.zeros(vocab, dtype=g.dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._from_op(out, (table,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    base = list(tensors[0].shape)
    ax = axis % len(base)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != ax and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return Tensor._from_op(out, tensors, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.shape

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor._from_op(out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return Tensor._from_op(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    count = x.data.size if axis is None else np.prod(
        [shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return Tensor._from_op(out, (x,), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(out, (x,), vjp)


def index(x: Tensor, idx) -> Tensor:
    """Basic slicing/int indexing (no repeated elements, so VJP is assignment)."""
    out = x.data[idx]
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return Tensor._from_op(out, (x,), vjp)


def gather_time(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the time axis (second-to-last): out[..., t, :] = x[..., idx[..., t], :]."""
    idx = np.asarray(idx)
    if idx.ndim != x.ndim - 1:
        raise ShapeError(
            f"gather_time: index shape {idx.shape} incompatible with input {x.shape}"
        )
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        batch = idx.shape[:-1]
        grids = np.ix_(*[np.arange(s) for s in batch]) if batch else ()
        lead = tuple(np.broadcast_to(gr[..., None, None], g.shape) for gr in grids)
        tix = np.broadcast_to(idx[..., None], g.shape)
        cix = np.broadcast_to(np.arange(shape[-1]), g.shape)
        np.add.at(gx, lead + (tix, cix), g)
        return (gx,)

    return Tensor._from_op(out, (x,), vjp)


# -- time-axis primitives (channels-last layout: (..., T, C)) -----------------


def depthwise_conv1d(x: Tensor, weight: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time with zero 'same' padding.

    x: (..., T, C); weight: (K, C) with K odd. out[..., t, c] =
    sum_k x[..., t+k-K//2, c] * w[k, c].
    """
    k, c = weight.shape
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv1d: kernel size {k} must be odd")
    if x.shape[-1] != c:
        raise ShapeError(
            f"depthwise_conv1d: input channels {x.shape[-1]} != weight channels {c}"
        )
    half = k // 2
    t = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j : j + t, :] * weight.data[j]
    x_data = x.data

    def vjp(g):
        gp = np.pad(g, pad)
        gx = np.zeros_like(x_data)
        gw = np.zeros_like(weight.data)
        lead = tuple(range(g.ndim - 2))
        for j in range(k):
            # correlation flips: d out[t] / d x[t + j - half]
            gx += gp[..., k - 1 - j : k - 1 - j + t, :] * weight.data[j]
            gw[j] = (xp[..., j : j + t, :] * g).sum(axis=lead + (-2,))
        return gx, gw

    return Tensor._from_op(out, (x, weight), vjp)


def avgpool2_time(x: Tensor) -> Tensor:
    """Factor-2 average pooling over time; odd lengths pad the last frame by repetition."""
    t = x.shape[-2]
    odd = t % 2 == 1
    xd = x.data
    if odd:
        xd = np.concatenate([xd, xd[..., -1:, :]], axis=-2)
    out = 0.5 * (xd[..., 0::2, :] + xd[..., 1::2, :])
    shape = x.shape

    def vjp(g):
        gx_full = np.repeat(0.5 * g, 2, axis=-2)
        if odd:
            gx = gx_full[..., :t, :].copy()
            gx[..., -1, :] += gx_full[..., t, :]
        else:
            gx = gx_full
        return (np.ascontiguousarray(gx),)

    return Tensor._from_op(out, (x,), vjp)


def upsample2_time(x: Tensor, target_len: int) -> Tensor:
    """Factor-2 nearest-neighbor upsampling over time, cropped to target_len."""
    t_in = x.shape[-2]
    if not t_in <= target_len <= 2 * t_in:
        raise ShapeError(
            f"upsample2_time: target length {target_len} not in [{t_in}, {2 * t_in}]"
        )
    out = np.repeat(x.data, 2, axis=-2)[..., :target_len, :]

    def vjp(g):
        full = 2 * t_in
        if target_len < full:
            pad = [(0, 0)] * (g.ndim - 2) + [(0, full - target_len), (0, 0)]
            g = np.pad(g, pad)
        return (g[..., 0::2, :] + g[..., 1::2, :],)

    return Tensor._from_op(out, (x,), vjp)


def fourier_scalar_embed(values, freqs: np.ndarray) -> Tensor:
    """Sinusoidal embedding of scalars: concat(cos(2*pi*f*v), sin(2*pi*f*v)).

    values: scalar or (B,) array; freqs: (n,) fixed frequency bank. Pure
    function of its inputs; not differentiated (inputs carry no gradient).
    """
    v = np.atleast_1d(np.asarray(values, dtype=_DEFAULT_DTYPE))
    ang = 2.0 * np.pi * v[:, None] * np.asarray(freqs, dtype=_DEFAULT_DTYPE)[None, :]
    return Tensor(np.concatenate([np.cos(ang), np.sin(ang)], axis=-1))


# -- backward pass -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable requires_grad tensor.

    Repeated calls without zeroing grads sum gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad (no tape recorded)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = flowing.get(id(p))
            flowing[id(p)] = pg if acc is None else acc + pg


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    """Per-run Adam state: step counter and per-parameter moment arrays (by name)."""

    step: int
    m: dict
    v: dict
    lr: float
    beta1: float
    beta2: float
    eps: float


class Adam:
    """Standard Adam with bias correction; deterministic given grads."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names) or None in names:
            raise ValueError("Adam: parameters must carry unique names")
        self.state = AdamState(
            step=0,
            m={p.name: np.zeros_like(p.data) for p in self.params},
            v={p.name: np.zeros_like(p.data) for p in self.params},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, self.state)


def fill_missing_grads(params) -> None:
    """Zero-fill grads of parameters a particular step legitimately did not
    touch (e.g. the null-text condition in a batch with no dropped samples)."""
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def adam_step(params, state: AdamState) -> None:
    """One Adam update over `params` using their populated .grad fields."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: missing grad for parameter {p.name!r}")
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {p.name!r}"
            )
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    rel_err: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    passed: bool


# Relative error uses an absolute floor so near-zero gradients compare on an
# absolute scale instead of blowing up 0/0.
_REL_FLOOR = 1e-4


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def grad_check(f, x: Tensor, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f against central differences."""
    probe = Tensor(x.data.astype(np.float64, copy=True), requires_grad=True)
    loss = f(probe)
    backward(loss)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(probe.data)).item()
        flat[i] = orig - eps
        lo = f(Tensor(probe.data)).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    rel = _rel_err(analytic, numeric)
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, rel, analytic, numeric, max_rel < tol)


def grad_check_params(
    loss_fn, params, eps: float = 1e-5, tol: float = 1e-4,
    rng: np.random.Generator | None = None, max_checks_per_param: int = 8,
):
    """Finite-difference check of d loss / d param for a parameter collection.

    Runs one analytic backward, then central differences on a random subset of
    elements per parameter (all elements when the tensor is small enough).
    Returns (max_rel_err, worst_param_name, per_param dict).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)

    worst = 0.0
    worst_name = None
    per_param = {}
    for p in params:
        if p.grad is None:
            raise ValueError(f"grad_check_params: no grad for {p.name!r}")
        n = p.data.size
        if n <= max_checks_per_param:
            picks = np.arange(n)
        else:
            picks = rng.choice(n, size=max_checks_per_param, replace=False)
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        errs = []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            errs.append(float(_rel_err(np.asarray(gflat[i]), np.asarray(numeric))))
        e = max(errs) if errs else 0.0
        per_param[p.name] = e
        if e > worst:
            worst, worst_name = e, p.name
    return worst, worst_name, per_param


# -- module system ---------------------------------------------------------------


class Module:
    """Container tracking Parameters and sub-Modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def assign_parameter_names(self, prefix: str = "") -> None:
        """Stamp each Parameter with its dotted path; paths must be unique."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        self._modules[str(len(self._list))] = mod
        self._list.append(mod)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Linear(Module):
    """y = x @ W + b with fan-in scaled normal init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        super().__init__()
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = rng.standard_normal((in_dim, out_dim)) / math.sqrt(in_dim)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.offset = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset, eps=self.eps)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(rng.standard_normal((vocab, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.weight, ids)
