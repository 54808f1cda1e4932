"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps a C-contiguous float64 ndarray. Primitive operations run
eagerly; while a Tape is active (see `recording`), every application whose
inputs require gradients is appended to the tape. `backward` replays the
tape once, in reverse, accumulating vector-Jacobian products into the
`.grad` of each reachable leaf.

Non-finite values are an error state everywhere: constructing a tensor
from, or producing, NaN/Inf raises NonFiniteError instead of propagating
silently.

Broadcasting is restricted to leading axes: shapes align from the right
and a size-1 (or absent) dimension may only broadcast if every dimension
to its left in the same operand is also size 1 or absent.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class GraphError(RuntimeError):
    """The requested autodiff operation has no recorded graph to work on."""


class TapeNode:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications for one computation."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


@contextmanager
def recording(tape: Tape | None = None):
    """Activate `tape` (or a fresh one) for the duration of the block."""
    t = Tape() if tape is None else tape
    _TAPES.append(t)
    try:
        yield t
    finally:
        _TAPES.pop()


def tape_active() -> bool:
    return bool(_TAPES)


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic; the functional forms below are the primary API
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out_data = np.asarray(out_data, dtype=np.float64)
    if not out_data.flags["C_CONTIGUOUS"]:
        out_data = np.ascontiguousarray(out_data)
    out.data = out_data
    out.grad = None
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(i.requires_grad for i in inputs)
    out.requires_grad = track
    out.tape = tape if track else None
    if track:
        tape.nodes.append(TapeNode(op, inputs, out, vjp))
    return out


def _leading_bcast_shape(sa: tuple[int, ...], sb: tuple[int, ...], op: str) -> tuple[int, ...]:
    """Output shape for leading-axes-only broadcasting, or ShapeError."""
    n = max(len(sa), len(sb))
    a = (1,) * (n - len(sa)) + tuple(sa)
    b = (1,) * (n - len(sb)) + tuple(sb)
    out = []
    a_started = b_started = False
    for da, db in zip(a, b):
        if da != db:
            if da == 1:
                if a_started:
                    raise ShapeError(f"{op}: inner-axis broadcast of {sa} against {sb}")
            elif db == 1:
                if b_started:
                    raise ShapeError(f"{op}: inner-axis broadcast of {sb} against {sa}")
            else:
                raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")
        if da > 1:
            a_started = True
        if db > 1:
            b_started = True
        out.append(max(da, db))
    return tuple(out)


def _unbcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    kept = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if kept:
        g = g.sum(axis=kept, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; batch axes broadcast (leading only)."""
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul: rank >= 2 required, got {da.shape} @ {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: contraction mismatch {da.shape} @ {db.shape}")
    _leading_bcast_shape(da.shape[:-2], db.shape[:-2], "matmul")
    out = da @ db

    def vjp(g):
        ga = _unbcast(g @ np.swapaxes(db, -1, -2), da.shape)
        gb = _unbcast(np.swapaxes(da, -1, -2) @ g, db.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _leading_bcast_shape(a.shape, b.shape, "add")
    da, db = a.data, b.data

    def vjp(g):
        return _unbcast(g, da.shape), _unbcast(g, db.shape)

    return _emit("add", (a, b), da + db, vjp)


def mul(a, b) -> Tensor:
    """Elementwise product (Hadamard); leading-axes broadcasting only."""
    a, b = as_tensor(a), as_tensor(b)
    _leading_bcast_shape(a.shape, b.shape, "mul")
    da, db = a.data, b.data

    def vjp(g):
        return _unbcast(g * db, da.shape), _unbcast(g * da, db.shape)

    return _emit("mul", (a, b), da * db, vjp)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError("scalar_mul: non-finite scalar")

    def vjp(g):
        return (g * c,)

    return _emit("scalar_mul", (a,), a.data * c, vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {e}") from None
    src_shape = a.data.shape

    def vjp(g):
        return (g.reshape(src_shape),)

    return _emit("reshape", (a,), out, vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", (a,), np.transpose(a.data, axes), vjp)


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", (a,), out, vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0)

    def vjp(g):
        return (g * (x > 0.0),)

    return _emit("relu", (a,), out, vjp)


_LN_EPS = 1e-12


def layer_norm(a) -> Tensor:
    """Normalize the last axis to zero mean, unit variance. No affine part."""
    a = as_tensor(a)
    x = a.data
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"layer_norm: needs a non-empty last axis, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layer_norm", (a,), y, vjp)


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if x.ndim < 1:
        raise ShapeError("softmax_lastdim: rank >= 1 required")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _emit("softmax_lastdim", (a,), y, vjp)


def mean(a, axis: int | None = None) -> Tensor:
    """Mean over all elements (axis=None) or one axis."""
    a = as_tensor(a)
    x = a.data
    if axis is None:
        n = x.size
        if n == 0:
            raise ShapeError("mean: empty tensor")
        out = x.mean()

        def vjp(g):
            return (np.full(x.shape, float(g) / n),)

        return _emit("mean", (a,), np.asarray(out), vjp)

    ax = int(axis)
    if not -x.ndim <= ax < x.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    ax = ax % x.ndim
    n = x.shape[ax]
    out = x.mean(axis=ax)

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),)

    return _emit("mean", (a,), out, vjp)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a rank>=1 tensor by an integer index vector."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: indices must be a 1-D integer array")
    n = a.data.shape[0] if a.ndim >= 1 else 0
    if a.ndim < 1:
        raise ShapeError("gather_rows: rank >= 1 required")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows: index out of range [0, {n})")
    src_shape = a.data.shape
    idx = idx.copy()

    def vjp(g):
        z = np.zeros(src_shape)
        np.add.at(z, idx, g)
        return (z,)

    return _emit("gather_rows", (a,), a.data[idx], vjp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, labels, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over rows whose label != ignore_index.

    logits: [n, c]; labels: integer vector [n]. Rows labeled ignore_index
    contribute neither to the value nor to the gradient; if every row is
    ignored the loss is exactly 0 with a zero gradient.
    """
    logits = as_tensor(logits)
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [n, c], got {x.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ShapeError("cross_entropy: labels must be a 1-D integer array")
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {x.shape[0]} rows vs {y.shape[0]} labels")
    c = x.shape[1]
    valid = y != ignore_index
    bad = valid & ((y < 0) | (y >= c))
    if bad.any():
        raise ValueError(f"cross_entropy: label {int(y[bad][0])} outside [0, {c})")
    k = int(valid.sum())

    m = x.max(axis=-1, keepdims=True)
    z = x - m
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    p = ez / sez
    if k == 0:
        out = np.asarray(0.0)
    else:
        lse = np.log(sez[:, 0]) + m[:, 0]
        nll = lse - x[np.arange(x.shape[0]), np.where(valid, y, 0)]
        out = np.asarray(nll[valid].mean())
    yv = y.copy()

    def vjp(g):
        gx = p.copy()
        if k:
            rows = np.arange(x.shape[0])
            gx[rows[valid], yv[valid]] -= 1.0
            gx *= np.where(valid, float(g) / k, 0.0)[:, None]
        else:
            gx[:] = 0.0
        return (gx,)

    return _emit("cross_entropy", (logits,), out, vjp)


def l1_masked(pred, target, mask) -> Tensor:
    """Masked mean absolute error: sum(|pred - target| * mask) / max(sum(mask), 1).

    mask entries must be exactly 0 or 1; the subgradient of |.| at 0 is 0.
    An all-zero mask yields loss 0 with zero gradient.
    """
    pred, target, mask = as_tensor(pred), as_tensor(target), as_tensor(mask)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(
            f"l1_masked: shapes must match exactly, got {pred.shape}/{target.shape}/{mask.shape}"
        )
    md = mask.data
    if not np.all((md == 0.0) | (md == 1.0)):
        raise ValueError("l1_masked: mask entries must be 0 or 1")
    denom = max(float(md.sum()), 1.0)
    diff = pred.data - target.data
    out = np.asarray(float((np.abs(diff) * md).sum()) / denom)
    sgn = np.sign(diff) * md

    def vjp(g):
        gp = sgn * (float(g) / denom)
        return gp, -gp, None

    return _emit("l1_masked", (pred, target, mask), out, vjp)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "reshape": reshape,
    "transpose": transpose,
    "gelu": gelu,
    "relu": relu,
    "layer_norm": layer_norm,
    "softmax_lastdim": softmax_lastdim,
    "mean": mean,
    "gather_rows": gather_rows,
}


def primitive_forward(op: str, *args, **kwargs) -> Tensor:
    """Apply a primitive by name. Unknown names are an error."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise ValueError(f"unknown primitive '{op}'")
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf.

    The loss must be a scalar recorded on a tape. Repeated calls accumulate
    into leaf gradients; intermediate gradients are local to each call.
    """
    if loss.tape is None:
        raise GraphError("backward: loss is not recorded on any tape")
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    flow: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g_out = flow.pop(id(node.output), None)
        if g_out is None:
            continue
        grads = node.vjp(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.tape is tape:
                prev = flow.get(id(inp))
                flow[id(inp)] = g if prev is None else prev + g
            else:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Optimizer:
    """Adam (default) or plain SGD over a ParamStore, with group filtering.

    Moment buffers and step counts are kept per parameter name and are
    shared across steps regardless of which group filter each step used.
    Parameters whose `.grad` is None are skipped without advancing state.
    """

    def __init__(self, kind: str = "adam", beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind '{kind}'")
        self.kind = kind
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params, group_filter, lr: float) -> list[str]:
        """Update parameters whose group is in `group_filter`; clear all grads.

        Returns the names that were actually updated. An empty filter, or a
        filter matching no parameters, is a wiring bug and raises ValueError.
        """
        groups = set(group_filter)
        if not groups:
            raise ValueError("optimizer step: empty group filter")
        lr = float(lr)
        names = [n for n in params.names() if params.group_of(n) in groups]
        if not names:
            raise ValueError(f"optimizer step: group filter {sorted(groups)} matches no parameters")
        updated = []
        for name in names:
            p = params[name]
            g = p.grad
            if g is None:
                continue
            if self.kind == "sgd":
                p.data -= lr * g
            else:
                m = self._m.get(name)
                if m is None:
                    m = self._m[name] = np.zeros_like(p.data)
                    self._v[name] = np.zeros_like(p.data)
                    self._t[name] = 0
                v = self._v[name]
                t = self._t[name] + 1
                self._t[name] = t
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                mhat = m / (1.0 - self.beta1 ** t)
                vhat = v / (1.0 - self.beta2 ** t)
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            updated.append(name)
        for n in params.names():
            params[n].grad = None
        return updated
