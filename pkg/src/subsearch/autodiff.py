"""Small reverse-mode autodiff over dense float64 numpy arrays.

Operations record onto the innermost active :class:`Tape`. With no tape active they
only compute, which is the inference path used inside search.
"""

from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

ELU_ALPHA = 1.0
LEAKY_SLOPE = 0.01
LAYER_NORM_EPS = 1e-5

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "tracked", "name")

    def __init__(self, data, tracked: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        # extended precision passes through untouched (used by the finite-difference reference)
        self.data = arr if arr.dtype == np.longdouble else arr.astype(np.float64, copy=False)
        self.tracked = tracked
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_FLOATS = (np.dtype(np.float64), np.dtype(np.longdouble))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records op nodes in execution (topological) order; consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss: Tensor, params: Optional["ParamStore"] = None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(param) into ``params.grads``; returns grads by tensor id."""
        if self.consumed:
            raise RuntimeError("tape already consumed")
        if loss.data.shape != ():
            raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if params is not None:
            for name, p in params.items():
                g = grads.get(id(p))
                if g is not None:
                    params.grads[name] += g
        return grads


def _wrap(data: np.ndarray) -> Tensor:
    # data is already a float array produced by an op; skip the conversions in __init__
    t = Tensor.__new__(Tensor)
    t.data = data
    t.tracked = False
    t.name = None
    return t


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError("non-finite value produced")
    tape = _TAPES[-1] if _TAPES else None
    if tape is None or not any(t.tracked for t in inputs):
        return _wrap(data) if type(data) is np.ndarray and data.dtype in _FLOATS else Tensor(data)
    out = Tensor(data, tracked=True)
    tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise and linear algebra ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit(data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _emit(data, parts, backward)


def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError("gather index out of range")
    return _emit(x.data[index], (x,), backward)


def scatter_add_rows(x: Tensor, index, num_rows: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0]:
        raise ShapeError("scatter index length differs from row count")
    data = np.zeros((num_rows,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(data, index, x.data)
    return _emit(data, (x,), lambda g: (g[index],))


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=axis is not None)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(data, (x,), backward)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=axis is not None)
    return _emit(data, (x,), lambda g: (np.broadcast_to(g / count, x.shape).copy(),))


def reduce_max(x: Tensor, axis: int = 0) -> Tensor:
    """Max along ``axis``; gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(arg, axis), g, axis=axis)
        return (out,)

    return _emit(data, (x,), backward)


def stack_max(parts: Sequence[Tensor]) -> Tensor:
    """Element-wise maximum across equally shaped tensors (ties go to the earliest)."""
    stacked = np.stack([p.data for p in parts])
    arg = np.argmax(stacked, axis=0)
    data = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def backward(g):
        return tuple(np.where(arg == i, g, 0.0) for i in range(len(parts)))

    return _emit(data, parts, backward)


# --- activations --------------------------------------------------------------------


def elu(x: Tensor) -> Tensor:
    neg = x.data <= 0
    ex = np.exp(np.minimum(x.data, 0.0))
    data = np.where(neg, ELU_ALPHA * (ex - 1.0), x.data)
    return _emit(data, (x,), lambda g: (g * np.where(neg, ELU_ALPHA * ex, 1.0),))


def leaky_relu(x: Tensor) -> Tensor:
    slope = np.where(x.data > 0, 1.0, LEAKY_SLOPE)
    return _emit(x.data * slope, (x,), lambda g: (g * slope,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


# --- normalizers -----------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over a 1-D vector, max-shifted."""
    z = x.data - x.data.max()
    e = np.exp(z)
    s = e / e.sum()
    return _emit(s, (x,), lambda g: (s * (g - np.dot(g, s)),))


def segment_softmax(x: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax of a 1-D score vector within each group of equal ``segments`` id."""
    seg = np.asarray(segments, dtype=np.int64)
    if x.data.ndim not in (1, 2) or (x.data.ndim == 2 and x.shape[1] != 1) or seg.shape != (x.shape[0],):
        raise ShapeError("scores must be (E,) or (E, 1) with one segment id per row")
    if seg.size == 0:
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    shape = x.shape
    z = x.data.reshape(-1)
    top = np.full(num_segments, -np.inf, dtype=z.dtype)
    np.maximum.at(top, seg, z)
    e = np.exp(z - top[seg])
    denom = np.zeros(num_segments, dtype=z.dtype)
    np.add.at(denom, seg, e)
    s = e / denom[seg]

    def backward(g):
        g = g.reshape(-1)
        dot = np.zeros(num_segments)
        np.add.at(dot, seg, g * s)
        return ((s * (g - dot[seg])).reshape(shape),)

    return _emit(s.reshape(shape), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        return dx, dgamma, dbeta

    return _emit(data, (x, gamma, beta), backward)


def bilinear(hu: Tensor, W: Tensor, hv: Tensor) -> Tensor:
    """Row-wise ``out[p, f] = hu[p] . W[f] . hv[p]`` for W of shape (F, D, D)."""
    if W.data.ndim != 3 or hu.shape[1] != W.shape[1] or hv.shape[1] != W.shape[2] or hu.shape[0] != hv.shape[0]:
        raise ShapeError(f"bilinear shapes {hu.shape}, {W.shape}, {hv.shape}")
    left = np.einsum("pd,fde->pfe", hu.data, W.data)
    data = np.einsum("pfe,pe->pf", left, hv.data)

    def backward(g):
        dhv = np.einsum("pf,pfe->pe", g, left)
        dhu = np.einsum("pf,fde,pe->pd", g, W.data, hv.data)
        dW = np.einsum("pf,pd,pe->fde", g, hu.data, hv.data)
        return dhu, dW, dhv

    return _emit(data, (hu, W, hv), backward)


# --- parameters ------------------------------------------------------------------------


def param_init(name: str, shape: Sequence[int], seed: int) -> np.ndarray:
    """Glorot-uniform weights; ``*.b``/``*.beta`` zeros; ``*.gamma`` ones. Deterministic per (name, seed)."""
    shape = tuple(int(s) for s in shape)
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("b", "bias", "beta"):
        return np.zeros(shape)
    if leaf == "gamma":
        return np.ones(shape)
    if len(shape) >= 2:
        fan_in, fan_out = shape[-2], shape[-1]
    else:
        fan_in = fan_out = shape[0]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.uniform(-a, a, size=shape)


class ParamStore:
    """Named parameters with gradient accumulators and Adam moment slots."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        # bumped on every in-place value change; embedding caches key on it
        self.version = 0

    def create(self, name: str, shape: Sequence[int], seed: int) -> Tensor:
        return self.add(name, param_init(name, shape, seed))

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), tracked=True, name=name)
        self._params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        if set(snap) != set(self._params):
            raise KeyError("snapshot parameter names differ")
        for k, p in self._params.items():
            if snap[k].shape != p.data.shape:
                raise ShapeError(f"shape mismatch for {k}")
            p.data[...] = snap[k]
        self.version += 1


# --- checkpoint text format ----------------------------------------------------------------


def format_params(store: ParamStore, header: str = "") -> str:
    lines = [header] if header else []
    for name, p in store.items():
        lines.append("P " + " ".join([name] + [str(d) for d in p.shape]))
        arr = p.data.reshape(-1, p.shape[-1]) if p.data.ndim else p.data.reshape(1, 1)
        for row in arr:
            lines.append(" ".join(float(x).hex() for x in row))
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> tuple[list[str], "OrderedDict[str, np.ndarray]"]:
    """Returns header lines (anything before the first ``P``) and the named arrays."""
    header: list[str] = []
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    lines = text.splitlines()
    i = 0
    while i < len(lines) and not lines[i].startswith("P "):
        if lines[i].strip():
            header.append(lines[i])
        i += 1
    while i < len(lines):
        toks = lines[i].split()
        i += 1
        if not toks:
            continue
        if toks[0] != "P" or len(toks) < 2:
            raise ValueError(f"line {i}: expected parameter header")
        name = toks[1]
        shape = tuple(int(t) for t in toks[2:])
        ncols = shape[-1] if shape else 1
        nrows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        rows = []
        for _ in range(nrows):
            if i >= len(lines):
                raise ValueError(f"parameter {name}: truncated values")
            vals = [float.fromhex(t) for t in lines[i].split()]
            if len(vals) != ncols:
                raise ValueError(f"line {i + 1}: expected {ncols} values for {name}")
            rows.append(vals)
            i += 1
        if name in out:
            raise ValueError(f"duplicate parameter {name}")
        out[name] = np.array(rows, dtype=np.float64).reshape(shape)
    return header, out


# --- gradient verification ------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    coords: list[tuple[str, tuple[int, ...]]]
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def rel_errors(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-8)
        return np.abs(self.analytic - self.numeric) / denom


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
    grad_transform: Optional[Callable[[dict], dict]] = None,
    extended: bool = True,
) -> GradCheckResult:
    """Compare tape gradients against central differences on random coordinates.

    ``loss_fn`` must be deterministic in the parameter values. All coordinates are
    checked when the model has no more than ``num_coords`` of them. With ``extended``
    the perturbed evaluations run in ``np.longdouble`` so that cancellation noise in the
    central difference stays far below the tolerance for small gradients; the tape
    gradient under test is always computed in float64.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, params)
    grads = {k: g.copy() for k, g in params.grads.items()}
    if grad_transform is not None:
        grads = grad_transform(grads)

    all_coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(*p.shape)]
    rng = np.random.default_rng(seed)
    if len(all_coords) > num_coords:
        pick = rng.choice(len(all_coords), size=num_coords, replace=False)
        coords = [all_coords[i] for i in sorted(pick)]
    else:
        coords = all_coords
    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    saved = {name: t.data for name, t in params.items()}
    if extended:
        for name, t in params.items():
            t.data = t.data.astype(np.longdouble)
    try:
        for j, (name, idx) in enumerate(coords):
            p = params[name].data
            orig = p[idx]
            p[idx] = orig + h
            fp = loss_fn().data
            p[idx] = orig - h
            fm = loss_fn().data
            p[idx] = orig
            numeric[j] = float((fp - fm) / (2 * h))
            analytic[j] = grads[name][idx]
    finally:
        for name, t in params.items():
            t.data = saved[name]
    res = GradCheckResult(0.0, coords, analytic, numeric)
    res.max_rel_error = float(res.rel_errors.max()) if len(coords) else 0.0
    return res
