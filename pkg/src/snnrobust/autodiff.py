"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
linearizes the graph reachable from a scalar seed into a :class:`Tape`
(topological order, each node once) and walks it in reverse.

Gradients of intermediate nodes live only inside a backward call, so the same
graph can be differentiated several times (e.g. once w.r.t. the input and once
w.r.t. the weights).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "NonSmoothError",
    "SurrogateFamily",
    "SurrogateSpec",
    "Tape",
    "Tensor",
    "backward",
    "grad",
    "gradient_check",
    "heaviside_surrogate",
    "logistic_spike",
    "no_grad",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NonSmoothError(ContractError):
    """A finite-difference check was requested at a kink of the function."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}") from exc


class Tensor:
    """Dense array with an optional place in a differentiation graph.

    ``grad`` is populated on leaves (tensors created directly with
    ``requires_grad=True``) by :func:`backward` and accumulates across calls
    until :meth:`zero_grad`.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        # set by non-smooth ops evaluated exactly at a kink
        self.kink = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.kink = False
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- elementwise arithmetic -----------------------------------------------
    def __add__(self, other):
        other = _wrap(other, self.dtype)
        _broadcast_shape(self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        _broadcast_shape(self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            "sub",
        )

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape

        def bw(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.data[idx], (self,), bw, "index")

    # -- unary ----------------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def abs(self):
        a = self.data
        out = Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")
        out.kink = bool(np.any(a == 0))
        return out

    def sign(self):
        a = self.data
        out = Tensor._make(np.sign(a), (self,), lambda g: (np.zeros_like(g),), "sign")
        out.kink = bool(np.any(a == 0))
        return out

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    # -- reductions and shape -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(str(exc)) from exc
        return Tensor._make(out, (self,), lambda g: (g.reshape(orig),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )

    @property
    def T(self):
        return self.transpose()

    def gather(self, index: np.ndarray):
        """Pick ``self[n, index[n]]`` for every row ``n`` of a 2-D tensor."""
        if self.ndim != 2:
            raise DimensionError("gather expects a 2-D tensor")
        index = np.asarray(index, dtype=np.intp)
        if index.shape != (self.shape[0],):
            raise DimensionError(f"index shape {index.shape} does not match rows {self.shape[0]}")
        rows = np.arange(self.shape[0])
        shape = self.shape

        def bw(g):
            out = np.zeros(shape, dtype=g.dtype)
            out[rows, index] = g
            return (out,)

        return Tensor._make(self.data[rows, index], (self,), bw, "gather")

    def logsumexp(self, axis: int = -1):
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out = (m + np.log(s)).squeeze(axis)
        soft = e / s
        return Tensor._make(
            out, (self,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp"
        )


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return _wrap(x, dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim != 2:
        raise DimensionError("matmul right operand must be 2-D")
    A, B = a.data, b.data

    def bw(g):
        ga = g @ B.T
        gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(A @ B, (a, b), bw, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for a batch of row vectors."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where the constant ``mask`` is true, else from ``b``."""
    a, b = _wrap(a), _wrap(b)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape(_broadcast_shape(a.shape, b.shape), mask.shape)
    return Tensor._make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        ),
        "where",
    )


def stack_sum(tensors: Iterable[Tensor]) -> Tensor:
    """Sum a sequence of equally shaped tensors (e.g. over timesteps)."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack_sum of empty sequence")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack_sum shape mismatch {t.shape} vs {shape}")
    data = np.sum([t.data for t in tensors], axis=0)
    k = len(tensors)
    return Tensor._make(data, tuple(tensors), lambda g: (g,) * k, "sum_time")


# -- convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (n, oh, ow, c, kh, kw), (s[0], s[2], s[3], s[1], s[2], s[3]), writeable=False
    )
    return cols.reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation, NCHW input, (out, in, kh, kw) weight."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shape mismatch {x.shape} * {weight.shape}")
    n, c, h, w = x.shape
    oc, _, kh, kw = weight.shape
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    cols = _im2col(x.data, kh, kw, padding)
    wmat = weight.data.reshape(oc, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gw = (gm.T @ cols).reshape(weight.shape)
        gcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw)
        gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + oh, j : j + ow] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw

    res = Tensor._make(np.ascontiguousarray(out), (x, weight), bw, "conv2d")
    if bias is not None:
        res = res + bias.reshape(1, oc, 1, 1)
    return res


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=5).mean(axis=3)


# -- spiking nonlinearity ------------------------------------------------------


class SurrogateFamily(str, Enum):
    TRIANGLE = "triangle"
    SIGMOID = "sigmoid"
    ARCTAN = "arctan"


@dataclass(frozen=True)
class SurrogateSpec:
    """Backward-pass stand-in for dH/du; never changes the forward spikes."""

    family: SurrogateFamily = SurrogateFamily.TRIANGLE
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", SurrogateFamily(self.family))
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ContractError(f"surrogate width must be positive, got {self.gamma}")

    def derivative(self, v: np.ndarray) -> np.ndarray:
        """Surrogate dH/dv evaluated at ``v = u - theta``."""
        g = self.gamma
        if self.family is SurrogateFamily.TRIANGLE:
            return np.maximum(0.0, g - np.abs(v)) / (g * g)
        if self.family is SurrogateFamily.SIGMOID:
            s = 1.0 / (1.0 + np.exp(-g * v))
            return g * s * (1.0 - s)
        return g / (2.0 * (1.0 + (0.5 * np.pi * g * v) ** 2))

    def to_dict(self) -> dict:
        return {"family": self.family.value, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateSpec":
        return cls(d["family"], float(d["gamma"]))


def heaviside_surrogate(u: Tensor, theta: float, spec: SurrogateSpec) -> Tensor:
    """Spike ``H(u - theta)`` with ``H(0) = 1``; backward uses ``spec``."""
    v = u.data - theta
    out = (v >= 0).astype(u.data.dtype)
    return Tensor._make(
        out, (u,), lambda g: (g * spec.derivative(v).astype(g.dtype, copy=False),), "heaviside"
    )


def logistic_spike(u: Tensor, theta: float, sharpness: float) -> Tensor:
    """Smooth stand-in for the spike: ``sigmoid(sharpness * (u - theta))``."""
    return ((u - theta) * sharpness).sigmoid()


# -- backward ------------------------------------------------------------------


class Tape:
    """Topologically ordered list of the nodes reachable from a seed."""

    def __init__(self, seed: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(seed, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def has_kink(self) -> bool:
        return any(n.kink for n in self.nodes)


def _run(seed: Tensor, wrt: Sequence[Tensor] | None) -> tuple[Tape, dict[int, np.ndarray]]:
    if seed.data.size != 1:
        raise ContractError(f"backward seed must be scalar, got shape {seed.shape}")
    tape = Tape(seed)
    if wrt is not None:
        # prune nodes that cannot reach a requested leaf
        targets = {id(t) for t in wrt}
        useful: set[int] = set()
        for node in tape.nodes:
            if id(node) in targets or any(id(p) in useful for p in node._parents):
                useful.add(id(node))
    else:
        useful = None
    grads: dict[int, np.ndarray] = {id(seed): np.ones_like(seed.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
        if g is None or node.is_leaf:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if useful is not None and id(p) not in useful:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape, grads


def backward(seed: Tensor, leaves: Sequence[Tensor] | None = None) -> Tape:
    """Accumulate ``d seed / d leaf`` into ``leaf.grad`` for every reachable leaf.

    With ``leaves`` given only those receive gradients and the rest of the graph
    is pruned. Returns the tape that was traversed.
    """
    tape, grads = _run(seed, leaves)
    targets = tape.leaves() if leaves is None else list(leaves)
    for leaf in targets:
        g = grads.get(id(leaf))
        if g is None or not leaf.requires_grad:
            continue
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += g.reshape(leaf.shape).astype(leaf.data.dtype, copy=False)
    return tape


def grad(seed: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Return ``d seed / d t`` for each ``t`` in ``wrt`` without touching ``.grad``."""
    _, grads = _run(seed, wrt)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g.reshape(t.shape))
    return out


def gradient_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must build its output from smooth ops only; evaluating an ``abs`` or
    ``sign`` exactly at zero raises :class:`NonSmoothError`.
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("gradient_check needs a scalar-valued function")
    if not out.requires_grad:
        auto = np.zeros_like(x0)
    else:
        tape = Tape(out)
        if tape.has_kink():
            raise NonSmoothError("function evaluated at a non-differentiable point")
        (auto,) = grad(out, [x])
    fd = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(fn(Tensor(xp.reshape(x0.shape))).data)
        fm = float(fn(Tensor(xm.reshape(x0.shape))).data)
        fd.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(auto - fd) / (np.abs(fd) + 1e-12)
    return float(err.max()) if err.size else 0.0
