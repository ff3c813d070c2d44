"""Spiking layers, T-step simulation and the two-stream output head."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    SurrogateSpec,
    Tensor,
    affine,
    avg_pool2d,
    conv2d,
    grad,
    heaviside_surrogate,
    logistic_spike,
    no_grad,
    stack_sum,
)

CHECKPOINT_FORMAT = "snnrobust-checkpoint"
CHECKPOINT_VERSION = 1


# -- layers ----------------------------------------------------------------------


class Normalize:
    """Fixed ``(x - mean) / std``; keeps attack budgets in raw intensity units."""

    kind = "normalize"
    spiking = False

    def __init__(self, mean: float = 0.0, std: float = 1.0):
        if std <= 0:
            raise ContractError("std must be positive")
        self.mean = float(mean)
        self.std = float(std)

    def params(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return (x - self.mean) * (1.0 / self.std)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean, "std": self.std}


class Flatten:
    kind = "flatten"
    spiking = False

    def params(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class AvgPool:
    kind = "avgpool"
    spiking = False

    def __init__(self, size: int = 2):
        self.size = int(size)

    def params(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return avg_pool2d(x, self.size)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": self.size}


class Linear:
    """Fully connected synapses feeding a layer of spiking neurons."""

    kind = "linear"
    spiking = True

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None):
        self.weight = Tensor(np.asarray(weight, dtype=np.float32), requires_grad=True)
        self.bias = None if bias is None else Tensor(np.asarray(bias, dtype=np.float32), requires_grad=True)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0, bias: bool = True):
        w = rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))
        b = np.zeros(n_out) if bias else None
        return cls(w, b)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DimensionError(f"linear layer expects (N, {self.n_in}), got {x.shape}")
        return affine(x, self.weight, self.bias)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weight": _enc(self.weight.data), "bias": _enc(self.bias.data) if self.bias is not None else None}


class Conv2d:
    kind = "conv2d"
    spiking = True

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None, padding: int = 1):
        self.weight = Tensor(np.asarray(weight, dtype=np.float32), requires_grad=True)
        self.bias = None if bias is None else Tensor(np.asarray(bias, dtype=np.float32), requires_grad=True)
        self.padding = int(padding)

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator, gain: float = 1.0, padding: int = 1):
        fan_in = c_in * k * k
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(c_out, c_in, k, k))
        return cls(w, np.zeros(c_out), padding)

    def params(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.padding)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "weight": _enc(self.weight.data),
            "bias": _enc(self.bias.data) if self.bias is not None else None,
            "padding": self.padding,
        }


def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d: dict | None) -> np.ndarray | None:
    if d is None:
        return None
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f4").reshape(d["shape"]).astype(np.float32)


def _layer_from_dict(d: dict):
    kind = d["kind"]
    if kind == "normalize":
        return Normalize(d["mean"], d["std"])
    if kind == "flatten":
        return Flatten()
    if kind == "avgpool":
        return AvgPool(d["size"])
    if kind == "linear":
        return Linear(_dec(d["weight"]), _dec(d["bias"]))
    if kind == "conv2d":
        return Conv2d(_dec(d["weight"]), _dec(d["bias"]), d["padding"])
    raise ValueError(f"unknown layer kind {kind!r}")


# -- neuron dynamics -----------------------------------------------------------------


@dataclass
class LifLayerState:
    """Membrane potential and last spikes of one spiking layer."""

    u: Tensor | None = None
    s: Tensor | None = None
    tau: float = 1.0
    theta: float = 1.0

    def __post_init__(self):
        if not (0 < self.tau <= 1):
            raise ContractError(f"tau must lie in (0, 1], got {self.tau}")
        if self.theta <= 0:
            raise ContractError(f"theta must be positive, got {self.theta}")


def lif_step(
    state: LifLayerState,
    current: Tensor,
    surrogate: SurrogateSpec | None = None,
    sharpness: float | None = None,
) -> tuple[LifLayerState, Tensor]:
    """Advance one timestep: leak, hard reset, integrate, fire.

    ``u[t] = tau * u[t-1] * (1 - s[t-1]) + current``; the reset factor stays on
    the tape. ``sharpness`` swaps the Heaviside for a logistic (smooth stand-in).
    """
    current = current if isinstance(current, Tensor) else Tensor(current)
    if state.u is None:
        u = current
    else:
        if state.u.shape != current.shape:
            raise DimensionError(f"input current {current.shape} does not match state {state.u.shape}")
        u = state.u * (1.0 - state.s) * state.tau + current
    if sharpness is None:
        s = heaviside_surrogate(u, state.theta, surrogate or SurrogateSpec())
    else:
        s = logistic_spike(u, state.theta, sharpness)
    return LifLayerState(u, s, state.tau, state.theta), s


def direct_encode(x: Tensor, timesteps: int) -> list[Tensor]:
    """The same image at every timestep."""
    if timesteps < 1:
        raise ContractError("timesteps must be >= 1")
    return [x] * timesteps


# -- network ---------------------------------------------------------------------------


@dataclass
class BinaryHead:
    """Softmax over the true-class and strongest-rival spike counts."""

    f_y: np.ndarray
    f_ytilde: np.ndarray
    ytilde: np.ndarray

    def predicted_class(self, y) -> np.ndarray:
        """Argmax over ``{y, ytilde}``; ties go to the lower class index."""
        y = np.asarray(y)
        win_y = (self.f_y > self.f_ytilde) | ((self.f_y == self.f_ytilde) & (y < self.ytilde))
        return np.where(win_y, y, self.ytilde)


def rival_class(counts: np.ndarray, y) -> np.ndarray:
    """Index of the largest count excluding the true class (lowest index on ties)."""
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    if counts.shape[1] < 2:
        raise ContractError("the two-stream head needs at least two classes")
    masked = counts.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return masked.argmax(axis=1)


def binary_head(counts, y) -> BinaryHead:
    """Two-class softmax of ``counts[y]`` against the strongest other class."""
    counts = np.asarray(counts, dtype=np.float64)
    single = counts.ndim == 1
    c2 = np.atleast_2d(counts)
    yy = np.atleast_1d(np.asarray(y, dtype=np.intp))
    if c2.shape[1] < 2:
        raise ContractError("the two-stream head needs at least two classes")
    if np.any(yy < 0) or np.any(yy >= c2.shape[1]):
        raise ContractError("label out of range")
    yt = rival_class(c2, yy)
    rows = np.arange(len(yy))
    diff = c2[rows, yy] - c2[rows, yt]
    f_y = 1.0 / (1.0 + np.exp(-diff))
    f_t = 1.0 / (1.0 + np.exp(diff))
    if single:
        return BinaryHead(f_y[0], f_t[0], yt[0])
    return BinaryHead(f_y, f_t, yt)


def fy_tensor(counts: Tensor, y: np.ndarray, ytilde: np.ndarray) -> Tensor:
    """Differentiable ``f_y`` for fixed rival indices."""
    return (counts.gather(y) - counts.gather(ytilde)).sigmoid()


def cross_entropy(counts: Tensor, y: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy with spike counts as logits."""
    nll = counts.logsumexp(axis=1) - counts.gather(y)
    if reduction == "sum":
        return nll.sum()
    if reduction == "none":
        return nll
    return nll.mean()


class SnnModel:
    """Layered spiking network simulated for a fixed number of timesteps.

    Every ``Linear``/``Conv2d`` output is a synaptic current driving its own
    layer of LIF neurons; the output layer's spike counts are the class scores.
    """

    def __init__(
        self,
        layers: Sequence,
        timesteps: int = 8,
        tau: float = 1.0,
        theta: float = 1.0,
        surrogate: SurrogateSpec | None = None,
        input_shape: tuple | None = None,
    ):
        if timesteps < 1:
            raise ContractError("timesteps must be >= 1")
        LifLayerState(tau=tau, theta=theta)  # validates tau/theta
        self.layers = list(layers)
        self.timesteps = int(timesteps)
        self.tau = float(tau)
        self.theta = float(theta)
        self.surrogate = surrogate or SurrogateSpec()
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.num_classes = self._infer_classes()

    def _infer_classes(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Linear):
                return layer.n_out
            if isinstance(layer, Conv2d):
                raise ContractError("the last spiking layer must be Linear")
        raise ContractError("model has no output layer")

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    # -- simulation -----------------------------------------------------------
    def run(
        self,
        x: Tensor,
        frames: bool = False,
        surrogate: SurrogateSpec | None = None,
        sharpness: float | None = None,
    ) -> Tensor:
        """Spike counts ``(N, classes)`` summed over all timesteps."""
        if frames:
            if x.ndim < 3 or x.shape[1] != self.timesteps:
                raise DimensionError(f"frame input needs shape (N, {self.timesteps}, ...), got {x.shape}")
            inputs = [x[:, t] for t in range(self.timesteps)]
        else:
            inputs = direct_encode(x, self.timesteps)
        spec = surrogate or self.surrogate
        states = [LifLayerState(tau=self.tau, theta=self.theta) if layer.spiking else None for layer in self.layers]
        outputs = []
        for x_t in inputs:
            h = x_t
            for i, layer in enumerate(self.layers):
                h = layer(h)
                if layer.spiking:
                    states[i], h = lif_step(states[i], h, spec, sharpness)
            outputs.append(h)
        return stack_sum(outputs)

    def counts(self, x, frames: bool = False, batch_size: int = 256) -> np.ndarray:
        """Inference-only spike counts."""
        x = np.asarray(x, dtype=np.float32)
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.run(Tensor(x[i : i + batch_size]), frames).data)
        return np.concatenate(out, axis=0)

    def predict(self, x, frames: bool = False) -> np.ndarray:
        return self.counts(x, frames).argmax(axis=1)

    def fy(self, x, y, ytilde=None, frames: bool = False, sharpness: float | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32 if sharpness is None else np.float64)
        with no_grad():
            c = self.run(Tensor(x), frames, sharpness=sharpness)
        c = c.data.astype(np.float64)
        y = np.atleast_1d(np.asarray(y, dtype=np.intp))
        if ytilde is None:
            ytilde = rival_class(c, y)
        rows = np.arange(len(c))
        return 1.0 / (1.0 + np.exp(-(c[rows, y] - c[rows, np.atleast_1d(ytilde)])))

    def grad_fy(self, x, y, frames: bool = False, surrogate=None, sharpness=None, ytilde=None):
        return grad_fy_input(self, x, y, frames=frames, surrogate=surrogate, sharpness=sharpness, ytilde=ytilde)

    # -- persistence ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "timesteps": self.timesteps,
            "tau": self.tau,
            "theta": self.theta,
            "surrogate": self.surrogate.to_dict(),
            "input_shape": list(self.input_shape) if self.input_shape else None,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SnnModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a model checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        return cls(
            [_layer_from_dict(ld) for ld in d["layers"]],
            d["timesteps"],
            d["tau"],
            d["theta"],
            SurrogateSpec.from_dict(d["surrogate"]),
            d.get("input_shape"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def copy(self) -> "SnnModel":
        return SnnModel.from_dict(self.to_dict())


def forward_T(model: SnnModel, x, frames: bool = False) -> np.ndarray:
    """Output spike counts; integers in ``[0, T]``."""
    return model.counts(x, frames)


def grad_fy_input(
    model: SnnModel,
    x,
    y,
    frames: bool = False,
    surrogate: SurrogateSpec | None = None,
    sharpness: float | None = None,
    ytilde=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Input gradient of ``f_y`` through one surrogate backward pass.

    The rival index is fixed at its forward value. Returns
    ``(gradient, f_y, ytilde)`` with the gradient shaped like ``x``.
    """
    dtype = np.float32 if sharpness is None else np.float64
    xt = Tensor(np.array(x, dtype=dtype), requires_grad=True)
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    counts = model.run(xt, frames, surrogate, sharpness)
    if ytilde is None:
        ytilde = rival_class(counts.data, y)
    ytilde = np.atleast_1d(np.asarray(ytilde, dtype=np.intp))
    f = fy_tensor(counts, y, ytilde)
    if not f.requires_grad:
        return np.zeros_like(xt.data), f.data.astype(np.float64), ytilde
    (g,) = grad(f.sum(), [xt])
    return g, f.data.astype(np.float64), ytilde


# -- architectures -----------------------------------------------------------------------


def mlp(
    n_in: int,
    hidden: Sequence[int],
    n_classes: int,
    timesteps: int = 8,
    seed: int = 0,
    gain: float = 1.0,
    tau: float = 1.0,
    theta: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    surrogate: SurrogateSpec | None = None,
) -> SnnModel:
    rng = np.random.default_rng(seed)
    layers: list = [Normalize(mean, std)]
    sizes = [n_in, *hidden, n_classes]
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append(Linear.init(a, b, rng, gain))
    return SnnModel(layers, timesteps, tau, theta, surrogate, (n_in,))


def small_conv(
    channels: int,
    height: int,
    width: int,
    n_classes: int,
    width_mult: int = 8,
    timesteps: int = 4,
    seed: int = 0,
    gain: float = 1.0,
    tau: float = 1.0,
    theta: float = 1.0,
    mean: float = 0.0,
    std: float = 1.0,
    surrogate: SurrogateSpec | None = None,
) -> SnnModel:
    """Two 3x3 spiking conv layers, 2x2 average pooling, then a spiking readout."""
    rng = np.random.default_rng(seed)
    c1, c2 = width_mult, 2 * width_mult
    layers = [
        Normalize(mean, std),
        Conv2d.init(channels, c1, 3, rng, gain),
        AvgPool(2),
        Conv2d.init(c1, c2, 3, rng, gain),
        AvgPool(2),
        Flatten(),
        Linear.init(c2 * (height // 4) * (width // 4), n_classes, rng, gain),
    ]
    return SnnModel(layers, timesteps, tau, theta, surrogate, (channels, height, width))
