"""Random vs. adversarial vulnerability of the true-class score ``f_y``.

Random vulnerability is the mean squared change of ``f_y`` under uniform noise
in the l-infinity cube of radius epsilon; adversarial vulnerability is the
worst case over that cube. To first order they are ``eps^2 |g|_2^2 / 3`` and
``eps^2 |g|_1^2`` for ``g = grad_x f_y``, so their ratio ``3 |g|_1^2 / |g|_2^2``
lies between 3 and ``3 |g|_0``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, AttackFamily, fgsm
from .autodiff import ContractError

MAX_CORNER_DIMS = 16


class UndefinedRatioError(ContractError):
    """Gradient is identically zero, so the vulnerability ratio is 0/0."""


class LinearStub:
    """``f_y(x) = g . x + b`` for every label; an exact oracle model."""

    def __init__(self, g, b: float = 0.0):
        self.g = np.asarray(g, dtype=np.float64).reshape(-1)
        self.b = float(b)

    def fy(self, x, y=None, ytilde=None, frames: bool = False) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return x.reshape(len(x), -1) @ self.g + self.b

    def grad_fy(self, x, y=None, frames: bool = False, **_):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.broadcast_to(self.g, (len(x), self.g.size)).reshape(x.shape).copy()
        return g, self.fy(x), np.zeros(len(x), dtype=np.intp)


class ConstantModel(LinearStub):
    def __init__(self, dims: int, value: float = 0.5):
        super().__init__(np.zeros(dims), value)


@dataclass
class SparsityNorms:
    l0: int
    l1: float
    l2: float
    threshold: float


def sparsity_norms(gradient, threshold: float | None = None) -> SparsityNorms:
    """Counts entries with ``|g_i| > threshold`` (default: 1e-6 of ``max|g|``)."""
    g = np.abs(np.asarray(gradient, dtype=np.float64).reshape(-1))
    top = float(g.max()) if g.size else 0.0
    if threshold is None:
        threshold = 1e-6 * top
    # scale before squaring so tiny or huge gradients neither underflow nor overflow
    l2 = top * float(np.sqrt(((g / top) ** 2).sum())) if top > 0 else 0.0
    return SparsityNorms(int((g > threshold).sum()), float(g.sum()), l2, float(threshold))


@dataclass
class RatioBounds:
    ratio: float
    lower_bound: float
    upper_bound: float
    norms: SparsityNorms


def ratio_bound_report(gradient, threshold: float | None = 0.0) -> RatioBounds:
    """Linearized ratio ``3 |g|_1^2 / |g|_2^2`` with its bounds 3 and ``3 |g|_0``.

    The upper bound is only guaranteed when ``threshold`` is 0 (exact support).
    """
    n = sparsity_norms(gradient, threshold)
    if n.l2 == 0:
        raise UndefinedRatioError("gradient is identically zero")
    g = np.abs(np.asarray(gradient, dtype=np.float64).reshape(-1))
    g = g / g.max()
    ratio = 3.0 * g.sum() ** 2 / (g * g).sum()
    return RatioBounds(float(ratio), 3.0, 3.0 * n.l0, n)


def _single(model, x, y):
    x = np.asarray(x)
    return x[None], np.atleast_1d(y)


def rho_rand_mc(model, x, y, epsilon: float, n_samples: int = 1000, seed: int = 0, batch_size: int = 1000, frames: bool = False) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ``(f_y(x + eps delta) - f_y(x))^2``.

    ``delta`` is uniform on ``[-1, 1]^m``; draws come from a Philox stream keyed
    by ``seed`` so results are reproducible.
    """
    if n_samples < 2:
        raise ContractError("need at least two samples")
    xb, yb = _single(model, x, y)
    f0 = float(model.fy(xb, yb, frames=frames)[0])
    rng = np.random.Generator(np.random.Philox(seed))
    vals = np.empty(n_samples)
    for i in range(0, n_samples, batch_size):
        k = min(batch_size, n_samples - i)
        delta = rng.uniform(-1.0, 1.0, size=(k,) + xb.shape[1:])
        xs = xb.astype(np.float64) + epsilon * delta
        vals[i : i + k] = (model.fy(xs, np.repeat(yb, k), frames=frames) - f0) ** 2
    mean = math.fsum(vals) / n_samples
    var = math.fsum((vals - mean) ** 2) / (n_samples - 1)
    return mean, math.sqrt(var / n_samples)


def rho_adv_firstorder(model, x, y, epsilon: float, frames: bool = False) -> float:
    """``eps^2 |grad f_y|_1^2``, the sup of the linearized change."""
    xb, yb = _single(model, x, y)
    g, _, _ = model.grad_fy(xb, yb, frames=frames)
    return epsilon**2 * float(np.abs(g).sum()) ** 2


def rho_adv_corner_oracle(model, x, y, epsilon: float, frames: bool = False) -> float:
    """Max squared change over all cube corners and the centre (dims <= 16)."""
    xb, yb = _single(model, x, y)
    m = int(np.prod(xb.shape[1:]))
    if m > MAX_CORNER_DIMS:
        raise ContractError(f"corner enumeration limited to {MAX_CORNER_DIMS} dims, got {m}")
    f0 = float(model.fy(xb, yb, frames=frames)[0])
    corners = np.array(list(itertools.product((-1.0, 1.0), repeat=m)) + [[0.0] * m])
    xs = xb.astype(np.float64).reshape(1, -1) + epsilon * corners
    vals = (model.fy(xs.reshape((len(corners),) + xb.shape[1:]), np.repeat(yb, len(corners)), frames=frames) - f0) ** 2
    return float(vals.max())


@dataclass
class VulnerabilityReport:
    rho_rand: float
    rho_rand_stderr: float
    rho_adv_firstorder: float
    rho_adv_corner: float | None
    ratio: float | None
    empirical_ratio: float | None
    lower_bound: float
    upper_bound: float | None
    l0: int
    l1: float
    l2: float
    epsilon: float
    sample_count: int

    def to_dict(self) -> dict:
        return asdict(self)


def vulnerability_report(model, x, y, epsilon: float, n_samples: int = 1000, seed: int = 0, threshold: float | None = None, frames: bool = False) -> VulnerabilityReport:
    """Assemble every vulnerability quantity for one sample.

    ``ratio``/``upper_bound`` are the linearized quantities (None for a zero
    gradient); ``empirical_ratio`` uses the sampled and worst-case changes and
    is informational only.
    """
    xb, yb = _single(model, x, y)
    rr, se = rho_rand_mc(model, x, y, epsilon, n_samples, seed, frames=frames)
    g, _, _ = model.grad_fy(xb, yb, frames=frames)
    norms = sparsity_norms(g, threshold)
    adv1 = epsilon**2 * norms.l1**2
    m = int(np.prod(xb.shape[1:]))
    corner = rho_adv_corner_oracle(model, x, y, epsilon, frames) if m <= MAX_CORNER_DIMS else None
    try:
        rb = ratio_bound_report(g, 0.0)
        ratio, upper = rb.ratio, 3.0 * norms.l0
    except UndefinedRatioError:
        ratio = upper = None
    emp_adv = corner if corner is not None else adv1
    empirical = emp_adv / rr if rr > 0 else None
    return VulnerabilityReport(rr, se, adv1, corner, ratio, empirical, 3.0, upper, norms.l0, norms.l1, norms.l2, epsilon, n_samples)


# -- random-noise vs. FGSM accuracy curves --------------------------------------------------


@dataclass
class GapRow:
    epsilon: float
    acc_random: float
    acc_adversarial: float


def gap_experiment(model, dataset, epsilon_list: Sequence[float], n_rand: int = 1, seed: int = 0, box=(0.0, 1.0)) -> list[GapRow]:
    """Accuracy under uniform cube noise vs. under FGSM of the same size.

    Each of the ``n_rand`` noise draws per sample is scored separately and the
    outcomes are averaged.
    """
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    rng = np.random.Generator(np.random.Philox(seed))
    clean = float((model.predict(dataset.x, dataset.frames) == dataset.y).mean())
    rows = []
    for eps in epsilon_list:
        if eps == 0:
            rows.append(GapRow(0.0, clean, clean))
            continue
        hits = 0
        for _ in range(n_rand):
            noise = rng.uniform(-eps, eps, size=dataset.x.shape)
            xr = np.clip(dataset.x + noise, box[0], box[1]).astype(np.float32)
            hits += int((model.predict(xr, dataset.frames) == dataset.y).sum())
        acc_rand = hits / (n_rand * len(dataset))
        out = fgsm(model, dataset.x, dataset.y, AttackConfig(AttackFamily.FGSM, eps, box=tuple(box)), frames=dataset.frames)
        rows.append(GapRow(float(eps), acc_rand, float((~out.success).mean())))
    return rows


def write_gap_csv(rows: Sequence[GapRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "acc_random", "acc_adversarial"])
        for r in rows:
            w.writerow([r.epsilon, r.acc_random, r.acc_adversarial])
