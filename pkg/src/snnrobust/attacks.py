"""l-infinity gradient attacks driven by surrogate gradients.

All attacks are batched: ``x`` is ``(N, ...)`` and outcomes carry per-sample
arrays. Model weights are only read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError, DimensionError, SurrogateFamily, SurrogateSpec, Tensor, grad, no_grad
from .model import SnnModel, cross_entropy

DEFAULT_EPSILON = 8 / 255
DEFAULT_ALPHA = 0.01

# triangle / sigmoid / arctan members used for ensemble evaluation
ENSEMBLE_SURROGATES = (
    SurrogateSpec(SurrogateFamily.TRIANGLE, 1.0),
    SurrogateSpec(SurrogateFamily.SIGMOID, 4.0),
    SurrogateSpec(SurrogateFamily.ARCTAN, 2.0),
)


class AttackFamily(str, Enum):
    FGSM = "fgsm"
    PGD = "pgd"


@dataclass(frozen=True)
class AttackConfig:
    family: AttackFamily = AttackFamily.PGD
    epsilon: float = DEFAULT_EPSILON
    alpha: float = DEFAULT_ALPHA
    steps: int = 10
    surrogates: tuple[SurrogateSpec, ...] = (SurrogateSpec(),)
    box: tuple[float, float] = (0.0, 1.0)
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", AttackFamily(self.family))
        object.__setattr__(self, "surrogates", tuple(self.surrogates))
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        if self.family is AttackFamily.PGD:
            if not 0 < self.alpha <= self.epsilon:
                raise ContractError("PGD step size must satisfy 0 < alpha <= epsilon")
            if self.steps < 1:
                raise ContractError("PGD needs at least one step")
        if not self.surrogates:
            raise ContractError("at least one surrogate is required")
        if self.box[0] >= self.box[1]:
            raise ContractError("empty domain box")

    @property
    def name(self) -> str:
        return "FGSM" if self.family is AttackFamily.FGSM else f"PGD{self.steps}"

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "steps": self.steps,
            "surrogates": [s.to_dict() for s in self.surrogates],
            "box": list(self.box),
            "random_start": self.random_start,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "surrogates" in d:
            d["surrogates"] = tuple(SurrogateSpec.from_dict(s) for s in d["surrogates"])
        if "box" in d:
            d["box"] = tuple(d["box"])
        return cls(**d)


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    success: np.ndarray
    loss: np.ndarray
    family: np.ndarray
    surrogate: list
    linf: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.linf is None:
            self.linf = np.zeros(len(self.success))

    def report_lines(self, sample_ids: Sequence[int] | None = None) -> list[str]:
        """JSON-lines records, one per sample."""
        ids = range(len(self.success)) if sample_ids is None else sample_ids
        lines = []
        for i, sid in enumerate(ids):
            spec = self.surrogate[i]
            lines.append(
                json.dumps(
                    {
                        "sample_id": int(sid),
                        "family": str(self.family[i]),
                        "surrogate": spec.family.value,
                        "gamma": spec.gamma,
                        "success": bool(self.success[i]),
                        "linf_norm": float(self.linf[i]),
                        "loss": float(self.loss[i]),
                    }
                )
            )
        return lines


def project_linf(candidate, center, epsilon: float, box=(0.0, 1.0)) -> np.ndarray:
    """Clamp into the epsilon-ball around ``center``, then into ``box``."""
    candidate = np.asarray(candidate)
    center = np.asarray(center)
    if candidate.shape != center.shape:
        raise DimensionError(f"shape mismatch {candidate.shape} vs {center.shape}")
    out = np.clip(candidate, center - epsilon, center + epsilon)
    return np.clip(out, box[0], box[1])


def loss_and_grad(model: SnnModel, x, y, surrogate: SurrogateSpec | None = None, frames: bool = False):
    """Per-sample cross-entropy and its input gradient."""
    xt = Tensor(np.array(x, dtype=np.float32), requires_grad=True)
    counts = model.run(xt, frames, surrogate)
    nll = cross_entropy(counts, np.asarray(y, dtype=np.intp), reduction="none")
    if not nll.requires_grad:
        return nll.data.astype(np.float64), np.zeros_like(xt.data)
    (g,) = grad(nll.sum(), [xt])
    return nll.data.astype(np.float64), g


def _evaluate(model: SnnModel, x_adv, y, frames: bool):
    with no_grad():
        counts = model.run(Tensor(np.asarray(x_adv, dtype=np.float32)), frames)
        nll = cross_entropy(counts, np.asarray(y, dtype=np.intp), reduction="none")
    pred = counts.data.argmax(axis=1)
    return pred != np.asarray(y), nll.data.astype(np.float64)


def _linf(a, b) -> np.ndarray:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return d.reshape(len(d), -1).max(axis=1)


def _outcome(model, x, x_adv, y, family, spec, frames, target=None) -> AttackOutcome:
    success, loss = _evaluate(target or model, x_adv, y, frames)
    n = len(y)
    return AttackOutcome(x_adv, success, loss, np.array([family] * n, dtype=object), [spec] * n, _linf(x_adv, x))


def fgsm(model: SnnModel, x, y, config: AttackConfig, surrogate: SurrogateSpec | None = None, frames: bool = False) -> AttackOutcome:
    """One signed-gradient step of size epsilon, clipped to the box."""
    spec = surrogate or config.surrogates[0]
    x = np.asarray(x, dtype=np.float32)
    _, g = loss_and_grad(model, x, y, spec, frames)
    x_adv = np.clip(x + config.epsilon * np.sign(g), config.box[0], config.box[1]).astype(np.float32)
    return _outcome(model, x, x_adv, y, "FGSM", spec, frames)


def pgd(model: SnnModel, x, y, config: AttackConfig, surrogate: SurrogateSpec | None = None, frames: bool = False) -> AttackOutcome:
    """Iterated signed-gradient steps with projection; returns the final iterate."""
    spec = surrogate or config.surrogates[0]
    x = np.asarray(x, dtype=np.float32)
    x_adv = x.copy()
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        noise = rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
        x_adv = project_linf(x + noise, x, config.epsilon, config.box).astype(np.float32)
    for _ in range(config.steps):
        _, g = loss_and_grad(model, x_adv, y, spec, frames)
        x_adv = project_linf(x_adv + config.alpha * np.sign(g), x, config.epsilon, config.box).astype(np.float32)
    return _outcome(model, x, x_adv, y, f"PGD{config.steps}", spec, frames)


def run_attack(model, x, y, config: AttackConfig, surrogate=None, frames: bool = False) -> AttackOutcome:
    if config.family is AttackFamily.FGSM:
        return fgsm(model, x, y, config, surrogate, frames)
    return pgd(model, x, y, config, surrogate, frames)


def ensemble_attack(model: SnnModel, x, y, attack_list: Sequence[AttackConfig], frames: bool = False) -> AttackOutcome:
    """Every (attack, surrogate) pair; a sample falls if any member fools the model.

    Per sample the first successful member (list order) is returned, otherwise
    the member with the highest loss.
    """
    members = [(cfg, spec) for cfg in attack_list for spec in cfg.surrogates]
    if not members:
        raise ContractError("ensemble needs at least one attack")
    results = [run_attack(model, x, y, cfg, spec, frames) for cfg, spec in members]
    success = np.stack([r.success for r in results])  # (members, N)
    loss = np.stack([r.loss for r in results])
    any_success = success.any(axis=0)
    choice = np.where(any_success, success.argmax(axis=0), loss.argmax(axis=0))
    n = len(any_success)
    x_adv = np.stack([results[choice[i]].x_adv[i] for i in range(n)]) if n else results[0].x_adv
    return AttackOutcome(
        x_adv,
        any_success,
        loss[choice, np.arange(n)],
        np.array([results[choice[i]].family[i] for i in range(n)], dtype=object),
        [results[choice[i]].surrogate[i] for i in range(n)],
        np.array([results[choice[i]].linf[i] for i in range(n)]),
    )


def ensemble_configs(base: AttackConfig, surrogates: Iterable[SurrogateSpec] = ENSEMBLE_SURROGATES) -> list[AttackConfig]:
    """``base`` re-targeted at each of the given surrogates."""
    return [replace(base, surrogates=(s,)) for s in surrogates]


def surrogate_grid(family, gamma_lo: float, gamma_hi: float, step: float) -> list[SurrogateSpec]:
    if gamma_lo <= 0 or step <= 0:
        raise ContractError("grid needs gamma_lo > 0 and step > 0")
    if gamma_hi < gamma_lo:
        raise ContractError(f"empty width range [{gamma_lo}, {gamma_hi}]")
    n = int(np.floor((gamma_hi - gamma_lo) / step + 1e-9)) + 1
    return [SurrogateSpec(family, round(gamma_lo + i * step, 10)) for i in range(n)]


def transfer_attack(source: SnnModel, target, x, y, config: AttackConfig, frames: bool = False) -> AttackOutcome:
    """Craft on ``source``, score on ``target`` (black-box setting).

    ``target`` may be any object with ``counts(x, frames)``.
    """
    if source.input_shape and getattr(target, "input_shape", None) and tuple(source.input_shape) != tuple(target.input_shape):
        raise DimensionError("source and target expect different input shapes")
    crafted = run_attack(source, x, y, config, frames=frames)
    counts = target.counts(crafted.x_adv, frames)
    y = np.asarray(y)
    crafted.success = counts.argmax(axis=1) != y
    shifted = counts - counts.max(axis=1, keepdims=True)
    crafted.loss = (np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(len(y)), y]).astype(np.float64)
    return crafted
