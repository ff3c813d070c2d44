"""Sparsity-regularized training, adversarial training and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackConfig, AttackFamily, AttackOutcome, ensemble_attack, run_attack
from .autodiff import ContractError, Tensor, backward, grad, no_grad
from .model import SnnModel, cross_entropy, fy_tensor, grad_fy_input, rival_class

log = logging.getLogger(__name__)


class AtMode(str, Enum):
    NONE = "none"
    FGSM = "fgsm"
    PGD = "pgd"


@dataclass
class TrainConfig:
    lam: float = 0.0
    h: float = 0.01
    lr: float = 0.1
    lr_min: float = 0.0
    epochs: int = 200
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    at_mode: AtMode = AtMode.NONE
    at_epsilon: float = 2 / 255
    at_alpha: float = 0.01
    at_steps: int = 5
    at_random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        self.at_mode = AtMode(self.at_mode)
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.h <= 0:
            raise ContractError("finite-difference step h must be > 0")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["at_mode"] = self.at_mode.value
        return d

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + math.cos(math.pi * epoch / self.epochs))

    def attack_config(self) -> AttackConfig | None:
        if self.at_mode is AtMode.NONE:
            return None
        if self.at_mode is AtMode.FGSM:
            return AttackConfig(AttackFamily.FGSM, self.at_epsilon, seed=self.seed)
        alpha = min(self.at_alpha, self.at_epsilon)
        return AttackConfig(
            AttackFamily.PGD, self.at_epsilon, alpha, self.at_steps, random_start=self.at_random_start, seed=self.seed
        )


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    sr_loss: float
    clean_acc: float
    l0: float
    l1: float
    l2: float
    seconds: float


@dataclass
class TrainingTrace:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "ce_loss", "sr_loss", "clean_acc", "l0", "l1", "l2", "seconds")

    def __len__(self):
        return len(self.records)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([getattr(r, c) for c in self.COLUMNS])


class SGD:
    """Heavy-ball SGD with L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        if lr == 0:
            return
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- sparsity regularizer -----------------------------------------------------------------


def finite_diff_l1(model, x, y, h: float = 0.01, frames: bool = False) -> np.ndarray:
    """``|f_y(x + h d) - f_y(x)| / h`` with ``d = sign(grad_x f_y)``, per sample.

    ``model`` needs ``grad_fy(x, y)`` and ``fy(x, y, ytilde)``; the rival class
    is held fixed between the two evaluations. The probe is not clipped.
    """
    if h <= 0:
        raise ContractError("h must be > 0")
    g, _, yt = model.grad_fy(x, y, frames=frames)
    d = np.sign(g)
    x0 = np.asarray(x, dtype=g.dtype)
    f0 = model.fy(x0, y, ytilde=yt, frames=frames)
    f1 = model.fy(x0 + h * d, y, ytilde=yt, frames=frames)
    return np.abs(f1 - f0) / h


def sr_loss(model: SnnModel, x, y, lam: float, h: float = 0.01, frames: bool = False):
    """Cross-entropy plus ``lam * |f_y(x + h d) - f_y(x)| / h`` (batch means).

    Both forward passes stay on the graph so the regularizer reaches the
    weights; ``d`` is a constant. Returns ``(loss, ce, reg, counts)``.
    """
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    y = np.asarray(y, dtype=np.intp)
    x = np.asarray(x, dtype=np.float32)
    xt = Tensor(x, requires_grad=lam > 0)
    counts = model.run(xt, frames)
    ce = cross_entropy(counts, y)
    if lam == 0:
        return ce, ce, None, counts
    yt = rival_class(counts.data, y)
    f = fy_tensor(counts, y, yt)
    (gx,) = grad(f.sum(), [xt])
    d = np.sign(gx)
    counts_hat = model.run(Tensor((x + h * d).astype(np.float32)), frames)
    f_hat = fy_tensor(counts_hat, y, yt)
    reg = (f_hat - f).abs().mean() * (lam / h)
    return ce + reg, ce, reg, counts


def adversarial_augment(model: SnnModel, x, y, at_mode, epsilon: float = 2 / 255, alpha: float = 0.01, steps: int = 5, frames: bool = False, seed: int = 0) -> np.ndarray:
    """Training-time adversarial examples (PGD5 or FGSM by default at 2/255)."""
    at_mode = AtMode(at_mode)
    if at_mode is AtMode.NONE:
        raise ContractError("adversarial_augment needs an attack mode")
    cfg = TrainConfig(at_mode=at_mode, at_epsilon=epsilon, at_alpha=alpha, at_steps=steps, seed=seed).attack_config()
    return run_attack(model, x, y, cfg, frames=frames).x_adv


def gradient_norms(model, x, y, frames: bool = False, threshold: float | None = None, batch_size: int = 256) -> dict:
    """Mean l0/l1/l2 of the per-sample input gradient of ``f_y``."""
    from .vulnerability import sparsity_norms

    l0, l1, l2 = [], [], []
    x = np.asarray(x)
    y = np.asarray(y)
    for i in range(0, len(x), batch_size):
        g, _, _ = grad_fy_input(model, x[i : i + batch_size], y[i : i + batch_size], frames=frames)
        for gi in g.reshape(len(g), -1):
            n = sparsity_norms(gi, threshold)
            l0.append(n.l0)
            l1.append(n.l1)
            l2.append(n.l2)
    return {"l0": float(np.mean(l0)), "l1": float(np.mean(l1)), "l2": float(np.mean(l2))}


class NonFiniteLossError(RuntimeError):
    pass


def train_epoch(model: SnnModel, batches: Iterable, config: TrainConfig, epoch: int = 0, optimizer: SGD | None = None, frames: bool = False) -> tuple[SnnModel, EpochRecord]:
    """One pass over ``batches`` of ``(x, y)`` with the configured regime.

    vanilla: lam=0, no AT; SR: lam>0; AT: attack mode set; SR*: both.
    """
    optimizer = optimizer or SGD(model.params(), config.momentum, config.weight_decay)
    lr = config.lr_at(epoch)
    atk = config.attack_config()
    t0 = time.monotonic()
    ce_sum = reg_sum = 0.0
    correct = seen = 0
    n_batches = 0
    for x, y in batches:
        n_batches += 1
        if atk is not None:
            x = run_attack(model, x, y, atk, frames=frames).x_adv
        loss, ce, reg, counts = sr_loss(model, x, y, config.lam, config.h, frames)
        if not np.isfinite(loss.data):
            raise NonFiniteLossError(f"epoch {epoch}: non-finite loss {float(loss.data)} (ce={float(ce.data)})")
        optimizer.zero_grad()
        backward(loss, optimizer.params)
        if not all(np.isfinite(p.grad).all() for p in optimizer.params):
            raise NonFiniteLossError(f"epoch {epoch}: non-finite gradient (loss={float(loss.data)})")
        optimizer.step(lr)
        ce_sum += float(ce.data) * len(y)
        reg_sum += (float(reg.data) if reg is not None else 0.0) * len(y)
        correct += int((counts.data.argmax(axis=1) == np.asarray(y)).sum())
        seen += len(y)
    if n_batches == 0:
        raise ContractError("train_epoch needs at least one batch")
    record = EpochRecord(epoch, ce_sum / seen, reg_sum / seen, correct / seen, 0.0, 0.0, 0.0, time.monotonic() - t0)
    return model, record


def train(model: SnnModel, dataset, config: TrainConfig, norms_on=None) -> TrainingTrace:
    """Full training loop; ``norms_on`` (a Dataset) adds gradient norms to each record."""
    rng = np.random.default_rng(config.seed)
    opt = SGD(model.params(), config.momentum, config.weight_decay)
    trace = TrainingTrace()
    for epoch in range(config.epochs):
        _, rec = train_epoch(model, dataset.batches(config.batch_size, rng), config, epoch, opt, dataset.frames)
        if norms_on is not None:
            norms = gradient_norms(model, norms_on.x, norms_on.y, norms_on.frames)
            rec.l0, rec.l1, rec.l2 = norms["l0"], norms["l1"], norms["l2"]
        log.info("epoch %d ce=%.4f sr=%.4f acc=%.3f", epoch, rec.ce_loss, rec.sr_loss, rec.clean_acc)
        trace.records.append(rec)
    return trace


# -- evaluation ---------------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    correct: np.ndarray
    outcome: AttackOutcome | None = None


def evaluate(model: SnnModel, dataset, attack: AttackConfig | Sequence[AttackConfig] | None = None, batch_size: int = 256) -> EvalResult:
    """Clean accuracy, or accuracy under an attack (a list means an ensemble)."""
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    if attack is None:
        pred = model.predict(dataset.x, dataset.frames)
        correct = pred == dataset.y
        return EvalResult(float(correct.mean()), correct)
    parts = []
    for i in range(0, len(dataset), batch_size):
        x, y = dataset.x[i : i + batch_size], dataset.y[i : i + batch_size]
        if isinstance(attack, AttackConfig):
            parts.append(run_attack(model, x, y, attack, frames=dataset.frames))
        else:
            parts.append(ensemble_attack(model, x, y, list(attack), frames=dataset.frames))
    outcome = AttackOutcome(
        np.concatenate([p.x_adv for p in parts]),
        np.concatenate([p.success for p in parts]),
        np.concatenate([p.loss for p in parts]),
        np.concatenate([p.family for p in parts]),
        [s for p in parts for s in p.surrogate],
        np.concatenate([p.linf for p in parts]),
    )
    correct = ~outcome.success
    return EvalResult(float(correct.mean()), correct, outcome)
