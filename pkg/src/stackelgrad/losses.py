"""Per-sample losses, PGD inner maximisation and the two players' payoffs.

Every loss takes a batch of logits ``(B, K)`` and integer labels ``(B,)`` and
returns a per-sample tensor of shape ``(B,)``. A single 1-D logit row is also
accepted, in which case the result is a scalar tensor.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .models import MlpClassifier, PerturbationGenerator, project_linf

BOUND_CLAMP = 1e-300


class LossKind(str, enum.Enum):
    CE = "ce"
    SUR = "sur"
    ADV = "adv"
    TRADES = "trades"
    CW = "cw"
    ACC = "acc"


VICTIM_LOSSES = (LossKind.CE, LossKind.ADV, LossKind.TRADES)
ATTACKER_LOSSES = (LossKind.SUR, LossKind.CE, LossKind.CW, LossKind.ACC)


@dataclass(frozen=True)
class PGDConfig:
    """Inner maximisation settings. ``step_size=None`` means ``eps_d / 4``."""

    eps_d: float = 0.0
    steps: int = 10
    step_size: float | None = None
    random_start: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.eps_d < 0:
            raise ValueError("eps_d must be non-negative")
        if self.steps < 1:
            raise ValueError("PGD needs at least one step")

    @property
    def alpha(self) -> float:
        return self.eps_d / 4 if self.step_size is None else self.step_size


def _rows(logits, y):
    logits = ad.as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = ad.reshape(logits, (1, -1))
        y = np.atleast_1d(y)
    y = np.asarray(y, dtype=np.int64)
    return logits, y, single


def _finish(value: ad.Tensor, single: bool) -> ad.Tensor:
    return ad.reshape(value, ()) if single else value


def _off_label_mask(shape, y):
    mask = np.ones(shape, dtype=bool)
    mask[np.arange(shape[0]), y] = False
    return mask


def ce_loss(logits, y) -> ad.Tensor:
    logits, y, single = _rows(logits, y)
    return _finish(-ad.gather(ad.log_softmax(logits), y), single)


def surrogate_loss(logits, y) -> ad.Tensor:
    """Negative of the largest cross-entropy over the wrong labels, i.e. the
    log-probability of the least likely wrong class."""
    logits, y, single = _rows(logits, y)
    if logits.shape[1] < 2:
        raise ValueError("surrogate loss needs at least two classes")
    neg_logp = -ad.log_softmax(logits)
    return _finish(-ad.masked_max(neg_logp, _off_label_mask(logits.shape, y)), single)


def cw_loss(logits, y) -> ad.Tensor:
    logits, y, single = _rows(logits, y)
    if logits.shape[1] < 2:
        raise ValueError("CW loss needs at least two classes")
    best_other = ad.masked_max(logits, _off_label_mask(logits.shape, y))
    return _finish(best_other - ad.gather(logits, y), single)


def acc_loss(logits, y) -> ad.Tensor:
    """-1 where the true class strictly wins, 0 otherwise (ties are errors).

    Piecewise constant, so the returned tensor is a leaf.
    """
    cw = cw_loss(ad.stop_gradient(ad.as_tensor(logits)), y).data
    return ad.Tensor(np.where(cw < 0, -1.0, 0.0))


def ce_sur_bound_check(logits, y):
    """Both sides of ``CE >= -log(1 - (K-1) exp(SUR))``.

    ``exp(SUR)`` is the smallest wrong-class probability ``p_min``, so the log
    argument equals ``p_y + p_min * sum_{k != y} expm1(z_k - z_min)``, a sum
    of non-negative terms that is evaluated without cancellation.

    Returns ``(lhs, rhs, clamped)``; ``clamped`` marks rows where the log
    argument was pushed up to ``BOUND_CLAMP`` (the bound is vacuous there).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    k = logits.shape[1]
    if k < 2:
        raise ValueError("bound needs at least two classes")
    rows = np.arange(len(y))
    logp = ad.log_softmax(ad.Tensor(logits)).data
    lhs = -logp[rows, y]
    off = _off_label_mask(logits.shape, y)
    z_min = np.where(off, logits, np.inf).min(axis=1, keepdims=True)
    d = np.where(off, logits - z_min, 0.0)
    p = np.exp(logp)
    p_min = np.exp(np.where(off, logp, np.inf).min(axis=1, keepdims=True))
    # p_k - p_min; the expm1 form only matters when the two are close
    gap = np.where(d > 1.0, p - p_min, p_min * np.expm1(np.minimum(d, 1.0)))
    p_y = p[rows, y]
    extra = np.where(off, gap, 0.0).sum(axis=1)
    arg = p_y + extra
    clamped = arg < BOUND_CLAMP
    rhs = -np.log(np.maximum(arg, BOUND_CLAMP))
    # near equality, lhs - log1p(extra / p_y) keeps rhs <= lhs exact in floating point
    ratio = np.divide(extra, p_y, out=np.full_like(extra, np.inf), where=p_y > 0)
    near = ratio <= 1.0
    rhs = np.where(near, lhs - np.log1p(np.where(near, ratio, 0.0)), rhs)
    if lhs.size == 1:
        return float(lhs[0]), float(rhs[0]), bool(clamped[0])
    return lhs, rhs, clamped


def accuracy_count(logits, y) -> tuple[int, int]:
    """Independent accuracy counter: correct iff the true logit beats every
    other logit strictly."""
    logits = np.asarray(logits, dtype=np.float64)
    correct = 0
    for row, label in zip(logits, np.asarray(y)):
        if all(row[label] > row[j] for j in range(len(row)) if j != label):
            correct += 1
    return correct, len(logits)


# ------------------------------------------------------------------- PGD

def pgd_attack(objective: Callable[[ad.Tensor], ad.Tensor], x, cfg: PGDConfig,
               lo=None, hi=None) -> np.ndarray:
    """Projected sign-gradient ascent inside the l-inf ball of radius ``eps_d``.

    ``objective`` maps a batch to per-sample values. The best iterate per
    sample is kept, so the returned point never scores below the start.
    """
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.eps_d
    if eps == 0:
        return x.copy()
    start = x.copy()
    if cfg.random_start > 0:
        rng = np.random.default_rng(cfg.seed)
        start = project_linf(x + cfg.random_start * rng.standard_normal(x.shape), x, eps)
    cur = start
    best = start.copy()
    best_val = None
    for step in range(cfg.steps + 1):
        leaf = ad.Tensor(cur)
        vals = objective(leaf)
        v = vals.data
        if best_val is None:
            best_val = v.copy()
        else:
            better = v > best_val
            best[better] = cur[better]
            best_val = np.where(better, v, best_val)
        if step == cfg.steps:
            break
        (g,) = ad.grad(ad.sum_(vals), [leaf])
        cur = project_linf(cur + cfg.alpha * np.sign(g), x, eps)
        if lo is not None or hi is not None:
            cur = np.clip(cur, lo, hi)
    return best


def _model_fn(model: MlpClassifier, theta):
    return lambda z: model.logits(z, theta)


def adv_example(model: MlpClassifier, x, y, cfg: PGDConfig, theta=None) -> np.ndarray:
    frozen = [ad.stop_gradient(t) for t in theta] if theta is not None else None
    f_const = _model_fn(model, frozen)
    return pgd_attack(lambda z: ce_loss(f_const(z), y), ad.as_tensor(x).data, cfg)


def trades_example(model: MlpClassifier, x, cfg: PGDConfig, theta=None) -> np.ndarray:
    xd = ad.as_tensor(x).data
    frozen = [ad.stop_gradient(t) for t in theta] if theta is not None else None
    f_const = _model_fn(model, frozen)
    anchor = ad.stop_gradient(ad.log_softmax(f_const(xd)))
    return pgd_attack(lambda z: ad.kl_rows(anchor, ad.log_softmax(f_const(z))), xd, cfg)


def adv_loss(model: MlpClassifier, x, y, cfg: PGDConfig, theta=None) -> ad.Tensor:
    """Cross-entropy at the PGD point. The displacement is held constant, so
    gradients flow through ``x`` and ``theta`` (Danskin)."""
    x = ad.as_tensor(x)
    mu = adv_example(model, x, y, cfg, theta) - x.data
    return ce_loss(model.logits(x + ad.Tensor(mu), theta), y)


def trades_loss(model: MlpClassifier, x, y, cfg: PGDConfig, lam: float, theta=None) -> ad.Tensor:
    if not lam > 0:
        raise ValueError("TRADES weight must be positive")
    x = ad.as_tensor(x)
    mu = trades_example(model, x, cfg, theta) - x.data
    logits = model.logits(x, theta)
    logits_adv = model.logits(x + ad.Tensor(mu), theta)
    kl = ad.kl_rows(ad.log_softmax(logits), ad.log_softmax(logits_adv))
    return ce_loss(logits, y) + kl * (1.0 / lam)


# --------------------------------------------------------------- payoffs

@dataclass(frozen=True)
class LossSpec:
    """A loss selection plus the parameters it needs."""

    kind: LossKind
    pgd: PGDConfig = PGDConfig()
    trades_lambda: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind in (LossKind.ADV, LossKind.TRADES) and not self.pgd.eps_d >= 0:
            raise ValueError("adversarial losses need eps_d >= 0")
        if self.kind is LossKind.TRADES and not self.trades_lambda > 0:
            raise ValueError("TRADES needs trades_lambda > 0")


def sample_losses(spec: LossSpec, model: MlpClassifier, x, y, theta=None) -> ad.Tensor:
    kind = spec.kind
    if kind is LossKind.ADV:
        return adv_loss(model, x, y, spec.pgd, theta)
    if kind is LossKind.TRADES:
        return trades_loss(model, x, y, spec.pgd, spec.trades_lambda, theta)
    logits = model.logits(x, theta)
    if kind is LossKind.CE:
        return ce_loss(logits, y)
    if kind is LossKind.SUR:
        return surrogate_loss(logits, y)
    if kind is LossKind.CW:
        return cw_loss(logits, y)
    return acc_loss(logits, y)


@dataclass
class PayoffContext:
    x: np.ndarray
    y: np.ndarray
    model: MlpClassifier
    generator: PerturbationGenerator | None = None

    def __post_init__(self):
        if len(self.x) == 0:
            raise ValueError("payoff evaluated on an empty split")


def poisoned_input(ctx: PayoffContext, w=None) -> ad.Tensor:
    x = ad.Tensor(ctx.x)
    if ctx.generator is None:
        return x
    return x + ctx.generator.delta(x, w)


def payoff_victim(ctx: PayoffContext, loss_c: LossSpec, theta=None, w=None) -> ad.Tensor:
    """Mean training loss of the victim on the (poisoned) split."""
    if LossKind(loss_c.kind) not in VICTIM_LOSSES:
        raise ValueError(f"{loss_c.kind} is not a victim loss")
    return ad.mean(sample_losses(loss_c, ctx.model, poisoned_input(ctx, w), ctx.y, theta))


def payoff_attacker(ctx: PayoffContext, loss_a: LossSpec, theta=None) -> ad.Tensor:
    """Negative mean attacker loss on CLEAN inputs; independent of the generator."""
    if LossKind(loss_a.kind) not in ATTACKER_LOSSES:
        raise ValueError(f"{loss_a.kind} is not an attacker loss")
    return -ad.mean(sample_losses(loss_a, ctx.model, ad.Tensor(ctx.x), ctx.y, theta))
