"""Typed configuration objects and their JSON validation.

Validation errors carry a dotted field path (``game.budget``) so the CLI can
report exactly which entry of a spec file is wrong.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .losses import ATTACKER_LOSSES, VICTIM_LOSSES, LossKind, LossSpec, PGDConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _check(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


@dataclass(frozen=True)
class GameConfig:
    """Every hyperparameter of one game instance.

    ``budget`` is the poison radius; ``eps_d`` the adversarial-training
    radius used by ADV/TRADES victims. ``eta`` is carried for reporting only.
    """

    budget: float
    eps_d: float = 0.0
    inner_steps: int = 10
    inner_lr: float = 1e-3
    inner_optimizer: str = "adam"
    lr_theta: float = 0.01
    lr_w: float = 0.1
    rho: float = 1.5
    trades_lambda: float = 1.0
    loss_c: str = "ce"
    loss_a: str = "sur"
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    eta: float = 0.0
    grad_clip: float | None = None
    pgd_steps: int = 10
    pgd_step_size: float | None = None
    pgd_random_start: float = 1e-3
    classifier_hidden: tuple = (32,)
    generator_hidden: tuple = (32,)
    bottleneck: int = 8
    activation: str = "relu"
    clip_range: tuple | None = None
    disjoint_clean_batch: bool = False

    def __post_init__(self):
        _check(self.budget > 0, "budget", "must be > 0")
        _check(self.eps_d >= 0, "eps_d", "must be >= 0")
        _check(self.inner_steps >= 1, "inner_steps", "must be >= 1")
        _check(self.inner_lr > 0, "inner_lr", "must be > 0")
        _check(self.inner_optimizer in ("adam", "gd"), "inner_optimizer", "must be 'adam' or 'gd'")
        _check(self.lr_theta > 0 and self.lr_w > 0, "lr_theta", "outer step sizes must be > 0")
        _check(self.rho > 0, "rho", "must be > 0")
        _check(self.trades_lambda > 0, "trades_lambda", "must be > 0")
        _check(self.epochs >= 0, "epochs", "must be >= 0")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        _check(self.pgd_steps >= 1, "pgd_steps", "must be >= 1")
        _check(self.grad_clip is None or self.grad_clip > 0, "grad_clip", "must be > 0")
        try:
            kc, ka = LossKind(self.loss_c), LossKind(self.loss_a)
        except ValueError as exc:
            raise ConfigError("loss_c" if self.loss_c not in _KINDS else "loss_a", str(exc))
        _check(kc in VICTIM_LOSSES, "loss_c", f"{kc.value} is not a victim loss")
        _check(ka in ATTACKER_LOSSES, "loss_a", f"{ka.value} is not an attacker loss")
        _check(self.activation in ("relu", "tanh"), "activation", "must be 'relu' or 'tanh'")
        if self.clip_range is not None:
            _check(len(self.clip_range) == 2 and self.clip_range[0] < self.clip_range[1],
                   "clip_range", "must be [lo, hi] with lo < hi")
        object.__setattr__(self, "classifier_hidden", tuple(self.classifier_hidden))
        object.__setattr__(self, "generator_hidden", tuple(self.generator_hidden))
        if self.clip_range is not None:
            object.__setattr__(self, "clip_range", tuple(self.clip_range))

    def victim_loss(self, pgd_seed: int = 0) -> LossSpec:
        return LossSpec(LossKind(self.loss_c), self.pgd(pgd_seed), self.trades_lambda)

    def attacker_loss(self) -> LossSpec:
        return LossSpec(LossKind(self.loss_a))

    def pgd(self, seed: int = 0) -> PGDConfig:
        # the KL objective has zero gradient at the anchor, so TRADES needs a nudge
        start = self.pgd_random_start if LossKind(self.loss_c) is LossKind.TRADES else 0.0
        return PGDConfig(self.eps_d, self.pgd_steps, self.pgd_step_size, start, seed)

    def replace(self, **changes) -> "GameConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_KINDS = {k.value for k in LossKind}


@dataclass(frozen=True)
class DataSpec:
    kind: str = "gaussian-blobs"
    n_classes: int = 3
    n_features: int = 10
    n_samples: int = 900
    separation: float = 4.0
    seed: int = 0
    test_fraction: float = 0.3
    holdout_fraction: float = 0.0

    def __post_init__(self):
        _check(self.kind in ("gaussian-blobs", "concentric-rings"), "kind",
               "must be 'gaussian-blobs' or 'concentric-rings'")
        _check(self.n_classes >= 2, "n_classes", "must be >= 2")
        _check(self.n_features >= 1, "n_features", "must be >= 1")
        _check(self.n_samples >= 10 * self.n_classes, "n_samples", "must be >= 10 * n_classes")
        _check(self.separation >= 0, "separation", "must be >= 0")
        _check(0 < self.test_fraction < 1, "test_fraction", "must be in (0, 1)")
        _check(0 <= self.holdout_fraction < 1 - self.test_fraction, "holdout_fraction",
               "must leave room for a training split")


@dataclass(frozen=True)
class VictimRecipe:
    """How a fresh victim is trained when evaluating a poison."""

    epochs: int = 40
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    hidden: tuple = (32,)
    activation: str = "relu"
    milestones: tuple = (0.75, 0.9)

    def __post_init__(self):
        _check(self.epochs >= 1, "epochs", "must be >= 1")
        _check(self.lr > 0, "lr", "must be > 0")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "milestones", tuple(self.milestones))


@dataclass(frozen=True)
class ExperimentSpec:
    game: GameConfig
    data: DataSpec = field(default_factory=DataSpec)
    victim: VictimRecipe = field(default_factory=VictimRecipe)
    scenario: str = "standard"
    victim_loss: str = "ce"
    seeds: tuple = (0, 1, 2)
    fractions: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    eps_d_grid: tuple = (0.0,)
    adv_victim_lr: float | None = None
    diag_clip: float = 10.0
    clean_floor: float = 0.9

    def __post_init__(self):
        _check(self.scenario in ("standard", "adversarial"), "scenario",
               "must be 'standard' or 'adversarial'")
        _check(len(self.seeds) >= 1, "seeds", "need at least one replicate seed")
        _check(all(0 < f <= 1 for f in self.fractions), "fractions", "must lie in (0, 1]")
        _check(list(self.fractions) == sorted(self.fractions), "fractions", "must be ascending")
        _check(all(e >= 0 for e in self.eps_d_grid), "eps_d_grid", "radii must be >= 0")
        _check(LossKind(self.victim_loss) in VICTIM_LOSSES if self.victim_loss in _KINDS else False,
               "victim_loss", "must be one of ce, adv, trades")
        for name in ("seeds", "fractions", "eps_d_grid"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    for f in known.values():
        if (f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
                and f.name not in raw):
            raise ConfigError(f"{path}.{f.name}" if path else f.name, "required field missing")
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.path}" if path else exc.path,
                          str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def game_from_dict(raw: Any, path: str = "game") -> GameConfig:
    return _build(GameConfig, raw, path)


def experiment_from_dict(raw: Any) -> ExperimentSpec:
    if not isinstance(raw, dict):
        raise ConfigError("", "spec must be a JSON object")
    if "game" not in raw:
        raise ConfigError("game", "required field missing")
    body = dict(raw)
    body["game"] = game_from_dict(raw["game"], "game")
    if "data" in raw:
        body["data"] = _build(DataSpec, raw["data"], "data")
    if "victim" in raw:
        body["victim"] = _build(VictimRecipe, raw["victim"], "victim")
    return _build(ExperimentSpec, body, "")


def load_spec(path) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError("", f"cannot read spec: {exc}") from None
    return experiment_from_dict(raw)
