"""First-order bilevel solver: value-function constraint estimated by T inner
descent steps, combined with the upper objective by a dynamic barrier.

The solver works on any :class:`BilevelProblem`. Variables are
:class:`~stackelgrad.models.ParamVector` instances; ``w`` is the leader
(generator) and ``theta`` the follower (classifier). The upper objective
depends on ``theta`` only, so the leader moves exclusively along the
constraint gradient.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .config import GameConfig
from .losses import PayoffContext, payoff_attacker, payoff_victim
from .models import MlpClassifier, ParamVector, PerturbationGenerator

DEGENERATE_SQNORM = 1e-24

ThetaGrad = Callable[[ParamVector], "tuple[float, ParamVector]"]


class SolverError(RuntimeError):
    """Non-finite values during optimisation. ``report`` keeps the trace so far."""

    def __init__(self, message: str, step: int, report: "RunReport | None" = None):
        super().__init__(message)
        self.step = step
        self.report = report


@dataclass(frozen=True)
class BomeConfig:
    inner_steps: int = 10
    inner_lr: float = 1e-3
    lr_theta: float = 0.01
    lr_w: float = 0.1
    rho: float = 1.5
    inner_optimizer: str = "adam"
    grad_clip: float | None = None

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not (self.inner_lr > 0 and self.lr_theta > 0 and self.lr_w > 0):
            raise ValueError("step sizes must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.inner_optimizer not in ("adam", "gd"):
            raise ValueError("inner_optimizer must be 'adam' or 'gd'")

    @classmethod
    def from_game(cls, game: GameConfig) -> "BomeConfig":
        return cls(game.inner_steps, game.inner_lr, game.lr_theta, game.lr_w, game.rho,
                   game.inner_optimizer, game.grad_clip)


@dataclass
class BomeStepTrace:
    step: int
    epoch: int
    jc: float
    jc_inner: float
    ja: float
    qhat: float
    lam: float
    grad_ja_norm: float
    grad_ja_norm_raw: float
    grad_q_norm: float
    degenerate: bool


class BilevelProblem(Protocol):
    def lower(self, w: ParamVector, theta: ParamVector) -> tuple[float, ParamVector, ParamVector]:
        """h(w, theta) and its gradients w.r.t. w and theta."""

    def lower_theta(self, w: ParamVector) -> ThetaGrad:
        """theta -> (h(w, theta), grad_theta) for a fixed w."""

    def upper(self, theta: ParamVector) -> tuple[float, ParamVector]:
        """l(theta) and its gradient."""


# ---------------------------------------------------------------- pieces

def inner_approx(problem: BilevelProblem, w: ParamVector, theta_start: ParamVector,
                 cfg: BomeConfig, step: int = 0) -> tuple[ParamVector, list[float]]:
    """Run ``cfg.inner_steps`` optimizer steps on h(w, .) from ``theta_start``.

    Returns the final iterate and the loss seen before each step.
    """
    fn = problem.lower_theta(w)
    theta = theta_start.copy()
    losses = []
    m = v = None
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, cfg.inner_steps + 1):
        value, g = fn(theta)
        if not math.isfinite(value):
            raise SolverError(f"non-finite lower-level loss at step {step}, inner {t}", step)
        losses.append(value)
        if cfg.inner_optimizer == "gd":
            theta = theta - g * cfg.inner_lr
            continue
        if m is None:
            m, v = g.zeros_like(), g.zeros_like()
        m = ParamVector([b1 * a + (1 - b1) * b for a, b in zip(m, g)])
        v = ParamVector([b2 * a + (1 - b2) * b * b for a, b in zip(v, g)])
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        theta = ParamVector([p - cfg.inner_lr * (mm / c1) / (np.sqrt(vv / c2) + eps)
                             for p, mm, vv in zip(theta, m, v)])
    return theta, losses


def qhat(problem: BilevelProblem, w: ParamVector, theta: ParamVector, theta_T: ParamVector):
    """Estimate of the value-function gap h(w, theta) - h(w, theta_T).

    ``theta_T`` is a constant: the gradient w.r.t. w is
    grad_w h(w, theta) - grad_w h(w, theta_T), with no term through the
    inner iterations. Returns ``(value, grad_w, grad_theta, h_at_theta, h_at_T)``.
    """
    h0, gw0, gt0 = problem.lower(w, theta)
    h1, gw1, _ = problem.lower(w, theta_T)
    return h0 - h1, gw0 - gw1, gt0, h0, h1


def lambda_k(grad_l: ParamVector | np.ndarray, grad_q: ParamVector | np.ndarray,
             rho: float) -> tuple[float, bool]:
    """Barrier multiplier ``max(rho - <grad_l, grad_q> / |grad_q|^2, 0)``.

    Returns ``(lam, degenerate)``; a vanishing constraint gradient gives 0.
    """
    gl = grad_l.flatten() if isinstance(grad_l, ParamVector) else np.ravel(grad_l)
    gq = grad_q.flatten() if isinstance(grad_q, ParamVector) else np.ravel(grad_q)
    sq = float(gq @ gq)
    if sq < DEGENERATE_SQNORM:
        return 0.0, True
    phi = rho * sq
    return max((phi - float(gl @ gq)) / sq, 0.0), False


def _clip(g: ParamVector, max_norm: float | None) -> ParamVector:
    if max_norm is None:
        return g
    n = g.norm()
    return g * (max_norm / n) if n > max_norm else g


def bome_step(problem: BilevelProblem, w: ParamVector, theta: ParamVector, cfg: BomeConfig,
              step: int = 0, epoch: int = 0):
    """One simultaneous update of both players.

    Returns ``(w_next, theta_next, trace)``.
    """
    theta_T, _ = inner_approx(problem, w, theta, cfg, step)
    q, gq_w, gq_theta, h0, h1 = qhat(problem, w, theta, theta_T)
    ja, gl_raw = problem.upper(theta)
    gl = _clip(gl_raw, cfg.grad_clip)
    for name, val in (("J_c", h0), ("J_c(theta_T)", h1), ("J_a", ja)):
        if not math.isfinite(val):
            raise SolverError(f"non-finite {name} at step {step}", step)

    # the upper objective has no w-component, so only the theta block enters <grad_l, grad_q>
    gq_flat = np.concatenate([gq_theta.flatten(), gq_w.flatten()])
    gl_flat = np.concatenate([gl.flatten(), np.zeros(gq_w.size)])
    lam, degenerate = lambda_k(gl_flat, gq_flat, cfg.rho)

    theta_next = theta - (gl + gq_theta * lam) * cfg.lr_theta
    w_next = w if lam == 0.0 else w - gq_w * (lam * cfg.lr_w)
    trace = BomeStepTrace(step, epoch, h0, h1, ja, q, lam, gl.norm(), gl_raw.norm(),
                          float(np.linalg.norm(gq_flat)), degenerate)
    return w_next, theta_next, trace


# ------------------------------------------------------------ run report

TRACE_FIELDS = [f.name for f in BomeStepTrace.__dataclass_fields__.values()]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunReport:
    steps: list[BomeStepTrace] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    status: str = "ok"

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.steps], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for s in self.steps:
            writer.writerow([_fmt(getattr(s, k)) for k in TRACE_FIELDS])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"status": self.status, "n_steps": len(self.steps), "config": self.config}
        if self.steps:
            for name in ("jc", "ja", "qhat", "lam", "grad_ja_norm"):
                col = self.column(name)
                out[name] = {"first": float(col[0]), "last": float(col[-1]),
                             "max": float(col.max()), "min": float(col.min())}
            out["degenerate_steps"] = int(sum(s.degenerate for s in self.steps))
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


# ---------------------------------------------------------- poison game

class PoisonGame:
    """The unlearnable-example game on one mini-batch.

    h = J_c(w, theta): victim loss on ``x + g_w(x)``.
    l = J_a(theta): negative attacker loss on clean inputs.
    """

    def __init__(self, classifier: MlpClassifier, generator: PerturbationGenerator,
                 x: np.ndarray, y: np.ndarray, game: GameConfig,
                 clean_x: np.ndarray | None = None, clean_y: np.ndarray | None = None,
                 pgd_seed: int = 0):
        self.classifier = classifier
        self.generator = generator
        self.x, self.y = x, y
        self.clean_x = x if clean_x is None else clean_x
        self.clean_y = y if clean_y is None else clean_y
        self.loss_c = game.victim_loss(pgd_seed)
        self.loss_a = game.attacker_loss()

    def _ctx(self, generator=None):
        return PayoffContext(self.x, self.y, self.classifier, generator)

    def lower(self, w, theta):
        wl, tl = w.leaves(), theta.leaves()
        out = payoff_victim(self._ctx(self.generator), self.loss_c, tl, wl)
        grads = ad.grad(out, wl + tl)
        return out.item(), ParamVector(grads[:len(wl)]), ParamVector(grads[len(wl):])

    def lower_theta(self, w):
        xp = self.x + self.generator.delta(self.x, w.leaves()).data
        ctx = PayoffContext(xp, self.y, self.classifier)

        def fn(theta):
            tl = theta.leaves()
            out = payoff_victim(ctx, self.loss_c, tl)
            return out.item(), ParamVector(ad.grad(out, tl))

        return fn

    def upper(self, theta):
        tl = theta.leaves()
        ctx = PayoffContext(self.clean_x, self.clean_y, self.classifier)
        out = payoff_attacker(ctx, self.loss_a, tl)
        return out.item(), ParamVector(ad.grad(out, tl))


def init_players(game: GameConfig, n_features: int, n_classes: int):
    ss = np.random.SeedSequence(game.seed)
    s_clf, s_gen = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    clf = MlpClassifier.init([n_features, *game.classifier_hidden, n_classes], s_clf,
                             game.activation)
    gen = PerturbationGenerator.init(n_features, game.generator_hidden, game.bottleneck,
                                     game.budget, s_gen, game.activation)
    return clf, gen


def train_generator(game: GameConfig, x: np.ndarray, y: np.ndarray, n_classes: int | None = None,
                    callback=None):
    """Run the full solver over ``game.epochs`` passes of mini-batches.

    Returns ``(generator, classifier, report)``; the classifier is the
    solver's follower iterate, not an evaluation model.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    if k < 2:
        raise ValueError("need at least two classes")
    clf, gen = init_players(game, x.shape[1], k)
    cfg = BomeConfig.from_game(game)
    w, theta = gen.params.copy(), clf.params.copy()
    report = RunReport(config=game.to_dict())
    rng = np.random.default_rng(np.random.SeedSequence([game.seed, 1]))
    m, bs, step = len(x), game.batch_size, 0
    for epoch in range(game.epochs):
        order = rng.permutation(m)
        clean_order = rng.permutation(m) if game.disjoint_clean_batch else order
        for start in range(0, m, bs):
            idx = order[start:start + bs]
            cidx = clean_order[start:start + bs]
            problem = PoisonGame(clf, gen, x[idx], y[idx], game, x[cidx], y[cidx],
                                 pgd_seed=game.seed * 1_000_003 + step)
            try:
                w, theta, trace = bome_step(problem, w, theta, cfg, step, epoch)
            except (SolverError, ad.NumericError) as exc:
                report.status = "diverged"
                raise SolverError(str(exc), step, report) from exc
            report.steps.append(trace)
            if callback is not None:
                callback(trace)
            step += 1
    return gen.with_params(w), clf.with_params(theta), report
