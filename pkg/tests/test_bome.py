import math

import numpy as np
import pytest

from stackelgrad.bome import (BomeConfig, PoisonGame, RunReport, SolverError, bome_step,
                              init_players, inner_approx, lambda_k, qhat, train_generator)
from stackelgrad.config import GameConfig
from stackelgrad.data import make_synthetic
from stackelgrad.models import ParamVector
import oracles
from oracles import central_fd, rel_error


def pv(*values) -> ParamVector:
    return ParamVector([np.array(values, dtype=np.float64)])


class QuadraticGame:
    """h(w, t) = 1/2 |t - M w|^2 and l(t) = 1/2 |t - c|^2, gradients by hand."""

    def __init__(self, m: np.ndarray, c: np.ndarray):
        self.m, self.c = m, c

    def lower(self, w, theta):
        r = theta.flatten() - self.m @ w.flatten()
        return 0.5 * float(r @ r), pv(*(-self.m.T @ r)), pv(*r)

    def lower_theta(self, w):
        mw = self.m @ w.flatten()

        def fn(theta):
            r = theta.flatten() - mw
            return 0.5 * float(r @ r), pv(*r)
        return fn

    def upper(self, theta):
        r = theta.flatten() - self.c
        return 0.5 * float(r @ r), pv(*r)


class AnalyticGame(QuadraticGame):
    """l = (t - 1)^2, h = (t - w)^2: the solution is w = t = 1."""

    def __init__(self):
        super().__init__(np.eye(1), np.ones(1))

    def lower(self, w, theta):
        h, gw, gt = super().lower(w, theta)
        return 2 * h, gw * 2.0, gt * 2.0

    def lower_theta(self, w):
        fn = super().lower_theta(w)

        def scaled(theta):
            h, g = fn(theta)
            return 2 * h, g * 2.0
        return scaled

    def upper(self, theta):
        l, g = super().upper(theta)
        return 2 * l, g * 2.0


ANALYTIC_CFG = BomeConfig(inner_steps=10, inner_lr=0.1, lr_theta=0.05, lr_w=0.05, rho=1.5,
                          inner_optimizer="gd")


def solve_analytic(cfg=ANALYTIC_CFG, max_steps=5000, tol=1e-3):
    game, w, theta = AnalyticGame(), pv(0.0), pv(3.0)
    traces = []
    for k in range(max_steps):
        w, theta, tr = bome_step(game, w, theta, cfg, k)
        traces.append(tr)
        if abs(theta.flatten()[0] - 1) + abs(w.flatten()[0] - 1) < tol:
            break
    return w, theta, traces


# ------------------------------------------------------------------ lambda

def test_lambda_closed_form_cases():
    assert lambda_k(np.array([0.0, 3.0]), np.array([2.0, 0.0]), 1.5) == (1.5, False)
    gq = np.array([0.6, 0.8])
    assert lambda_k(2 * gq, gq, 1.5) == (0.0, False)
    lam, _ = lambda_k(-gq, gq, 1.5)
    assert abs(lam - 2.5) <= 1e-12


def test_lambda_opposed_pattern():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gq = rng.standard_normal(5)
        a = rng.uniform(0.1, 10)
        lam, _ = lambda_k(-a * gq, gq, 1.5)
        expected = 1.5 + np.linalg.norm(a * gq) / np.linalg.norm(gq)
        assert abs(lam - expected) <= 1e-12 * max(1.0, expected)


def test_lambda_degenerate():
    assert lambda_k(np.ones(3), np.zeros(3), 1.5) == (0.0, True)
    assert lambda_k(np.ones(3), np.full(3, 1e-13), 1.5) == (0.0, True)


def test_lambda_nonnegative_fuzz():
    rng = np.random.default_rng(1)
    gl = rng.standard_normal((100_000, 4)) * rng.choice([1e-3, 1.0, 1e3], (100_000, 1))
    gq = rng.standard_normal((100_000, 4)) * rng.choice([1e-3, 1.0, 1e3], (100_000, 1))
    rho = rng.uniform(0.01, 5.0, 100_000)
    assert all(lambda_k(a, b, r)[0] >= 0.0 for a, b, r in zip(gl, gq, rho))


# --------------------------------------------------------------- inner loop

class HalfNorm:
    def lower_theta(self, w):
        return lambda t: (0.5 * t.norm() ** 2, t.copy())


def test_inner_one_gd_step_closed_form():
    cfg = BomeConfig(inner_steps=1, inner_lr=0.3, inner_optimizer="gd")
    start = pv(1.0, -2.0, 4.0)
    theta_t, _ = inner_approx(HalfNorm(), pv(), start, cfg)
    assert np.allclose(theta_t.flatten(), 0.7 * start.flatten(), rtol=1e-15)
    assert start == pv(1.0, -2.0, 4.0)


@pytest.mark.parametrize("seed", range(5))
def test_inner_descent_lemma_on_quadratic(seed):
    rng = np.random.default_rng(seed)
    game = QuadraticGame(rng.standard_normal((3, 2)), rng.standard_normal(3))
    w, start = pv(*rng.standard_normal(2)), pv(*rng.standard_normal(3))
    cfg = BomeConfig(inner_steps=10, inner_lr=0.9, inner_optimizer="gd")  # L = 1
    theta_t, losses = inner_approx(game, w, start, cfg)
    fn = game.lower_theta(w)
    assert fn(theta_t)[0] <= fn(start)[0]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def _gaussian_game(seed=0, n_classes=2, m=64):
    ds = make_synthetic(n_classes=n_classes, n_samples=200, n_features=6, seed=seed)
    game = GameConfig(budget=0.5, classifier_hidden=(16,), generator_hidden=(16,), bottleneck=4,
                      seed=seed)
    clf, gen = init_players(game, 6, n_classes)
    x, y = ds.features[:m], ds.labels[:m]
    return PoisonGame(clf, gen, x, y, game), clf, gen, game


def test_inner_adam_decreases_on_gaussian_task():
    problem, clf, gen, game = _gaussian_game()
    cfg = BomeConfig.from_game(game)
    assert cfg.inner_optimizer == "adam" and cfg.inner_lr == 1e-3
    theta_t, losses = inner_approx(problem, gen.params, clf.params, cfg)
    losses = losses + [problem.lower_theta(gen.params)(theta_t)[0]]
    decreases = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreases >= 9


# ----------------------------------------------------------------------- qhat

def test_qhat_zero_at_fixed_point():
    problem, clf, gen, _ = _gaussian_game()
    q, *_ = qhat(problem, gen.params, clf.params, clf.params)
    assert q == 0.0


def test_qhat_exact_inner_solve_matches_closed_form():
    rng = np.random.default_rng(3)
    game = QuadraticGame(rng.standard_normal((3, 2)), rng.standard_normal(3))
    w, theta = pv(*rng.standard_normal(2)), pv(*rng.standard_normal(3))
    exact = pv(*(game.m @ w.flatten()))
    q, *_ = qhat(game, w, theta, exact)
    r = theta.flatten() - game.m @ w.flatten()
    assert q == pytest.approx(0.5 * r @ r, rel=1e-14) and q >= 0


def _reference_h(problem, clf, gen):
    """h(w, theta) in extended precision with plain numpy."""
    act, t_shapes, w_shapes = clf.activation, clf.params.shapes, gen.params.shapes

    def h(wf, tf):
        xp = problem.x + oracles.delta(problem.x, oracles.split_like(wf, w_shapes),
                                       gen.budget, act)
        return oracles.ce(oracles.mlp(xp, oracles.split_like(tf, t_shapes), act),
                          problem.y).mean()
    return h


@pytest.mark.parametrize("seed", range(3))
def test_qhat_gradients_respect_stop_gradient(seed):
    problem, clf, gen, game = _gaussian_game(seed, n_classes=3, m=16)
    cfg = BomeConfig.from_game(game)
    w, theta = gen.params, clf.params
    theta_t, _ = inner_approx(problem, w, theta, cfg)
    _, gq_w, gq_theta, _, _ = qhat(problem, w, theta, theta_t)
    h = _reference_h(problem, clf, gen)
    wf, tf, tTf = w.flatten(), theta.flatten(), theta_t.flatten()
    fd_w = central_fd(lambda v: h(v, tf) - h(v, tTf), wf)
    fd_t = central_fd(lambda v: h(wf, v) - h(wf, tTf), tf)
    assert rel_error(gq_w.flatten(), fd_w) < 1e-5
    assert rel_error(gq_theta.flatten(), fd_t) < 1e-5


# ------------------------------------------------------------------ bome_step

def test_lambda_zero_freezes_w():
    game = QuadraticGame(np.eye(1), np.array([-5.0]))
    w, theta = pv(0.0), pv(1.0)
    cfg = BomeConfig(inner_steps=10, inner_lr=0.2, inner_optimizer="gd")
    w_next, theta_next, tr = bome_step(game, w, theta, cfg)
    assert tr.lam == 0.0 and not tr.degenerate
    assert w_next.flatten().tobytes() == w.flatten().tobytes()
    assert theta_next != theta


def _hand_step(m, c, w, theta, inner_lr, lr_t, lr_w, rho, steps, adam):
    """Scalar-by-scalar reference for one solver step on QuadraticGame."""
    nt, nw = len(theta), len(w)
    mw = [sum(m[i][j] * w[j] for j in range(nw)) for i in range(nt)]
    t = list(theta)
    mom, vel = [0.0] * nt, [0.0] * nt
    for k in range(1, steps + 1):
        g = [t[i] - mw[i] for i in range(nt)]
        if not adam:
            t = [t[i] - inner_lr * g[i] for i in range(nt)]
            continue
        mom = [0.9 * mom[i] + 0.1 * g[i] for i in range(nt)]
        vel = [0.999 * vel[i] + 0.001 * g[i] * g[i] for i in range(nt)]
        t = [t[i] - inner_lr * (mom[i] / (1 - 0.9 ** k)) /
             (math.sqrt(vel[i] / (1 - 0.999 ** k)) + 1e-8) for i in range(nt)]
    r0 = [theta[i] - mw[i] for i in range(nt)]
    r1 = [t[i] - mw[i] for i in range(nt)]
    gq_t = r0
    gq_w = [-sum(m[i][j] * (r0[i] - r1[i]) for i in range(nt)) for j in range(nw)]
    gl = [theta[i] - c[i] for i in range(nt)]
    sq = sum(v * v for v in gq_t) + sum(v * v for v in gq_w)
    dot = sum(gl[i] * gq_t[i] for i in range(nt))
    lam = max((rho * sq - dot) / sq, 0.0)
    new_t = [theta[i] - lr_t * (gl[i] + lam * gq_t[i]) for i in range(nt)]
    new_w = [w[j] - lr_w * lam * gq_w[j] for j in range(nw)]
    return new_w, new_t, lam


@pytest.mark.parametrize("adam", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_one_step_matches_hand_assembled_update(seed, adam):
    rng = np.random.default_rng(seed)
    m, c = rng.standard_normal((3, 2)), rng.standard_normal(3)
    w0, t0 = rng.standard_normal(2), rng.standard_normal(3)
    cfg = BomeConfig(inner_steps=10, inner_lr=0.05, lr_theta=0.01, lr_w=0.1, rho=1.5,
                     inner_optimizer="adam" if adam else "gd")
    w1, t1, tr = bome_step(QuadraticGame(m, c), pv(*w0), pv(*t0), cfg)
    hw, ht, hlam = _hand_step(m.tolist(), c.tolist(), w0.tolist(), t0.tolist(), 0.05, 0.01,
                              0.1, 1.5, 10, adam)
    assert abs(tr.lam - hlam) <= 1e-12
    assert np.abs(w1.flatten() - hw).max() <= 1e-12
    assert np.abs(t1.flatten() - ht).max() <= 1e-12


def test_analytic_bilevel_converges():
    w, theta, traces = solve_analytic()
    assert abs(theta.flatten()[0] - 1) + abs(w.flatten()[0] - 1) < 1e-3
    assert len(traces) <= 5000


def test_analytic_qhat_nonnegative_with_gd_inner():
    _, _, traces = solve_analytic()
    assert min(t.qhat for t in traces) >= -1e-9


def test_grad_clip_caps_attacker_gradient():
    game = QuadraticGame(np.eye(2), np.array([300.0, -400.0]))
    cfg = BomeConfig(inner_steps=2, inner_lr=0.1, inner_optimizer="gd", grad_clip=10.0)
    _, _, tr = bome_step(game, pv(0.0, 0.0), pv(1.0, 1.0), cfg)
    assert tr.grad_ja_norm_raw > 10.0
    assert tr.grad_ja_norm == pytest.approx(10.0, rel=1e-12)


def test_bome_config_contracts():
    for bad in (dict(inner_steps=0), dict(rho=0.0), dict(lr_w=0.0), dict(inner_optimizer="sgd")):
        with pytest.raises(ValueError):
            BomeConfig(**bad)


# ----------------------------------------------------------- train_generator

def _small(**kw):
    ds = make_synthetic(n_samples=300, n_features=6, seed=3).subset("train")
    game = GameConfig(budget=0.5, epochs=2, batch_size=64, lr_w=1.0, **kw)
    return game, ds


def test_zero_epochs_returns_initial_generator():
    game, ds = _small()
    game = game.replace(epochs=0)
    gen, _, report = train_generator(game, ds.features, ds.labels, 3)
    _, init_gen = init_players(game, ds.n_features, 3)
    assert gen.params == init_gen.params and report.steps == []


def test_train_generator_is_deterministic():
    game, ds = _small()
    a = train_generator(game, ds.features, ds.labels, 3)
    b = train_generator(game, ds.features, ds.labels, 3)
    assert a[0].params.flatten().tobytes() == b[0].params.flatten().tobytes()
    assert a[2].to_csv() == b[2].to_csv() and a[2].to_json() == b[2].to_json()
    assert len(a[2].steps) == 2 * math.ceil(len(ds) / 64)


def test_trace_is_finite_and_complete():
    game, ds = _small(loss_c="trades", eps_d=0.1)
    _, _, report = train_generator(game, ds.features, ds.labels, 3)
    for col in ("jc", "jc_inner", "ja", "qhat", "lam", "grad_ja_norm", "grad_q_norm"):
        assert np.isfinite(report.column(col)).all()
    assert (report.column("lam") >= 0).all()
    header = report.to_csv().splitlines()[0].split(",")
    assert header[:3] == ["step", "epoch", "jc"]


def test_divergence_keeps_trace_prefix():
    game, ds = _small(lr_theta=1e30, loss_a="ce")
    game = game.replace(epochs=3)
    with pytest.raises(SolverError) as err:
        train_generator(game, ds.features, ds.labels, 3)
    report = err.value.report
    assert isinstance(report, RunReport) and report.status == "diverged"
    assert len(report.steps) == err.value.step > 0


def test_disjoint_clean_batch_flag_changes_attacker_batch():
    game, ds = _small()
    a = train_generator(game, ds.features, ds.labels, 3)[2]
    b = train_generator(game.replace(disjoint_clean_batch=True), ds.features, ds.labels, 3)[2]
    assert a.steps[0].jc == b.steps[0].jc and a.steps[0].ja != b.steps[0].ja


def test_needs_two_classes():
    game, ds = _small()
    with pytest.raises(ValueError):
        train_generator(game, ds.features, np.zeros(len(ds), dtype=int))
