"""Victim training, poison evaluation and the experiment protocols."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .bome import RunReport, SolverError, train_generator
from .config import ExperimentSpec, GameConfig, VictimRecipe
from .data import LabeledDataset, make_synthetic
from .losses import (LossKind, LossSpec, PGDConfig, acc_loss, accuracy_count,
                     sample_losses)
from .models import MlpClassifier, ParamVector, PerturbationGenerator, poison_features


class MetricMismatch(AssertionError):
    pass


def accuracy(model: MlpClassifier, x, y) -> float:
    """Clean accuracy, cross-checked against the independent counter."""
    logits = model.predict_logits(x)
    from_loss = -float(np.mean(acc_loss(logits, y).data))
    correct, total = accuracy_count(logits, y)
    if correct != int(round(-np.sum(acc_loss(logits, y).data))) or not np.isclose(
            from_loss, correct / total, rtol=0, atol=1e-12):
        raise MetricMismatch(f"accuracy disagreement: {from_loss} vs {correct}/{total}")
    return correct / total


def victim_loss_spec(loss: str, eps_d: float = 0.0, trades_lambda: float = 1.0,
                     pgd_steps: int = 10, seed: int = 0) -> LossSpec:
    kind = LossKind(loss)
    start = 1e-3 if kind is LossKind.TRADES else 0.0
    return LossSpec(kind, PGDConfig(eps_d, pgd_steps, None, start, seed), trades_lambda)


def _lr_at(recipe: VictimRecipe, lr0: float, epoch: int) -> float:
    lr = lr0
    for frac in recipe.milestones:
        if epoch >= int(round(frac * recipe.epochs)):
            lr *= 0.1
    return lr


def train_victim(train: LabeledDataset, test: LabeledDataset | None, recipe: VictimRecipe,
                 loss: LossSpec, seed: int, lr: float | None = None):
    """Train a fresh classifier with SGD + momentum + weight decay.

    Returns ``(model, curve)`` where ``curve[e]`` is the clean test accuracy
    after epoch ``e`` (empty when ``test`` is None).
    """
    if recipe.epochs < 1:
        raise ValueError("victim recipe needs at least one epoch")
    ss = np.random.SeedSequence([seed, 7])
    init_seed, order_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    model = MlpClassifier.init([train.n_features, *recipe.hidden, train.n_classes],
                               init_seed, recipe.activation)
    rng = np.random.default_rng(order_seed)
    params = model.params.copy()
    buf = params.zeros_like()
    lr0 = recipe.lr if lr is None else lr
    x, y = train.features, train.labels
    curve = []
    step = 0
    for epoch in range(recipe.epochs):
        eta = _lr_at(recipe, lr0, epoch)
        order = rng.permutation(len(x))
        for start in range(0, len(x), recipe.batch_size):
            idx = order[start:start + recipe.batch_size]
            spec = loss
            if loss.pgd.random_start > 0:
                spec = LossSpec(loss.kind, PGDConfig(loss.pgd.eps_d, loss.pgd.steps,
                                                     loss.pgd.step_size, loss.pgd.random_start,
                                                     seed * 100_003 + step), loss.trades_lambda)
            leaves = params.leaves()
            try:
                out = ad.mean(sample_losses(spec, model, x[idx], y[idx], leaves))
            except ad.NumericError as exc:
                raise SolverError(f"victim diverged in epoch {epoch}: {exc}", step) from exc
            g = ParamVector(ad.grad(out, leaves))
            g = g + params * recipe.weight_decay
            buf = buf * recipe.momentum + g
            params = params - buf * eta
            step += 1
        model = model.with_params(params)
        if test is not None:
            curve.append(accuracy(model, test.features, test.labels))
    return model, curve


# ------------------------------------------------------------- evaluation

class BaselineError(RuntimeError):
    """Clean-trained accuracy fell below the calibrated floor."""


@dataclass
class EvalReport:
    clean_accuracy: float
    clean_sd: float
    poisoned_accuracy: float
    poisoned_sd: float
    clean_per_seed: list
    poisoned_per_seed: list
    curve: list
    clean_curve: list
    max_perturbation: float
    seeds: list
    params: dict = field(default_factory=dict)

    @property
    def degradation(self) -> float:
        return self.clean_accuracy - self.poisoned_accuracy

    def to_dict(self) -> dict:
        return asdict(self)


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def poison_dataset(gen: PerturbationGenerator, ds: LabeledDataset, clip_range=None):
    """Poison every row of ``ds``; returns ``(poisoned, max_abs_perturbation)``.

    The perturbation is audited against the budget before any clipping.
    """
    x = poison_features(gen, ds.features)
    max_pert = float(np.abs(x - ds.features).max()) if x.size else 0.0
    if max_pert > gen.budget:
        raise AssertionError(f"perturbation {max_pert} exceeds budget {gen.budget}")
    if clip_range is not None:
        x = np.clip(x, clip_range[0], clip_range[1])
    return ds.with_features(x), max_pert


def evaluate_poison(gen: PerturbationGenerator | None, data: LabeledDataset,
                    recipe: VictimRecipe, loss: LossSpec, seeds, clip_range=None,
                    lr: float | None = None, clean_curves: dict | None = None) -> EvalReport:
    """Retrain fresh victims on clean and on poisoned training data and report
    clean-test accuracy for both (mean and sample sd over ``seeds``)."""
    train, test = data.subset("train"), data.subset("test")
    if gen is None:
        poisoned, max_pert = train, 0.0
    else:
        poisoned, max_pert = poison_dataset(gen, train, clip_range)
    clean_c, pois_c = [], []
    for s in seeds:
        if clean_curves is not None and s in clean_curves:
            cc = clean_curves[s]
        else:
            cc = train_victim(train, test, recipe, loss, s, lr)[1]
        clean_c.append(cc)
        pois_c.append(train_victim(poisoned, test, recipe, loss, s, lr)[1])
    cm, csd = _mean_sd([c[-1] for c in clean_c])
    pm, psd = _mean_sd([c[-1] for c in pois_c])
    return EvalReport(cm, csd, pm, psd, [c[-1] for c in clean_c], [c[-1] for c in pois_c],
                      np.mean(pois_c, axis=0).tolist(), np.mean(clean_c, axis=0).tolist(),
                      max_pert, list(seeds), {"loss": loss.kind.value, "eps_d": loss.pgd.eps_d})


# ------------------------------------------------------------ cell runner

def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("STACKELGRAD_JOBS", "1")))
    except ValueError:
        return 1


def run_cells(fn, cells: list, jobs: int = 1) -> list:
    """Evaluate ``fn`` on every cell; results keep the cell order."""
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
        return list(pool.map(fn, cells))


def build_dataset(spec: ExperimentSpec) -> LabeledDataset:
    d = spec.data
    return make_synthetic(d.kind, d.n_classes, d.n_features, d.n_samples, d.separation,
                          d.seed, d.test_fraction, d.holdout_fraction)


def _victim_spec(spec: ExperimentSpec, eps_d: float | None = None) -> LossSpec:
    g = spec.game
    kind = spec.victim_loss
    radius = g.eps_d if eps_d is None else eps_d
    if radius == 0:
        kind = "ce"
    return victim_loss_spec(kind, radius, g.trades_lambda, g.pgd_steps)


def _victim_lr(spec: ExperimentSpec, eps_d: float) -> float:
    if eps_d > 0 and spec.adv_victim_lr is not None:
        return spec.adv_victim_lr
    return spec.victim.lr


def _gate(value: float, floor: float, what: str) -> None:
    if value < floor:
        raise BaselineError(f"{what}: clean accuracy {value:.4f} below floor {floor:.4f}")


def _fit_gen(game: GameConfig, ds: LabeledDataset):
    gen, _, report = train_generator(game, ds.features, ds.labels, ds.n_classes)
    return gen, report


# ------------------------------------------------------------ experiments

def _poisoning_cell(args):
    spec, seed = args
    data = build_dataset(spec)
    game = spec.game.replace(seed=seed)
    gen, report = _fit_gen(game, data.subset("train"))
    ev = evaluate_poison(gen, data, spec.victim, _victim_spec(spec, 0.0), [seed],
                         game.clip_range)
    return ev, report


def poisoning_experiment(spec: ExperimentSpec, jobs: int = 1):
    """Train one generator per replicate seed and evaluate it on a fresh victim.

    Returns ``(EvalReport, {seed: RunReport})``.
    """
    results = run_cells(_poisoning_cell, [(spec, s) for s in spec.seeds], jobs)
    evs = [r[0] for r in results]
    clean = [e.clean_per_seed[0] for e in evs]
    pois = [e.poisoned_per_seed[0] for e in evs]
    cm, csd = _mean_sd(clean)
    _gate(cm, spec.clean_floor, "poisoning experiment")
    pm, psd = _mean_sd(pois)
    report = EvalReport(cm, csd, pm, psd, clean, pois,
                        np.mean([e.curve for e in evs], axis=0).tolist(),
                        np.mean([e.clean_curve for e in evs], axis=0).tolist(),
                        max(e.max_perturbation for e in evs), list(spec.seeds),
                        {"scenario": spec.scenario, "budget": spec.game.budget,
                         "loss_c": spec.game.loss_c, "loss_a": spec.game.loss_a})
    return report, {s: r[1] for s, r in zip(spec.seeds, results)}


def _fraction_subset(train: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    if fraction >= 1.0:
        return train
    rng = np.random.default_rng(np.random.SeedSequence([seed, int(round(fraction * 1e6))]))
    idx = []
    for c in range(train.n_classes):
        members = rng.permutation(np.flatnonzero(train.labels == c))
        idx.extend(members[:max(1, int(round(fraction * len(members))))])
    return train.take(np.sort(np.asarray(idx)))


def _ratio_cell(args):
    spec, fraction, seed = args
    data = build_dataset(spec)
    train, test = data.subset("train"), data.subset("test")
    gen, _ = _fit_gen(spec.game.replace(seed=seed), _fraction_subset(train, fraction, seed))
    poisoned, max_pert = poison_dataset(gen, train, spec.game.clip_range)
    _, curve = train_victim(poisoned, test, spec.victim, _victim_spec(spec, 0.0), seed)
    return curve[-1], max_pert


def _clean_cell(args):
    spec, seed, eps_d = args
    data = build_dataset(spec)
    loss = _victim_spec(spec, eps_d)
    _, curve = train_victim(data.subset("train"), data.subset("test"), spec.victim, loss, seed,
                            _victim_lr(spec, eps_d))
    return curve[-1]


def ratio_generalization_experiment(spec: ExperimentSpec, jobs: int = 1):
    """Generator trained on a fraction of the training split, used to poison
    the whole split. Returns a list of table rows, one per fraction."""
    clean = run_cells(_clean_cell, [(spec, s, 0.0) for s in spec.seeds], jobs)
    cm, csd = _mean_sd(clean)
    _gate(cm, spec.clean_floor, "ratio experiment")
    cells = [(spec, f, s) for f in spec.fractions for s in spec.seeds]
    out = run_cells(_ratio_cell, cells, jobs)
    rows = []
    n = len(spec.seeds)
    for i, f in enumerate(spec.fractions):
        chunk = out[i * n:(i + 1) * n]
        pm, psd = _mean_sd([c[0] for c in chunk])
        rows.append({"fraction": f, "clean_accuracy": cm, "clean_sd": csd,
                     "poisoned_accuracy": pm, "poisoned_sd": psd,
                     "degradation": cm - pm, "max_perturbation": max(c[1] for c in chunk)})
    return rows


def _adv_cell(args):
    spec, poison, seed = args
    data = build_dataset(spec)
    if poison == "gue":
        game = spec.game.replace(seed=seed, loss_c="ce", eps_d=0.0)
    else:
        game = spec.game.replace(seed=seed, loss_c="trades")
    gen, _ = _fit_gen(game, data.subset("train"))
    return gen


def _adv_eval_cell(args):
    spec, gen, seed, eps_d = args
    data = build_dataset(spec)
    train, test = data.subset("train"), data.subset("test")
    poisoned, max_pert = poison_dataset(gen, train, spec.game.clip_range)
    _, curve = train_victim(poisoned, test, spec.victim, _victim_spec(spec, eps_d), seed,
                            _victim_lr(spec, eps_d))
    return curve[-1], max_pert


def adversarial_game_experiment(spec: ExperimentSpec, jobs: int = 1):
    """GUE-AT (TRADES victim inside the game at ``game.eps_d``) and standard
    GUE, each evaluated against victims adversarially trained at every radius
    of ``eps_d_grid``. Returns one row per radius."""
    if 0.0 not in spec.eps_d_grid:
        raise ValueError("eps_d_grid must include 0 (standard training)")
    seeds = list(spec.seeds)
    gens = run_cells(_adv_cell, [(spec, p, s) for p in ("gue", "gue_at") for s in seeds], jobs)
    gue, gue_at = gens[:len(seeds)], gens[len(seeds):]
    clean = run_cells(_clean_cell, [(spec, s, e) for e in spec.eps_d_grid for s in seeds], jobs)
    evals = run_cells(_adv_eval_cell,
                      [(spec, g[i], s, e) for e in spec.eps_d_grid for g in (gue, gue_at)
                       for i, s in enumerate(seeds)], jobs)
    rows, n = [], len(seeds)
    for j, e in enumerate(spec.eps_d_grid):
        cm, csd = _mean_sd(clean[j * n:(j + 1) * n])
        if e == 0:
            _gate(cm, spec.clean_floor, "adversarial experiment")
        block = evals[j * 2 * n:(j + 1) * 2 * n]
        gm, gsd = _mean_sd([b[0] for b in block[:n]])
        am, asd = _mean_sd([b[0] for b in block[n:]])
        rows.append({"eps_d": e, "clean_accuracy": cm, "clean_sd": csd,
                     "gue_accuracy": gm, "gue_sd": gsd, "gue_at_accuracy": am, "gue_at_sd": asd,
                     "max_perturbation": max(b[1] for b in block)})
    return rows


def _ablation_cell(args):
    game, x, y, k = args
    try:
        return train_generator(game, x, y, k)[2]
    except SolverError as exc:
        return exc.report


def ablation_diagnostic(data: LabeledDataset, game: GameConfig, clip: float = 10.0,
                        jobs: int = 1) -> dict:
    """Same seed and config, three attacker variants: CE, CE with the attacker
    gradient clipped to ``clip``, and the surrogate loss."""
    train = data.subset("train")
    variants = {"ce": game.replace(loss_a="ce", grad_clip=None),
                "ce_clip": game.replace(loss_a="ce", grad_clip=clip),
                "sur": game.replace(loss_a="sur", grad_clip=None)}
    reports = run_cells(_ablation_cell, [(g, train.features, train.labels, train.n_classes)
                                         for g in variants.values()], jobs)
    return dict(zip(variants, reports))


def quartile_variances(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    q = max(1, len(v) // 4)
    return float(np.var(v[:q])), float(np.var(v[-q:]))


# ------------------------------------------------------------------- io

def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def curve_rows(report: EvalReport) -> list[dict]:
    return [{"epoch": i + 1, "clean_accuracy": c, "poisoned_accuracy": p}
            for i, (c, p) in enumerate(zip(report.clean_curve, report.curve))]
