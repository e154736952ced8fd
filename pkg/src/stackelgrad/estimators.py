"""scikit-learn compatible front ends.

``GUEPoisoner`` is a transformer: ``fit`` solves the poisoning game on
``(X, y)`` and ``transform`` adds the learned bounded perturbation.
``MLPVictim`` is a classifier trained the way the game's victim is evaluated.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bome import train_generator
from .config import GameConfig, VictimRecipe
from .data import LabeledDataset
from .lab import accuracy, train_victim, victim_loss_spec
from .losses import ce_loss
from .models import poison_features


def _encode(y):
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return classes, encoded.astype(np.int64)


class GUEPoisoner(TransformerMixin, BaseEstimator):
    """Bounded sample-wise poison generator trained by the bilevel game solver.

    Parameters mirror :class:`~stackelgrad.config.GameConfig`;
    ``random_state`` seeds initialisation and batch order.

    Attributes
    ----------
    generator_ : PerturbationGenerator
    classifier_ : MlpClassifier
        Follower iterate at the end of the solve.
    report_ : RunReport
    classes_ : ndarray
    n_features_in_ : int
    """

    def __init__(self, budget=8 / 255, eps_d=0.0, inner_steps=10, inner_lr=1e-3,
                 inner_optimizer="adam", lr_theta=0.01, lr_w=0.1, rho=1.5,
                 trades_lambda=1.0, loss_c="ce", loss_a="sur", epochs=10, batch_size=64,
                 classifier_hidden=(32,), generator_hidden=(32,), bottleneck=8,
                 activation="relu", clip_range=None, grad_clip=None, random_state=0):
        self.budget = budget
        self.eps_d = eps_d
        self.inner_steps = inner_steps
        self.inner_lr = inner_lr
        self.inner_optimizer = inner_optimizer
        self.lr_theta = lr_theta
        self.lr_w = lr_w
        self.rho = rho
        self.trades_lambda = trades_lambda
        self.loss_c = loss_c
        self.loss_a = loss_a
        self.epochs = epochs
        self.batch_size = batch_size
        self.classifier_hidden = classifier_hidden
        self.generator_hidden = generator_hidden
        self.bottleneck = bottleneck
        self.activation = activation
        self.clip_range = clip_range
        self.grad_clip = grad_clip
        self.random_state = random_state

    def game_config(self) -> GameConfig:
        return GameConfig(
            budget=self.budget, eps_d=self.eps_d, inner_steps=self.inner_steps,
            inner_lr=self.inner_lr, inner_optimizer=self.inner_optimizer,
            lr_theta=self.lr_theta, lr_w=self.lr_w, rho=self.rho,
            trades_lambda=self.trades_lambda, loss_c=self.loss_c, loss_a=self.loss_a,
            epochs=self.epochs, batch_size=self.batch_size, seed=int(self.random_state or 0),
            grad_clip=self.grad_clip, classifier_hidden=tuple(self.classifier_hidden),
            generator_hidden=tuple(self.generator_hidden), bottleneck=self.bottleneck,
            activation=self.activation, clip_range=self.clip_range)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, yi = _encode(y)
        self.n_features_in_ = X.shape[1]
        self.generator_, self.classifier_, self.report_ = train_generator(
            self.game_config(), X, yi, len(self.classes_))
        return self

    def perturbation(self, X) -> np.ndarray:
        check_is_fitted(self, "generator_")
        X = check_array(X, dtype=np.float64)
        self._check_width(X)
        return self.generator_.perturb(X)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "generator_")
        X = check_array(X, dtype=np.float64)
        self._check_width(X)
        return poison_features(self.generator_, X, self.clip_range)

    def _check_width(self, X):
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")


class MLPVictim(ClassifierMixin, BaseEstimator):
    """Feed-forward classifier trained with SGD (momentum, weight decay and
    a x0.1 step decay at 75% and 90% of the epochs).

    ``loss`` selects standard ("ce"), PGD adversarial ("adv") or "trades"
    training at radius ``eps_d``.
    """

    def __init__(self, hidden=(32,), epochs=40, lr=0.01, momentum=0.9, weight_decay=5e-4,
                 batch_size=64, activation="relu", loss="ce", eps_d=0.0, trades_lambda=1.0,
                 pgd_steps=10, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.activation = activation
        self.loss = loss
        self.eps_d = eps_d
        self.trades_lambda = trades_lambda
        self.pgd_steps = pgd_steps
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, yi = _encode(y)
        self.n_features_in_ = X.shape[1]
        k = len(self.classes_)
        recipe = VictimRecipe(self.epochs, self.lr, self.momentum, self.weight_decay,
                              self.batch_size, tuple(self.hidden), self.activation)
        val = None
        if X_val is not None:
            yv = np.searchsorted(self.classes_, y_val)
            val = LabeledDataset(check_array(X_val, dtype=np.float64), yv, k)
        spec = victim_loss_spec(self.loss, self.eps_d, self.trades_lambda, self.pgd_steps)
        self.model_, self.curve_ = train_victim(LabeledDataset(X, yi, k), val, recipe, spec,
                                                int(self.random_state or 0))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_logits(check_array(X, dtype=np.float64))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return self.classes_[z.argmax(axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        """Accuracy with ties counted as errors."""
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "model_")
        yi = np.searchsorted(self.classes_, y)
        return accuracy(self.model_, check_array(X, dtype=np.float64), yi)

    def log_loss(self, X, y) -> float:
        yi = np.searchsorted(self.classes_, y)
        return float(np.mean(ce_loss(self.decision_function(X), yi).data))
