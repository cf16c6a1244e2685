"""scikit-learn style estimators over the decoupled linear-expert mixture.

``fit`` runs the exact three-block alternation (Lam, Phi, Theta) until F stops
decreasing; ``predict`` gates the linear experts with the learned softmax router.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .convex import DecoupledInstance, alpha_bound, decoupled_objective, sweep


class _DecoupledMixture(BaseEstimator):
    _loss = "quadratic"

    def __init__(self, n_experts: int = 2, mu_pen: float = 1.0, alpha=None, max_sweeps: int = 1000, tol: float = 1e-12,
                 init_scale: float = 0.1, random_state=None):
        self.n_experts = n_experts
        self.mu_pen = mu_pen
        self.alpha = alpha
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.init_scale = init_scale
        self.random_state = random_state

    def _validate_params(self):
        if int(self.n_experts) < 1:
            raise ValueError("n_experts must be >= 1")
        if self.mu_pen <= 0:
            raise ValueError("mu_pen must be > 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0 (or None for the strong-convexity bound)")

    def _fit(self, X, t):
        self._validate_params()
        inst = DecoupledInstance(X, t, int(self.n_experts), 0.0, float(self.mu_pen), self._loss)
        inst.alpha = alpha_bound(inst) if self.alpha is None else float(self.alpha)
        # a zero start is a symmetric fixed point: identical experts never separate
        rng = check_random_state(self.random_state)
        inst.Theta = self.init_scale * rng.standard_normal(inst.Theta.shape)
        inst.Phi = self.init_scale * rng.standard_normal(inst.Phi.shape)
        prev = decoupled_objective(inst)
        self.objective_path_ = [prev]
        for k in range(self.max_sweeps):
            cur = sweep(inst)[-1]
            self.objective_path_.append(cur)
            if prev - cur < self.tol:
                break
            prev = cur
        self.n_iter_ = k + 1
        self.alpha_ = inst.alpha
        self.theta_ = inst.Theta
        self.phi_ = inst.Phi
        self.n_features_in_ = X.shape[1]
        return self

    def gates(self, X) -> np.ndarray:
        """Router probabilities pi_Phi(x), one row per sample."""
        check_is_fitted(self, "phi_")
        X = check_array(X)
        return softmax(X @ self.phi_, axis=1)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "theta_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return np.sum(self.gates(X) * (X @ self.theta_), axis=1)


class DecoupledMoERegressor(RegressorMixin, _DecoupledMixture):
    """Softmax-gated linear experts trained with squared loss."""

    _loss = "quadratic"

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        return self._fit(X, y.astype(np.float64))

    def predict(self, X):
        return self.decision_function(X)


class DecoupledMoEClassifier(ClassifierMixin, _DecoupledMixture):
    """Binary classifier: gated linear experts under the logistic loss."""

    _loss = "logistic"

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError("DecoupledMoEClassifier supports exactly two classes")
        signs = np.where(y == self.classes_[1], 1.0, -1.0)
        return self._fit(X, signs)

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
