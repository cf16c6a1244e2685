import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score

from comigs.convex import DecoupledInstance, alpha_bound
from comigs.estimators import DecoupledMoEClassifier, DecoupledMoERegressor


def _regression(seed=0, n=60, d=3):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = np.where(X[:, 0] > 0, X @ [1.0, 2.0, 0.0], X @ [0.0, -1.0, 1.0])
    return X, y


def test_regressor_fit_predict_and_monotone_path():
    X, y = _regression()
    est = DecoupledMoERegressor(n_experts=2, alpha=1e-2, random_state=0).fit(X, y)
    assert est.predict(X).shape == (60,) and est.n_features_in_ == 3
    assert np.all(np.diff(est.objective_path_) <= 1e-12)
    linear = DecoupledMoERegressor(n_experts=1, alpha=1e-2, random_state=0).fit(X, y)
    assert est.score(X, y) > linear.score(X, y)  # gating helps on a piecewise target
    g = est.gates(X)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
    assert g.shape == (60, 2)


def test_small_alpha_fit_completes():
    # this start once drove the Lam-step root solve into a bracket ping-pong
    X, y = _regression()
    est = DecoupledMoERegressor(n_experts=2, alpha=1e-3, random_state=0).fit(X, y)
    assert np.all(np.diff(est.objective_path_) <= 1e-12)


def test_zero_init_is_symmetric_fixed_point():
    X, y = _regression()
    est = DecoupledMoERegressor(n_experts=2, alpha=1e-2, init_scale=0.0).fit(X, y)
    np.testing.assert_allclose(est.gates(X), 0.5, atol=1e-12)


def test_default_alpha_is_strong_convexity_bound():
    X, y = _regression(1)
    est = DecoupledMoERegressor(max_sweeps=5).fit(X, y)
    inst = DecoupledInstance(X, y, 2, 0.0, 1.0)
    assert est.alpha_ == pytest.approx(alpha_bound(inst))


def test_classifier_binary_labels():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((80, 2))
    y = np.where(X[:, 0] + 0.5 * X[:, 1] > 0, "pos", "neg")
    clf = DecoupledMoEClassifier(alpha=1e-2, random_state=0).fit(X, y)
    assert set(clf.predict(X)) <= {"neg", "pos"}
    assert clf.score(X, y) > 0.9
    P = clf.predict_proba(X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    with pytest.raises(ValueError, match="two classes"):
        DecoupledMoEClassifier().fit(X, np.arange(80) % 3)


def test_parameter_validation_and_unfitted():
    X, y = _regression()
    for bad in ({"n_experts": 0}, {"mu_pen": 0.0}, {"alpha": -1.0}):
        with pytest.raises(ValueError):
            DecoupledMoERegressor(**bad).fit(X, y)
    with pytest.raises(NotFittedError):
        DecoupledMoERegressor().predict(X)
    est = DecoupledMoERegressor(max_sweeps=3).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])


def test_sklearn_protocol():
    X, y = _regression(3)
    est = DecoupledMoERegressor(n_experts=3, alpha=0.1, max_sweeps=50, random_state=7)
    assert clone(est).get_params() == est.get_params()
    scores = cross_val_score(est, X, y, cv=3)
    assert scores.shape == (3,) and np.all(np.isfinite(scores))
    a = clone(est).fit(X, y).predict(X)
    b = clone(est).fit(X, y).predict(X)
    assert a.tobytes() == b.tobytes()
