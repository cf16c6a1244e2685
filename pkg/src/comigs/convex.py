"""Numerical certification of the alternating-minimization theory.

Two settings are covered:

* a quadratic bilevel objective ``f(th, ph) = th'A th/2 + ph'C th + ph'B ph/2``
  whose alternating partial argmins compose to the linear map
  ``T = A^-1 C' B^-1 C``;
* a linear-expert mixture with the router output decoupled into free simplex
  variables ``Lam`` tied back by a KL penalty of weight ``mu_pen``.  Each of the
  three block steps (Lam, Phi, Theta) is an exact argmin.

Shapes follow the column convention: ``Theta`` and ``Phi`` are ``d x (N+1)``,
``Lam`` is ``(N+1) x n`` with one simplex column per sample, ``X`` is ``n x d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, log_softmax, logsumexp, softmax

LOSSES = ("quadratic", "logistic")


class ConvergenceError(RuntimeError):
    """An inner solver did not reach its tolerance within the iteration cap."""

    def __init__(self, solver: str, residual: float, iterations: int):
        super().__init__(f"{solver}: residual {residual:.3e} after {iterations} iterations")
        self.solver = solver
        self.residual = residual
        self.iterations = iterations


# ------------------------------------------------------------------ quadratic


@dataclass
class QuadraticBilevel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray  # |Phi| x |Theta|

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        p, q = self.A.shape[0], self.B.shape[0]
        if self.A.shape != (p, p) or self.B.shape != (q, q) or self.C.shape != (q, p):
            raise ValueError(f"shape mismatch: A {self.A.shape}, B {self.B.shape}, C {self.C.shape}")
        if not (np.allclose(self.A, self.A.T) and np.allclose(self.B, self.B.T)):
            raise ValueError("A and B must be symmetric")
        ev = np.linalg.eigvalsh(self.H)
        if ev[0] <= 0:
            raise ValueError(f"block matrix H is not positive definite (smallest eigenvalue {ev[0]:.3e})")
        self.mu, self.L = float(ev[0]), float(ev[-1])

    @property
    def H(self) -> np.ndarray:
        return np.block([[self.A, self.C.T], [self.C, self.B]])

    @classmethod
    def random(cls, p: int, q: int, rng: np.random.Generator, coupling: float = 1.0) -> "QuadraticBilevel":
        """Random instance with H positive definite (a Gram matrix plus a small ridge)."""
        M = rng.standard_normal((p + q, p + q))
        H = M @ M.T + 1e-2 * np.eye(p + q)
        A, Ct, B = H[:p, :p], H[:p, p:] * coupling, H[p:, p:]
        return cls(A, B, Ct.T)

    def objective(self, theta, phi) -> float:
        theta, phi = np.asarray(theta, float), np.asarray(phi, float)
        return float(0.5 * theta @ self.A @ theta + phi @ self.C @ theta + 0.5 * phi @ self.B @ phi)

    def argmin_phi(self, theta) -> np.ndarray:
        return -linalg.cho_solve(linalg.cho_factor(self.B), self.C @ theta)

    def argmin_theta(self, phi) -> np.ndarray:
        return -linalg.cho_solve(linalg.cho_factor(self.A), self.C.T @ phi)


def _cho(M: np.ndarray, name: str):
    try:
        return linalg.cho_factor(M)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{name} is singular or not positive definite") from exc


def quad_operator_T(q: QuadraticBilevel) -> np.ndarray:
    """T = A^-1 C' B^-1 C, via Cholesky solves."""
    fa, fb = _cho(q.A, "A"), _cho(q.B, "B")
    return linalg.cho_solve(fa, q.C.T @ linalg.cho_solve(fb, q.C))


@dataclass
class Trajectory:
    thetas: list[np.ndarray]
    norms: np.ndarray

    def ratios(self) -> np.ndarray:
        prev, nxt = self.norms[:-1], self.norms[1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(prev > 0, nxt / np.where(prev > 0, prev, 1.0), 0.0)


def quad_alternate(q: QuadraticBilevel, theta0, k_max: int) -> Trajectory:
    """Alternate phi <- argmin_phi f, theta <- argmin_theta f for ``k_max`` rounds."""
    fa, fb = _cho(q.A, "A"), _cho(q.B, "B")
    theta = np.asarray(theta0, dtype=np.float64).copy()
    thetas = [theta.copy()]
    for _ in range(k_max):
        phi = -linalg.cho_solve(fb, q.C @ theta)
        theta = -linalg.cho_solve(fa, q.C.T @ phi)
        thetas.append(theta.copy())
    return Trajectory(thetas, np.array([np.linalg.norm(t) for t in thetas]))


@dataclass
class ContractionRate:
    euclidean: float  # ||T||_2, the per-step bound on ||theta|| ratios
    a_norm: float  # ||A^{1/2} T A^{-1/2}||_2, the rate in the A-weighted norm
    spectral_radius: float
    eig_bound: float  # (L - mu) / L from the extreme eigenvalues of H


def contraction_rate(q: QuadraticBilevel) -> ContractionRate:
    T = quad_operator_T(q)
    w, V = np.linalg.eigh(q.A)
    half = V @ np.diag(np.sqrt(w)) @ V.T
    ihalf = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
    return ContractionRate(
        euclidean=float(np.linalg.norm(T, 2)),
        a_norm=float(np.linalg.norm(half @ T @ ihalf, 2)),
        spectral_radius=float(np.max(np.abs(np.linalg.eigvals(T)))),
        eig_bound=(q.L - q.mu) / q.L,
    )


def power_norm(T: np.ndarray, iters: int = 500, rng: np.random.Generator | None = None) -> float:
    """Power-iteration estimate of ||T||_2 (largest singular value)."""
    rng = rng or np.random.default_rng(0)
    v = rng.standard_normal(T.shape[1])
    s = 0.0
    for _ in range(iters):
        w = T.T @ (T @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        s = np.sqrt(nw)
    return float(s)


# ------------------------------------------------------------------ decoupled linear experts


@dataclass
class DecoupledInstance:
    X: np.ndarray  # n x d
    targets: np.ndarray  # b_i (quadratic) or y_i in {-1, +1} (logistic)
    n_experts: int  # N + 1
    alpha: float
    mu_pen: float
    loss: str = "quadratic"
    Theta: np.ndarray | None = None
    Phi: np.ndarray | None = None
    Lam: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64)
        n, d = self.X.shape
        K = int(self.n_experts)
        if K < 1:
            raise ValueError("need at least one expert")
        if self.targets.shape != (n,):
            raise ValueError("one target per sample")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.loss == "logistic" and not np.all(np.isin(self.targets, (-1.0, 1.0))):
            raise ValueError("logistic labels must be -1 or +1")
        if self.alpha < 0 or self.mu_pen < 0:
            raise ValueError("alpha and mu_pen must be >= 0")
        self.Theta = np.zeros((d, K)) if self.Theta is None else np.array(self.Theta, dtype=np.float64)
        self.Phi = np.zeros((d, K)) if self.Phi is None else np.array(self.Phi, dtype=np.float64)
        self.Lam = np.full((K, n), 1.0 / K) if self.Lam is None else np.array(self.Lam, dtype=np.float64)
        if self.Theta.shape != (d, K) or self.Phi.shape != (d, K) or self.Lam.shape != (K, n):
            raise ValueError("Theta/Phi must be d x (N+1) and Lam (N+1) x n")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def x_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.X, axis=1)))

    def copy(self) -> "DecoupledInstance":
        return replace(self, Theta=self.Theta.copy(), Phi=self.Phi.copy(), Lam=self.Lam.copy())

    @classmethod
    def random(cls, n: int, d: int, n_experts: int, rng: np.random.Generator, loss: str = "quadratic",
               alpha: float | None = None, mu_pen: float = 1.0) -> "DecoupledInstance":
        X = rng.standard_normal((n, d)) / np.sqrt(d)
        if loss == "quadratic":
            t = rng.standard_normal(n)
        else:
            t = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        inst = cls(X, t, n_experts, 0.0, mu_pen, loss)
        inst.alpha = alpha_bound(inst) if alpha is None else alpha
        return inst


def _loss(kind: str, t: np.ndarray, b: np.ndarray) -> np.ndarray:
    if kind == "quadratic":
        return 0.5 * (t - b) ** 2
    return np.logaddexp(0.0, -b * t)


def _dloss(kind: str, t, b):
    if kind == "quadratic":
        return t - b
    return -b * expit(-b * t)


def _d2loss(kind: str, t, b):
    if kind == "quadratic":
        return np.ones_like(np.asarray(t, dtype=np.float64))
    s = expit(b * t)
    return s * (1.0 - s)


def _xlogx(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def check_simplex(Lam: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(Lam < -tol) or np.max(np.abs(Lam.sum(axis=0) - 1.0)) > tol:
        raise ValueError("every column of Lam must lie on the probability simplex")


def decoupled_objective(inst: DecoupledInstance, Theta=None, Phi=None, Lam=None) -> float:
    """F_mu(Theta, Phi, Lam); arguments default to the instance's current variables."""
    Theta = inst.Theta if Theta is None else Theta
    Phi = inst.Phi if Phi is None else Phi
    Lam = inst.Lam if Lam is None else Lam
    check_simplex(Lam)
    V = inst.X @ Theta  # n x K, row i = Theta' x_i
    W = inst.X @ Phi
    t = np.sum(V * Lam.T, axis=1)
    kl = _xlogx(Lam.T).sum(axis=1) + logsumexp(W, axis=1) - np.sum(Lam.T * W, axis=1)
    fit = _loss(inst.loss, t, inst.targets) + inst.mu_pen * kl
    reg = 0.5 * inst.alpha * (np.sum(Theta**2) + np.sum(Phi**2))
    return float(np.mean(fit) + reg)


def kl_block(inst: DecoupledInstance, Phi=None, Lam=None) -> np.ndarray:
    """Per-sample KL(lambda^i || pi_Phi(x_i)) computed from the log-softmax directly."""
    Phi = inst.Phi if Phi is None else Phi
    Lam = inst.Lam if Lam is None else Lam
    logp = log_softmax(inst.X @ Phi, axis=1)
    return _xlogx(Lam.T).sum(axis=1) - np.sum(Lam.T * logp, axis=1)


def router_probs(inst: DecoupledInstance, Phi=None) -> np.ndarray:
    """pi_Phi(x_i) for every sample, as a (N+1) x n column-stochastic matrix."""
    Phi = inst.Phi if Phi is None else Phi
    return softmax(inst.X @ Phi, axis=1).T


def lin_model_objective(inst: DecoupledInstance, Theta=None, Phi=None) -> float:
    """Un-decoupled objective: mean loss of the softmax-gated linear experts plus ridge terms."""
    Theta = inst.Theta if Theta is None else Theta
    Phi = inst.Phi if Phi is None else Phi
    total = 0.0
    for i in range(inst.n):
        x = inst.X[i]
        logits = Phi.T @ x
        p = np.exp(logits - logits.max())
        p /= p.sum()
        total += float(_loss(inst.loss, np.dot(p, Theta.T @ x), inst.targets[i]))
    return total / inst.n + 0.5 * inst.alpha * (float(np.sum(Theta**2)) + float(np.sum(Phi**2)))


# ------------------------------------------------------------------ block steps


def _lambda_of_g(g, V, W, mu):
    return softmax(W - g[:, None] * V / mu, axis=1)


def lambda_residual(inst: DecoupledInstance, Lam=None) -> float:
    """Largest spread over the support of the simplex-gradient entries; zero exactly at the Lam-argmin."""
    Lam = inst.Lam if Lam is None else Lam
    V, W = inst.X @ inst.Theta, inst.X @ inst.Phi
    L = Lam.T
    t = np.sum(V * L, axis=1)
    with np.errstate(divide="ignore"):
        G = _dloss(inst.loss, t, inst.targets)[:, None] * V + inst.mu_pen * (np.log(L) + 1.0 - W)
    G = np.where(L > 1e-300, G, np.nan)
    return float(np.nanmax(np.nanmax(G, axis=1) - np.nanmin(G, axis=1)))


def step_lambda(inst: DecoupledInstance, method: str = "root", tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Exact per-sample argmin over the simplex of l(<lam, Theta'x>) + mu (d(lam) - <lam, Phi'x>).

    The KKT conditions give ``lam = softmax(Phi'x - g Theta'x / mu)`` with the scalar
    ``g = l'(<lam, Theta'x>)``; ``method="root"`` solves that monotone scalar equation
    for all samples at once by bracketed Newton. ``method="eg"`` runs exponentiated
    gradient (entropic mirror descent) on the simplex instead.
    """
    if inst.n_experts == 1:
        inst.Lam = np.ones((1, inst.n))
        return inst.Lam
    if inst.mu_pen <= 0:
        raise ValueError("the Lam-step needs mu_pen > 0")
    if method == "eg":
        inst.Lam = _step_lambda_eg(inst, tol=tol)
        return inst.Lam
    if method != "root":
        raise ValueError("method must be 'root' or 'eg'")
    V, W, mu, b = inst.X @ inst.Theta, inst.X @ inst.Phi, inst.mu_pen, inst.targets
    lo = _dloss(inst.loss, V.min(axis=1), b)
    hi = _dloss(inst.loss, V.max(axis=1), b)
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    g = 0.5 * (lo + hi)
    scale = np.maximum(1.0, np.abs(hi - lo))
    width = hi - lo
    for it in range(max_iter):
        lam = _lambda_of_g(g, V, W, mu)
        t = np.sum(lam * V, axis=1)
        h = g - _dloss(inst.loss, t, b)  # increasing in g
        if np.all(np.abs(h) <= 1e-14 * scale):
            break
        lo = np.where(h < 0, g, lo)
        hi = np.where(h > 0, g, hi)
        var = np.sum(lam * V**2, axis=1) - t**2
        dh = 1.0 + _d2loss(inst.loss, t, b) * np.maximum(var, 0.0) / mu
        newton = g - h / dh
        # Newton may bounce between the bracket ends; bisect whenever the bracket failed to halve
        halved = hi - lo <= 0.5 * width
        width = hi - lo
        inside = (newton > lo) & (newton < hi) & halved
        g = np.where(inside, newton, 0.5 * (lo + hi))
        if np.all(hi - lo <= 1e-15 * scale):
            break
    else:
        raise ConvergenceError("step_lambda", float(np.max(np.abs(h))), max_iter)
    lam = _lambda_of_g(g, V, W, mu)
    res = np.abs(g - _dloss(inst.loss, np.sum(lam * V, axis=1), b))
    if np.max(res) > tol * np.max(scale):
        raise ConvergenceError("step_lambda", float(np.max(res)), max_iter)
    inst.Lam = lam.T.copy()
    return inst.Lam


def _step_lambda_eg(inst: DecoupledInstance, tol: float = 1e-10, max_iter: int = 200_000) -> np.ndarray:
    V, W, mu, b = inst.X @ inst.Theta, inst.X @ inst.Phi, inst.mu_pen, inst.targets
    curv = 1.0 if inst.loss == "quadratic" else 0.25
    # smoothness of the per-sample objective relative to the entropy
    eta = 1.0 / (mu + curv * np.max(np.abs(V)) ** 2 * 2.0 + 1e-300)
    logL = np.log(np.full_like(V, 1.0 / V.shape[1]))
    for it in range(max_iter):
        L = np.exp(logL)
        t = np.sum(L * V, axis=1)
        G = _dloss(inst.loss, t, b)[:, None] * V + mu * (logL + 1.0 - W)
        new = log_softmax(logL - eta * G, axis=1)
        step = np.max(np.abs(np.exp(new) - L).sum(axis=1)) / eta
        logL = new
        if step <= tol:
            return np.exp(logL).T.copy()
    raise ConvergenceError("step_lambda[eg]", float(step), max_iter)


def step_phi(inst: DecoupledInstance, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Gradient descent with step 1/L on (mu/n) sum(s(Phi'x) - <lam, Phi'x>) + alpha/2 ||Phi||^2."""
    if inst.alpha <= 0:
        raise ValueError("the Phi-step needs alpha > 0")
    X, Lt, mu, n = inst.X, inst.Lam.T, inst.mu_pen, inst.n
    # the log-sum-exp Hessian is bounded by I/2
    L = inst.alpha + 0.5 * mu / n * np.linalg.eigvalsh(X.T @ X)[-1]
    Phi = inst.Phi.copy()
    for it in range(max_iter):
        grad = mu / n * X.T @ (softmax(X @ Phi, axis=1) - Lt) + inst.alpha * Phi
        gn = np.linalg.norm(grad)
        if gn <= tol:
            inst.Phi = Phi
            return Phi
        Phi -= grad / L
    raise ConvergenceError("step_phi", float(gn), max_iter)


def theta_design(inst: DecoupledInstance, Lam=None) -> np.ndarray:
    """Rows z_i = kron(x_i, lambda^i) so that <lam^i, Theta'x_i> = z_i . vec(Theta) (row-major)."""
    Lam = inst.Lam if Lam is None else Lam
    return np.einsum("ia,ki->iak", inst.X, Lam).reshape(inst.n, -1)


def step_theta(inst: DecoupledInstance, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Exact Theta-argmin: ridge normal equations (quadratic loss) or damped Newton (logistic)."""
    if inst.alpha <= 0:
        raise ValueError("the Theta-step needs alpha > 0")
    Z, n, a, b = theta_design(inst), inst.n, inst.alpha, inst.targets
    shape = inst.Theta.shape
    if inst.loss == "quadratic":
        M = Z.T @ Z / n + a * np.eye(Z.shape[1])
        inst.Theta = linalg.cho_solve(linalg.cho_factor(M), Z.T @ b / n).reshape(shape)
        return inst.Theta

    def f(th):
        return float(np.mean(_loss("logistic", Z @ th, b)) + 0.5 * a * th @ th)

    th = inst.Theta.reshape(-1).copy()
    for it in range(max_iter):
        t = Z @ th
        grad = Z.T @ _dloss("logistic", t, b) / n + a * th
        gn = np.linalg.norm(grad)
        if gn <= tol:
            inst.Theta = th.reshape(shape)
            return inst.Theta
        Hm = (Z * _d2loss("logistic", t, b)[:, None]).T @ Z / n + a * np.eye(th.size)
        step = linalg.cho_solve(linalg.cho_factor(Hm), grad)
        f0, s = f(th), 1.0
        while f(th - s * step) > f0 - 0.25 * s * grad @ step and s > 1e-12:
            s *= 0.5
        th = th - s * step
    raise ConvergenceError("step_theta", float(gn), max_iter)


def sweep(inst: DecoupledInstance, lambda_method: str = "root") -> list[float]:
    """One Lam, Phi, Theta round; returns F after each block step."""
    out = []
    step_lambda(inst, method=lambda_method)
    out.append(decoupled_objective(inst))
    step_phi(inst)
    out.append(decoupled_objective(inst))
    step_theta(inst)
    out.append(decoupled_objective(inst))
    return out


def run_alternation(inst: DecoupledInstance, sweeps: int, lambda_method: str = "root"):
    """F at the start and after every block step, plus the per-sweep values and iterates."""
    F0 = decoupled_objective(inst)
    steps, per_sweep, points = [F0], [F0], [_point(inst)]
    for _ in range(sweeps):
        vals = sweep(inst, lambda_method)
        steps.extend(vals)
        per_sweep.append(vals[-1])
        points.append(_point(inst))
    return np.array(steps), np.array(per_sweep), points


def run_to_stagnation(inst: DecoupledInstance, tol: float = 1e-14, max_sweeps: int = 20_000) -> float:
    """Alternate until a sweep lowers F by less than ``tol``; returns the smallest F seen."""
    best = prev = decoupled_objective(inst)
    for _ in range(max_sweeps):
        cur = sweep(inst)[-1]
        best = min(best, cur)
        if prev - cur < tol:
            return best
        prev = cur
    raise ConvergenceError("run_to_stagnation", float(prev - cur), max_sweeps)


def _point(inst):
    return inst.Theta.copy(), inst.Phi.copy(), inst.Lam.copy()


# ------------------------------------------------------------------ strong convexity


def loss_slope_bound(inst: DecoupledInstance, alpha: float | None = None, F0: float | None = None) -> float:
    """rho >= |l'(t)| over the region the alternation can visit.

    Logistic: rho = 1. Quadratic: on the sublevel set {F <= F0} the ridge term
    bounds ||Theta||_F <= sqrt(2 F0 / alpha), so |t - b| <= max|b| + ||x|| sqrt(2 F0 / alpha).
    """
    if inst.loss == "logistic":
        return 1.0
    alpha = inst.alpha if alpha is None else alpha
    F0 = _start_value(inst) if F0 is None else F0
    if alpha <= 0:
        return np.inf
    return float(np.max(np.abs(inst.targets)) + inst.x_norm * np.sqrt(2.0 * F0 / alpha))


def _start_value(inst: DecoupledInstance) -> float:
    # value at Theta = Phi = 0 and uniform Lam, where the alternation is started
    probe = replace(inst, Theta=None, Phi=None, Lam=None)
    return decoupled_objective(probe)


def alpha_bound(inst: DecoupledInstance) -> float:
    """Smallest alpha with alpha >= 2 ||x||^2 max(mu, rho^2 / mu).

    For the quadratic loss rho itself depends on alpha through the sublevel-set
    bound, so the fixed point is found by a scalar root solve.
    """
    mu, xn2 = inst.mu_pen, inst.x_norm**2
    if mu <= 0:
        raise ValueError("the bound needs mu_pen > 0")
    if inst.loss == "logistic":
        return 2.0 * xn2 * max(mu, 1.0 / mu)
    F0 = _start_value(inst)

    def gap(a):
        return a - 2.0 * xn2 * max(mu, loss_slope_bound(inst, a, F0) ** 2 / mu)

    lo = 2.0 * xn2 * max(mu, np.max(np.abs(inst.targets)) ** 2 / mu) + 1e-12
    hi = max(lo, 1.0) * 2.0
    while gap(hi) < 0:
        hi *= 2.0
    if gap(lo) >= 0:
        return lo
    a = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14)
    return float(a * (1.0 + 1e-12))


def satisfies_bound(inst: DecoupledInstance) -> bool:
    rho = loss_slope_bound(inst)
    return inst.alpha >= 2.0 * inst.x_norm**2 * max(inst.mu_pen, rho**2 / inst.mu_pen)


def hessian_quadform(inst: DecoupledInstance, point, direction) -> float:
    """Exact z' Hess F z at ``point`` along ``direction`` = (H_Theta, H_Phi, H_Lam)."""
    Theta, Phi, Lam = point
    dT, dP, dL = direction
    X, mu, b = inst.X, inst.mu_pen, inst.targets
    V, W = X @ Theta, X @ Phi
    Lt, hL = Lam.T, dL.T
    t = np.sum(Lt * V, axis=1)
    tp = np.sum(hL * V, axis=1) + np.sum(Lt * (X @ dT), axis=1)
    tpp = 2.0 * np.sum(hL * (X @ dT), axis=1)
    loss_part = _d2loss(inst.loss, t, b) * tp**2 + _dloss(inst.loss, t, b) * tpp
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(Lt > 0, hL**2 / Lt, np.where(hL == 0, 0.0, np.inf)).sum(axis=1)
    P = softmax(W, axis=1)
    u = X @ dP
    lse = np.sum(P * u**2, axis=1) - np.sum(P * u, axis=1) ** 2
    cross = -2.0 * np.sum(hL * u, axis=1)
    per = loss_part + mu * (ent + lse + cross)
    return float(np.mean(per) + inst.alpha * (np.sum(dT**2) + np.sum(dP**2)))


def fd_quadform(inst: DecoupledInstance, point, direction, eps: float = 1e-4) -> float:
    """Second-order central difference of F along ``direction``."""
    Theta, Phi, Lam = point
    dT, dP, dL = direction

    def F(s):
        return decoupled_objective(inst, Theta + s * dT, Phi + s * dP, Lam + s * dL)

    return (F(eps) - 2.0 * F(0.0) + F(-eps)) / eps**2


def random_direction(inst: DecoupledInstance, rng: np.random.Generator, basis: bool = False):
    """Unit-norm joint direction; the Lam part is tangent to the simplex (columns sum to 0)."""
    d, K, n = inst.d, inst.n_experts, inst.n
    if basis:
        parts = [np.zeros((d, K)), np.zeros((d, K)), np.zeros((K, n))]
        block = int(rng.integers(3 if K > 1 else 2))
        shape = parts[block].shape
        if block < 2:
            parts[block][np.unravel_index(int(rng.integers(parts[block].size)), shape)] = 1.0
        else:
            i, (j, k) = int(rng.integers(n)), rng.choice(K, 2, replace=False)
            parts[2][j, i], parts[2][k, i] = 1.0, -1.0
    else:
        parts = [rng.standard_normal((d, K)), rng.standard_normal((d, K)), rng.standard_normal((K, n))]
        parts[2] -= parts[2].mean(axis=0, keepdims=True)
    norm = np.sqrt(sum(np.sum(p**2) for p in parts))
    return tuple(p / norm for p in parts)


def random_point(inst: DecoupledInstance, rng: np.random.Generator, radius: float | None = None, floor: float = 1e-3):
    """Random feasible point with ||Theta||_F <= radius and Lam columns bounded away from the boundary."""
    d, K, n = inst.d, inst.n_experts, inst.n
    if radius is None:
        radius = np.sqrt(2.0 * _start_value(inst) / inst.alpha) if inst.alpha > 0 else 1.0
    T = rng.standard_normal((d, K))
    T *= radius * rng.random() ** (1.0 / T.size) / np.linalg.norm(T)
    P = rng.standard_normal((d, K))
    L = rng.dirichlet(np.ones(K), size=n).T
    L = floor + (1.0 - K * floor) * L
    return T, P, L


@dataclass
class CurvatureReport:
    convex: bool
    min_curvature: float
    max_curvature: float
    trials: int
    worst_point: tuple | None = None
    worst_direction: tuple | None = None


def strong_convexity_check(inst: DecoupledInstance, trials: int = 500, rng: np.random.Generator | None = None,
                           points=None, eps: float = 1e-4) -> CurvatureReport:
    """Sample finite-difference curvatures z' Hess F z at random feasible points.

    ``points`` adds extra evaluation points (e.g. iterates of the alternation).
    """
    rng = rng or np.random.default_rng(0)
    pts = list(points or [])
    lo, hi, worst = np.inf, -np.inf, (None, None)
    for k in range(trials):
        p = pts[k % len(pts)] if pts and k % 2 else random_point(inst, rng)
        p = _interior(p, eps)
        z = random_direction(inst, rng, basis=(k % 4 == 3))
        c = fd_quadform(inst, p, z, eps)
        if c < lo:
            lo, worst = c, (p, z)
        hi = max(hi, c)
    return CurvatureReport(bool(lo > 0), float(lo), float(hi), trials, *worst)


def _interior(point, eps):
    T, P, L = point
    # keep Lam +- eps * direction inside the simplex
    floor = 2.0 * eps
    if L.min() < floor:
        K = L.shape[0]
        L = floor + (1.0 - K * floor) * L
    return T, P, L


def negative_curvature_search(inst: DecoupledInstance, rng: np.random.Generator | None = None, trials: int = 200) -> CurvatureReport:
    """Directed search along mixed Theta-Lam directions for a negative curvature.

    Along H = -s sign(l') x h' the cross term 2 l' <h, H'x> = -2 s |l'| ||x||^2 ||h||^2,
    which beats the entropy curvature once alpha is too small.
    """
    rng = rng or np.random.default_rng(0)
    d, K, n = inst.d, inst.n_experts, inst.n
    best = CurvatureReport(True, np.inf, -np.inf, 0)
    radius = max(1.0, np.sqrt(2.0 * _start_value(inst) / max(inst.alpha, 1e-12)))
    for k in range(trials):
        T, P, L = random_point(inst, rng, radius=radius, floor=0.05)
        i = int(rng.integers(n))
        x = inst.X[i]
        t = float(L[:, i] @ (T.T @ x))
        g = float(_dloss(inst.loss, t, inst.targets[i]))
        h = rng.standard_normal(K)
        h -= h.mean()
        hL = np.zeros((K, n))
        hL[:, i] = h
        for s in np.geomspace(1e-3, 1e2, 26):
            dT = -s * np.sign(g or 1.0) * np.outer(x, h)
            z = (dT, np.zeros((d, K)), hL)
            c = hessian_quadform(inst, (T, P, L), z) / sum(np.sum(a**2) for a in z)
            if c < best.min_curvature:
                best = CurvatureReport(bool(c > 0), c, max(best.max_curvature, c), k + 1, (T, P, L), z)
    best.trials = trials
    return best


# ------------------------------------------------------------------ rate


@dataclass
class RateCheck:
    holds: bool
    first_violation: int | None
    rate: float
    gaps: np.ndarray = field(repr=False)
    envelope: np.ndarray = field(repr=False)


def verify_linear_rate(values, mu_sc: float, L_sc: float, F_star: float, slack: float = 1e-6, atol: float = 0.0) -> RateCheck:
    """Check F_k - F* <= (1 - mu/L)^(2k) (F_0 - F*) at every k, with multiplicative ``slack``
    and an absolute allowance ``atol`` for round-off in F itself."""
    values = np.asarray(values, dtype=np.float64)
    if not 0 < mu_sc <= L_sc:
        raise ValueError("need 0 < mu_sc <= L_sc")
    rate = (1.0 - mu_sc / L_sc) ** 2
    k = np.arange(values.size)
    gaps = values - F_star
    envelope = rate**k * (values[0] - F_star)
    bad = np.flatnonzero(gaps > envelope * (1.0 + slack) + atol)
    return RateCheck(bad.size == 0, int(bad[0]) if bad.size else None, float(rate), gaps, envelope)


def estimate_constants(inst: DecoupledInstance, points, rng: np.random.Generator, directions: int = 1000,
                       eps: float = 1e-4) -> tuple[float, float]:
    """Sampled min/max curvature over the given points (and random ones) along unit directions."""
    rep = strong_convexity_check(inst, directions, rng, points=points, eps=eps)
    return rep.min_curvature, rep.max_curvature


def certify_decoupled(inst: DecoupledInstance, iterations: int = 200, rng: np.random.Generator | None = None,
                      directions: int = 1000, margin: tuple[float, float] = (0.9, 1.1)) -> dict:
    """Full pipeline: descent check, constants, stagnation F*, envelope check. Returns a JSON-ready report."""
    rng = rng or np.random.default_rng(0)
    work = inst.copy()
    steps, per_sweep, points = run_alternation(work, iterations)
    tail = work.copy()
    F_star = min(run_to_stagnation(tail), float(per_sweep.min()))
    increases = np.diff(steps)
    mu_sc, L_sc = estimate_constants(inst, points, rng, directions)
    report = {
        "instance": {"n": inst.n, "d": inst.d, "experts": inst.n_experts, "loss": inst.loss,
                     "alpha": inst.alpha, "mu_pen": inst.mu_pen, "alpha_bound": alpha_bound(inst)},
        "monotone": bool(np.all(increases <= 1e-12)),
        "max_increase": float(increases.max(initial=-np.inf)),
        "mu_sc": mu_sc,
        "L_sc": L_sc,
        "F_star": F_star,
        "F0": float(per_sweep[0]),
    }
    if mu_sc <= 0:
        report.update(envelope_holds=False, first_violation=0, rate=None)
        return report
    atol = float(8 * np.finfo(float).eps * max(1.0, abs(F_star)))
    chk = verify_linear_rate(per_sweep, margin[0] * mu_sc, margin[1] * L_sc, F_star, atol=atol)
    report.update(envelope_holds=chk.holds, first_violation=chk.first_violation, rate=chk.rate,
                  atol=atol, final_gap=float(per_sweep[-1] - F_star))
    return report


def certify_quadratic(q: QuadraticBilevel, theta0, k_max: int = 50) -> dict:
    traj = quad_alternate(q, theta0, k_max)
    rates = contraction_rate(q)
    ratios = traj.ratios()
    return {
        "dims": [q.A.shape[0], q.B.shape[0]],
        "mu": q.mu,
        "L": q.L,
        "rate_euclidean": rates.euclidean,
        "rate_a_norm": rates.a_norm,
        "spectral_radius": rates.spectral_radius,
        "eig_bound": rates.eig_bound,
        "max_step_ratio": float(ratios.max(initial=0.0)),
        "contracts": bool(np.all(ratios <= rates.euclidean + 1e-9)),
    }
