"""Imitation pipelines: behavior cloning, DAgger, DART, and COIL.

COIL trains against targets adjusted by a Fisher-weighted projection of the
parameters onto the zero-input/zero-output constraint set, so it never calls
the expert after the initial dataset exists (its signature takes no expert).
DAgger aggregates expert labels on states its own policy visits; DART
aggregates states visited by the expert under injected Gaussian knot noise
whose covariance is fitted to the current policy's residuals.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .datagen import Dataset, sample_initial_error
from .expert import DEFAULT_W_X
from .policy import (
    NetArch,
    NeuralPolicy,
    TrainOptions,
    forward,
    grad_theta,
    init_policy,
    mse,
    param_count,
    train,
)

logger = logging.getLogger(__name__)

# rollouts whose boundary error leaves the expert's trust region are not
# labeled; the expert contract rejects weighted errors above 2
LABEL_NORM_CAP = 2.0


@dataclass(frozen=True)
class FisherMatrix:
    """Sample-mean score outer product, held factored: F = G G^T / n."""

    G: np.ndarray
    n: int

    def __post_init__(self) -> None:
        if self.G.ndim != 2 or self.n < 1:
            raise ValueError("G must be (n_theta, n_samples) with n >= 1")

    @property
    def n_theta(self) -> int:
        return self.G.shape[0]

    def trace(self) -> float:
        return float(np.sum(self.G * self.G)) / self.n

    def quad(self, delta: np.ndarray) -> float:
        """delta^T F delta without materializing F."""
        v = self.G.T @ np.asarray(delta, dtype=float).reshape(self.n_theta)
        return float(v @ v) / self.n

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.G @ (self.G.T @ v) / self.n

    def dense(self) -> np.ndarray:
        return (self.G @ self.G.T) / self.n

    def solve_regularized(self, B: np.ndarray, eps: float):
        """(F + eps I)^{-1} B through the small n x n system (Woodbury)."""
        B = np.asarray(B, dtype=float)
        K = self.G.T @ self.G
        K[np.diag_indices_from(K)] += self.n * eps
        cf = cho_factor(K)
        GtB = self.G.T @ B
        return (B - self.G @ cho_solve(cf, GtB)) / eps


def fim_estimate(net: NeuralPolicy, X: np.ndarray,
                 Y: np.ndarray) -> FisherMatrix:
    """Score vectors g_k = grad_theta(net, X_k, Y_k - f(X_k)), unit covariance."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = X.shape[1]
    R = Y - forward(net, X)
    G = np.empty((param_count(net.arch), n))
    for k in range(n):
        G[:, k] = grad_theta(net, X[:, k], R[:, k])
    return FisherMatrix(G, n)


def kl_gaussian(net_a: NeuralPolicy, net_b: NeuralPolicy,
                F: FisherMatrix) -> float:
    """Quadratic KL approximation (1/2) dtheta^T F dtheta between policies."""
    if net_a.arch != net_b.arch:
        raise ValueError("policies must share an architecture")
    if F.n_theta != net_a.theta.size:
        raise ValueError("Fisher matrix size does not match the policies")
    return 0.5 * F.quad(net_a.theta - net_b.theta)


@dataclass(frozen=True)
class ILConfig:
    """Iteration counts and scales shared by the iterative pipelines."""

    n_iter: int = 5
    alpha: float = 0.75
    dart_scale: float = 1e-4
    rollout_periods: int = 5
    mu_c: float = 1.0
    n_rollouts: int = 15

    def __post_init__(self) -> None:
        if self.n_iter < 1:
            raise ValueError("n_iter must be at least 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.dart_scale <= 0:
            raise ValueError("dart_scale must be positive")
        if self.rollout_periods < 1:
            raise ValueError("rollout_periods must be at least 1")
        if self.mu_c < 0 or self.n_rollouts < 0:
            raise ValueError("mu_c and n_rollouts must be nonnegative")


@dataclass
class IterRecord:
    """One pipeline iteration for the metrics log."""

    iteration: int
    n_data: int
    mse: float
    constraint_norm: float
    wall_time: float
    constraint_norm_projected: float | None = None


def write_metrics(records: list[IterRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "dataset_size", "mse", "constraint_norm",
                    "wall_time_s"])
        for r in records:
            w.writerow([r.iteration, r.n_data, repr(r.mse),
                        repr(r.constraint_norm), repr(r.wall_time)])


def constraint_norm(net: NeuralPolicy) -> float:
    """||f(0, theta)||_2, the zero-input/zero-output violation."""
    return float(np.linalg.norm(forward(net, np.zeros(net.arch.n_in))))


def behavior_cloning(ds: Dataset, arch: NetArch,
                     opts: TrainOptions | None = None, *,
                     seed: int = 0) -> NeuralPolicy:
    return train(init_policy(arch, seed), ds.X, ds.Y, opts)


def _policy_fn(net: NeuralPolicy):
    return lambda e: forward(net, np.asarray(e, dtype=float).reshape(12))


def _collectable(e: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(e))
                and np.linalg.norm(DEFAULT_W_X * e) <= LABEL_NORM_CAP)


def _log_record(algo: str, r: IterRecord) -> None:
    logger.info("%s iter %d: n=%d mse=%.4e |f(0)|=%.3e %.1fs",
                algo, r.iteration, r.n_data, r.mse, r.constraint_norm,
                r.wall_time)


def dagger(ds0: Dataset, arch: NetArch, cfg: ILConfig, expert, simulator, *,
           opts: TrainOptions | None = None, seed: int = 0,
           warm_start: bool = True) -> tuple[NeuralPolicy, list[IterRecord]]:
    """Iterative aggregation of expert labels on on-policy states."""
    t0 = time.perf_counter()
    ds = ds0
    policy = train(init_policy(arch, seed), ds.X, ds.Y, opts)
    records = [IterRecord(0, ds.n, mse(policy, ds.X, ds.Y),
                          constraint_norm(policy), time.perf_counter() - t0)]
    root = np.random.SeedSequence(seed)
    for i in range(1, cfg.n_iter + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(root.spawn(1)[0])
        visited = []
        for _ in range(cfg.n_rollouts):
            e0 = sample_initial_error(rng)
            errs = simulator(_policy_fn(policy), e0, cfg.rollout_periods)
            for e in [e0.vec] + list(errs[:-1]):
                if _collectable(e):
                    visited.append(np.asarray(e, dtype=float))
        new_x, new_y = [], []
        for e in visited:
            try:
                new_y.append(np.asarray(expert(e), dtype=float).reshape(60))
                new_x.append(e)
            except RuntimeError as exc:
                logger.warning("iteration %d: expert failed on a state: %s",
                               i, exc)
        if new_x:
            ds = ds.append(np.array(new_x).T, np.array(new_y).T, "dagger")
            policy = train(policy if warm_start else init_policy(arch, seed),
                           ds.X, ds.Y, opts)
        records.append(IterRecord(i, ds.n, mse(policy, ds.X, ds.Y),
                                  constraint_norm(policy),
                                  time.perf_counter() - t0))
        _log_record("dagger", records[-1])
    return policy, records


def dart_covariance(net: NeuralPolicy, ds: Dataset) -> np.ndarray:
    """Unscaled residual covariance of the policy against stored labels."""
    R = forward(net, ds.X) - ds.Y
    return (R @ R.T) / ds.n


def scale_dart_covariance(Sigma_hat: np.ndarray, n: int,
                          dart_scale: float) -> np.ndarray:
    """Step-4 scaling; returns a matrix whose trace is dart_scale/n exactly."""
    tr = float(np.trace(Sigma_hat))
    if tr == 0.0:
        return np.zeros_like(Sigma_hat)
    return (dart_scale / (n * tr)) * Sigma_hat


def sample_knot_noise(rng: np.random.Generator, Sigma: np.ndarray,
                      n: int = 1) -> np.ndarray:
    """(n, 60) Gaussian draws with covariance Sigma (PSD, possibly singular)."""
    Sigma = np.asarray(Sigma, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    lam = np.clip(lam, 0.0, None)
    L = V * np.sqrt(lam)
    z = rng.standard_normal((n, Sigma.shape[0]))
    return z @ L.T


def dart(ds0: Dataset, arch: NetArch, cfg: ILConfig, expert, simulator, *,
         opts: TrainOptions | None = None, seed: int = 0,
         warm_start: bool = True) -> tuple[NeuralPolicy, list[IterRecord]]:
    """Noise-injected expert demonstrations, noise fitted to policy error."""
    t0 = time.perf_counter()
    ds = ds0
    policy = train(init_policy(arch, seed), ds.X, ds.Y, opts)
    records = [IterRecord(0, ds.n, mse(policy, ds.X, ds.Y),
                          constraint_norm(policy), time.perf_counter() - t0)]
    root = np.random.SeedSequence(seed)
    for i in range(1, cfg.n_iter + 1):
        t0 = time.perf_counter()
        Sigma = scale_dart_covariance(dart_covariance(policy, ds), ds.n,
                                      cfg.dart_scale)
        rng = np.random.default_rng(root.spawn(1)[0])
        new_x, new_y = [], []
        for _ in range(cfg.n_rollouts):
            e0 = sample_initial_error(rng)
            pairs = []
            failed = False

            def noisy_expert(e):
                nonlocal failed
                if not _collectable(e):
                    failed = True
                    raise _RolloutAbort
                try:
                    u_star = np.asarray(expert(e), dtype=float).reshape(60)
                except RuntimeError as exc:
                    failed = True
                    logger.warning("iteration %d: expert failed: %s", i, exc)
                    raise _RolloutAbort from exc
                pairs.append((np.asarray(e, dtype=float).copy(), u_star))
                return u_star + sample_knot_noise(rng, Sigma, 1)[0]

            try:
                simulator(noisy_expert, e0, cfg.rollout_periods)
            except _RolloutAbort:
                continue
            if not failed:
                for e, u in pairs:
                    new_x.append(e)
                    new_y.append(u)
        if new_x:
            ds = ds.append(np.array(new_x).T, np.array(new_y).T, "dart")
            policy = train(policy if warm_start else init_policy(arch, seed),
                           ds.X, ds.Y, opts)
        records.append(IterRecord(i, ds.n, mse(policy, ds.X, ds.Y),
                                  constraint_norm(policy),
                                  time.perf_counter() - t0))
        _log_record("dart", records[-1])
    return policy, records


class _RolloutAbort(Exception):
    pass


def _metric_solver(F, n_theta: int):
    """Returns (solve(B), eps) for the regularized metric F + eps I."""
    if isinstance(F, FisherMatrix):
        if F.n_theta != n_theta:
            raise ValueError("Fisher matrix size mismatch")
        eps = max(1e-8 * F.trace() / n_theta, 1e-30)
        return (lambda B: F.solve_regularized(B, eps)), eps
    M = np.asarray(F, dtype=float)
    if M.shape != (n_theta, n_theta):
        raise ValueError("metric must be n_theta x n_theta")
    eps = max(1e-8 * float(np.trace(M)) / n_theta, 1e-30)
    M = M.copy()
    M[np.diag_indices_from(M)] += eps
    cf = cho_factor(M)
    return (lambda B: cho_solve(cf, B)), eps


def constrained_project(theta0: np.ndarray, F, arch: NetArch, *,
                        tol: float = 1e-8, max_iter: int = 50,
                        mu_c: float = 1.0) -> np.ndarray:
    """Metric projection of theta0 onto {theta : f(0, theta) = 0}.

    Sequential linearized KKT steps in the metric F + eps I with
    eps = 1e-8 tr(F)/N_theta; the multiplier system is solved by least
    squares so a rank-deficient constraint Jacobian degrades gracefully.
    If the KKT loop stalls above `tol`, the leftover violation is closed
    exactly through the output bias (identity constraint Jacobian there).
    """
    theta0 = np.asarray(theta0, dtype=float).reshape(param_count(arch))
    solve_metric, _ = _metric_solver(F, theta0.size)
    x0 = np.zeros(arch.n_in)
    eye = np.eye(arch.n_out)

    theta = theta0.copy()
    net = NeuralPolicy(arch, theta)
    c = forward(net, x0)
    best = (float(np.linalg.norm(c)), theta)
    mu = mu_c

    def merit(th, cn, mu_val):
        d = th - theta0
        quad = (F.quad(d) if isinstance(F, FisherMatrix)
                else float(d @ (np.asarray(F, dtype=float) @ d)))
        return 0.5 * quad + mu_val * cn

    for _ in range(max_iter):
        cn = float(np.linalg.norm(c))
        if cn <= tol:
            return theta
        A = np.empty((arch.n_out, theta.size))
        for j in range(arch.n_out):
            A[j] = grad_theta(net, x0, eye[j])
        e_vec = theta - theta0
        MiAt = solve_metric(A.T)
        S = A @ MiAt
        lam, *_ = np.linalg.lstsq(S, c - A @ e_vec, rcond=None)
        delta = -e_vec - MiAt @ lam

        # penalty weight must dominate the multipliers for the KKT step to
        # be a descent direction of the merit; mu_c is the floor
        mu = max(mu, mu_c, 2.0 * float(np.linalg.norm(lam)))
        base_merit = merit(theta, cn, mu)
        step = 1.0
        accepted = False
        while step >= 1.0 / 1024.0:
            th_try = theta + step * delta
            net_try = NeuralPolicy(arch, th_try)
            c_try = forward(net_try, x0)
            cn_try = float(np.linalg.norm(c_try))
            if cn_try <= tol or merit(th_try, cn_try, mu) < base_merit:
                theta, net, c = th_try, net_try, c_try
                if cn_try < best[0]:
                    best = (cn_try, th_try)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # restoration: the output bias has an exact identity constraint
            # Jacobian with no activation kinks, so shifting it always
            # restores feasibility at a small metric cost
            th_try = theta.copy()
            th_try[-arch.n_out:] -= c
            theta = th_try
            net = NeuralPolicy(arch, theta)
            c = forward(net, x0)
            if float(np.linalg.norm(c)) < best[0]:
                best = (float(np.linalg.norm(c)), theta)

    if float(np.linalg.norm(c)) <= tol:
        return theta
    # close whatever violation is left through the output bias: f is linear
    # in b_o with identity Jacobian, so this lands exactly on the manifold
    # at a metric cost quadratic in the (tiny) residual
    theta = best[1].copy()
    theta[-arch.n_out:] -= forward(NeuralPolicy(arch, theta), x0)
    cn = float(np.linalg.norm(forward(NeuralPolicy(arch, theta), x0)))
    if cn <= tol:
        return theta
    warnings.warn(f"constraint projection stagnated at violation {cn:.3e}; "
                  "returning best iterate", RuntimeWarning, stacklevel=2)
    return theta


def coil(ds: Dataset, arch: NetArch, cfg: ILConfig, *,
         opts: TrainOptions | None = None, seed: int = 0,
         warm_start: bool = True) -> tuple[NeuralPolicy, list[IterRecord]]:
    """Constraint-adjusted target iteration; needs no expert access.

    Per iteration: fit the blend (1-alpha) Y + alpha Yhat, estimate the
    Fisher metric there, project the parameters onto the zero-input
    constraint set, regenerate targets from the projected policy, retrain.
    """
    t0 = time.perf_counter()
    X, Y = ds.X, ds.Y
    policy = train(init_policy(arch, seed), X, Y, opts)
    records = [IterRecord(0, ds.n, mse(policy, X, Y),
                          constraint_norm(policy), time.perf_counter() - t0)]
    Yhat = forward(policy, X)
    for i in range(1, cfg.n_iter + 1):
        t0 = time.perf_counter()
        blend = (1.0 - cfg.alpha) * Y + cfg.alpha * Yhat
        theta_z0 = train(policy if warm_start else init_policy(arch, seed),
                         X, blend, opts)
        F = fim_estimate(theta_z0, X, Y)
        theta_z = constrained_project(theta_z0.theta, F, arch,
                                      mu_c=cfg.mu_c)
        projected = NeuralPolicy(arch, theta_z)
        Z = forward(projected, X)
        policy = train(policy if warm_start else init_policy(arch, seed),
                       X, Z, opts)
        Yhat = forward(policy, X)
        records.append(IterRecord(i, ds.n, mse(policy, X, Y),
                                  constraint_norm(policy),
                                  time.perf_counter() - t0,
                                  constraint_norm(projected)))
        _log_record("coil", records[-1])
    return policy, records
