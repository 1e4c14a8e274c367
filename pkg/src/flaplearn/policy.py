"""Cascade-forward network: forward pass, backprop, and batch training.

One hidden layer of leaky-rectifier units plus a direct linear path from
input to output. The output is linear in (W_o, W_d, b_o), which the trainer
exploits: those are re-solved exactly by a small ridge system every time the
hidden layer moves, and a Levenberg-damped Gauss-Newton loop moves only the
hidden weights. Every accepted iteration lowers the loss by construction,
and training is deterministic for fixed data and initial parameters. A
momentum gradient-descent fallback (with the same monotone-acceptance rule)
is available behind an option.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .wingkin import U_LAYOUT_VERSION


@dataclass(frozen=True)
class NetArch:
    """Layer sizes, leaky slope, and the direct input-output connection."""

    n_in: int = 12
    n_hidden: int = 36
    n_out: int = 60
    s_leak: float = 0.01
    cascade: bool = True

    def __post_init__(self) -> None:
        if min(self.n_in, self.n_hidden, self.n_out) < 1:
            raise ValueError("layer sizes must be positive")
        if not (0.0 <= self.s_leak < 1.0):
            raise ValueError("leaky slope must lie in [0, 1)")


def param_count(arch: NetArch) -> int:
    n = (arch.n_in * arch.n_hidden + arch.n_hidden * arch.n_out
         + arch.n_hidden + arch.n_out)
    if arch.cascade:
        n += arch.n_in * arch.n_out
    return n


def _offsets(arch: NetArch):
    ni, nh, no = arch.n_in, arch.n_hidden, arch.n_out
    sizes = [nh * ni, nh, no * nh, no * ni if arch.cascade else 0, no]
    off = np.cumsum([0] + sizes)
    return off, sizes


@dataclass
class NeuralPolicy:
    """Flat parameter vector plus its architecture; treat as immutable."""

    arch: NetArch
    theta: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        th = np.asarray(self.theta, dtype=float).reshape(param_count(self.arch))
        if not np.all(np.isfinite(th)):
            raise ValueError("parameters must be finite")
        self.theta = th

    # parameter views (they alias theta; do not mutate)
    @property
    def W_h(self) -> np.ndarray:
        off, _ = _offsets(self.arch)
        return self.theta[off[0]:off[1]].reshape(self.arch.n_hidden,
                                                 self.arch.n_in)

    @property
    def b_h(self) -> np.ndarray:
        off, _ = _offsets(self.arch)
        return self.theta[off[1]:off[2]]

    @property
    def W_o(self) -> np.ndarray:
        off, _ = _offsets(self.arch)
        return self.theta[off[2]:off[3]].reshape(self.arch.n_out,
                                                 self.arch.n_hidden)

    @property
    def W_d(self) -> np.ndarray:
        off, _ = _offsets(self.arch)
        if not self.arch.cascade:
            raise AttributeError("architecture has no direct connection")
        return self.theta[off[3]:off[4]].reshape(self.arch.n_out,
                                                 self.arch.n_in)

    @property
    def b_o(self) -> np.ndarray:
        off, _ = _offsets(self.arch)
        return self.theta[off[4]:off[5]]

    def with_theta(self, theta: np.ndarray) -> "NeuralPolicy":
        return NeuralPolicy(self.arch, theta, self.seed)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def init_policy(arch: NetArch, seed: int) -> NeuralPolicy:
    """Scaled-uniform fan-in initialization: U(-1/sqrt(fan_in), +); zero biases."""
    rng = np.random.default_rng(seed)
    off, _ = _offsets(arch)
    th = np.zeros(param_count(arch))
    s_h = 1.0 / np.sqrt(arch.n_in)
    th[off[0]:off[1]] = rng.uniform(-s_h, s_h, off[1] - off[0])
    s_o = 1.0 / np.sqrt(arch.n_hidden)
    th[off[2]:off[3]] = rng.uniform(-s_o, s_o, off[3] - off[2])
    if arch.cascade:
        s_d = 1.0 / np.sqrt(arch.n_in)
        th[off[3]:off[4]] = rng.uniform(-s_d, s_d, off[4] - off[3])
    return NeuralPolicy(arch, th, seed)


def _act(arch: NetArch, z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, z, arch.s_leak * z)


def _act_slope(arch: NetArch, z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0.0, 1.0, arch.s_leak)


def forward(net: NeuralPolicy, x: np.ndarray) -> np.ndarray:
    """Network output for a single 12-vector or a 12xN batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[:, None]
    if x.shape[0] != net.arch.n_in:
        raise ValueError(f"input must have {net.arch.n_in} rows, "
                         f"got {x.shape[0]}")
    a = _act(net.arch, net.W_h @ x + net.b_h[:, None])
    y = net.W_o @ a + net.b_o[:, None]
    if net.arch.cascade:
        y = y + net.W_d @ x
    return y[:, 0] if single else y


def grad_theta(net: NeuralPolicy, x: np.ndarray,
               upstream: np.ndarray) -> np.ndarray:
    """(df/dtheta)^T upstream by reverse accumulation, for one input."""
    x = np.asarray(x, dtype=float).reshape(net.arch.n_in)
    u = np.asarray(upstream, dtype=float).reshape(net.arch.n_out)
    h = net.W_h @ x + net.b_h
    a = _act(net.arch, h)
    dh = (net.W_o.T @ u) * _act_slope(net.arch, h)
    off, _ = _offsets(net.arch)
    g = np.empty(param_count(net.arch))
    g[off[0]:off[1]] = np.outer(dh, x).ravel()
    g[off[1]:off[2]] = dh
    g[off[2]:off[3]] = np.outer(u, a).ravel()
    if net.arch.cascade:
        g[off[3]:off[4]] = np.outer(u, x).ravel()
    g[off[4]:off[5]] = u
    return g


@dataclass(frozen=True)
class TrainOptions:
    """Full-batch trainer knobs; everything is deterministic."""

    lam_reg: float = 0.0
    max_iter: int = 200
    tol: float = 1e-12
    method: str = "lm"
    lr: float = 1e-2
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.method not in ("lm", "gd"):
            raise ValueError("method must be 'lm' or 'gd'")
        if self.lam_reg < 0.0:
            raise ValueError("regularization weight must be nonnegative")


def _check_batch(net: NeuralPolicy, X: np.ndarray, Y: np.ndarray):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or X.shape[0] != net.arch.n_in:
        raise ValueError(f"X must be {net.arch.n_in}xN")
    if Y.ndim != 2 or Y.shape[0] != net.arch.n_out or Y.shape[1] != X.shape[1]:
        raise ValueError(f"Y must be {net.arch.n_out}x{X.shape[1]}")
    if X.shape[1] < 1:
        raise ValueError("empty batch")
    return X, Y


def mse(net: NeuralPolicy, X: np.ndarray, Y: np.ndarray) -> float:
    X, Y = _check_batch(net, X, Y)
    r = forward(net, X) - Y
    return float(np.mean(r * r))


def _features(arch: NetArch, Wt: np.ndarray, Z: np.ndarray, X: np.ndarray):
    """Hidden pre-activations and the output-linear feature stack phi.

    Wt is the augmented hidden matrix [W_h | b_h] acting on z = [x; 1].
    """
    H = Wt @ Z
    A = _act(arch, H)
    if arch.cascade:
        Phi = np.concatenate([A, X, np.ones((1, X.shape[1]))], axis=0)
    else:
        Phi = np.concatenate([A, np.ones((1, X.shape[1]))], axis=0)
    return H, Phi


def _solve_linear_out(Phi: np.ndarray, Y: np.ndarray, lam: float):
    """Exact ridge solve of the output-linear parameters C: y = C phi."""
    n_out, N = Y.shape
    G = Phi @ Phi.T
    ridge = n_out * N * lam + 1e-13 * (np.trace(G) / G.shape[0] + 1e-30)
    G[np.diag_indices_from(G)] += ridge
    C = np.linalg.solve(G, Phi @ Y.T).T
    return C


def _loss(C: np.ndarray, Phi: np.ndarray, Y: np.ndarray, Wt: np.ndarray,
          lam: float) -> float:
    r = C @ Phi - Y
    return float(np.mean(r * r) + lam * (np.sum(C * C) + np.sum(Wt * Wt)))


def _pack(net: NeuralPolicy, Wt: np.ndarray, C: np.ndarray) -> np.ndarray:
    arch = net.arch
    ni, nh = arch.n_in, arch.n_hidden
    off, _ = _offsets(arch)
    th = np.empty(param_count(arch))
    th[off[0]:off[1]] = Wt[:, :ni].ravel()
    th[off[1]:off[2]] = Wt[:, ni]
    th[off[2]:off[3]] = C[:, :nh].ravel()
    if arch.cascade:
        th[off[3]:off[4]] = C[:, nh:nh + ni].ravel()
    th[off[4]:off[5]] = C[:, -1]
    return th


def _train_lm(net: NeuralPolicy, X: np.ndarray, Y: np.ndarray,
              opts: TrainOptions):
    arch = net.arch
    ni, nh, no = arch.n_in, arch.n_hidden, arch.n_out
    N = X.shape[1]
    lam = opts.lam_reg
    Wt = np.column_stack([net.W_h, net.b_h])               # (nh, ni+1)
    Z = np.concatenate([X, np.ones((1, N))], axis=0)       # (ni+1, N)

    H_pre, Phi = _features(arch, Wt, Z, X)
    C = _solve_linear_out(Phi, Y, lam)
    loss = _loss(C, Phi, Y, Wt, lam)
    history = [loss]
    lam_lm = 1e-2
    scale = 2.0 / (no * N)

    for _ in range(opts.max_iter):
        if not np.isfinite(loss):
            raise RuntimeError("training diverged; loss trace: "
                               + ", ".join(f"{v:.3e}" for v in history[-8:]))
        Wo = C[:, :nh]
        R = C @ Phi - Y                                    # (no, N)
        slope = _act_slope(arch, H_pre)                    # (nh, N)
        # per-sample output jacobian wrt row p of Wt is outer(Wo diag(slope)_p, z)
        WtW = Wo.T @ Wo                                    # (nh, nh)
        S = slope[:, None, :] * WtW[:, :, None] * slope[None, :, :]
        Hgn = scale * np.einsum("pqk,ik,jk->piqj", S, Z, Z,
                                optimize=True).reshape(nh * (ni + 1), -1)
        MTr = slope * (Wo.T @ R)                           # (nh, N)
        g = scale * np.einsum("pk,ik->pi", MTr, Z)
        g = (g + 2.0 * lam * Wt).ravel()
        Hgn[np.diag_indices_from(Hgn)] += 2.0 * lam

        diag_scale = max(float(np.trace(Hgn)) / Hgn.shape[0], 1e-30)
        accepted = False
        for _trial in range(10):
            Hd = Hgn.copy()
            Hd[np.diag_indices_from(Hd)] += lam_lm * diag_scale
            try:
                step = np.linalg.solve(Hd, -g)
            except np.linalg.LinAlgError:
                lam_lm *= 9.0
                continue
            Wt_try = Wt + step.reshape(nh, ni + 1)
            H_try, Phi_try = _features(arch, Wt_try, Z, X)
            C_try = _solve_linear_out(Phi_try, Y, lam)
            loss_try = _loss(C_try, Phi_try, Y, Wt_try, lam)
            if np.isfinite(loss_try) and loss_try < loss:
                rel = (loss - loss_try) / max(loss, 1e-300)
                Wt, C, H_pre, Phi = Wt_try, C_try, H_try, Phi_try
                loss = loss_try
                history.append(loss)
                lam_lm = max(lam_lm / 3.0, 1e-12)
                accepted = True
                if rel < opts.tol:
                    return Wt, C, history
                break
            lam_lm *= 9.0
            if lam_lm > 1e12:
                break
        if not accepted:
            break
    return Wt, C, history


def _train_gd(net: NeuralPolicy, X: np.ndarray, Y: np.ndarray,
              opts: TrainOptions):
    """Momentum descent on the full parameter vector, monotone by rejection."""
    arch = net.arch
    nh, no, N = arch.n_hidden, arch.n_out, X.shape[1]
    lam = opts.lam_reg
    off, _ = _offsets(arch)
    theta = net.theta.copy()
    Z = np.concatenate([X, np.ones((1, N))], axis=0)

    def loss_and_grad(th: np.ndarray):
        p = net.with_theta(th)
        H = p.W_h @ X + p.b_h[:, None]
        A = _act(arch, H)
        Yh = p.W_o @ A + p.b_o[:, None]
        if arch.cascade:
            Yh = Yh + p.W_d @ X
        R = Yh - Y
        L = float(np.mean(R * R) + lam * np.sum(th * th))
        s = 2.0 / (no * N)
        dA = p.W_o.T @ R
        dH = dA * _act_slope(arch, H)
        g = np.empty_like(th)
        g[off[0]:off[1]] = s * (dH @ X.T).ravel()
        g[off[1]:off[2]] = s * dH.sum(axis=1)
        g[off[2]:off[3]] = s * (R @ A.T).ravel()
        if arch.cascade:
            g[off[3]:off[4]] = s * (R @ X.T).ravel()
        g[off[4]:off[5]] = s * R.sum(axis=1)
        g += 2.0 * lam * th
        return L, g

    loss, g = loss_and_grad(theta)
    history = [loss]
    vel = np.zeros_like(theta)
    lr = opts.lr
    for _ in range(opts.max_iter):
        if not np.isfinite(loss):
            raise RuntimeError("training diverged; loss trace: "
                               + ", ".join(f"{v:.3e}" for v in history[-8:]))
        vel = opts.momentum * vel - lr * g
        th_try = theta + vel
        loss_try, g_try = loss_and_grad(th_try)
        if np.isfinite(loss_try) and loss_try < loss:
            rel = (loss - loss_try) / max(loss, 1e-300)
            theta, loss, g = th_try, loss_try, g_try
            history.append(loss)
            lr = min(lr * 1.05, 1.0)
            if rel < opts.tol:
                break
        else:
            vel[:] = 0.0
            lr *= 0.5
            if lr < 1e-14:
                break
    return theta, history


def train(net: NeuralPolicy, X: np.ndarray, Y: np.ndarray,
          opts: TrainOptions | None = None) -> NeuralPolicy:
    """Fit the batch least-squares objective MSE + lam*||theta||^2.

    The loss over accepted iterations is nonincreasing for both methods;
    a non-finite loss raises with the recent iteration trace.
    """
    return train_history(net, X, Y, opts)[0]


def train_history(net: NeuralPolicy, X: np.ndarray, Y: np.ndarray,
                  opts: TrainOptions | None = None):
    """(trained policy, accepted-loss history) for loss-curve inspection."""
    opts = TrainOptions() if opts is None else opts
    X, Y = _check_batch(net, X, Y)
    if opts.method == "lm":
        Wt, C, history = _train_lm(net, X, Y, opts)
        return net.with_theta(_pack(net, Wt, C)), history
    theta, history = _train_gd(net, X, Y, opts)
    return net.with_theta(theta), history


def save_policy(net: NeuralPolicy, path: str,
                meta: dict | None = None) -> None:
    doc = {
        "kind": "policy",
        "u_layout": U_LAYOUT_VERSION,
        "arch": {"n_in": net.arch.n_in, "n_hidden": net.arch.n_hidden,
                 "n_out": net.arch.n_out, "s_leak": net.arch.s_leak,
                 "cascade": net.arch.cascade},
        "seed": net.seed,
        "theta": net.theta.tolist(),
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_policy(path: str) -> NeuralPolicy:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "policy":
        raise ValueError("not a policy document")
    if doc.get("u_layout") != U_LAYOUT_VERSION:
        raise ValueError(
            f"policy file uses control layout {doc.get('u_layout')!r}, "
            f"this build expects {U_LAYOUT_VERSION!r}")
    a = doc["arch"]
    arch = NetArch(n_in=int(a["n_in"]), n_hidden=int(a["n_hidden"]),
                   n_out=int(a["n_out"]), s_leak=float(a["s_leak"]),
                   cascade=bool(a["cascade"]))
    return NeuralPolicy(arch, np.array(doc["theta"]), doc.get("seed"))
