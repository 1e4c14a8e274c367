"""Three-body flapping-wing dynamics on R^3 x SO(3).

The vehicle is a thorax plus two wings attached by spherical joints; wing
motion relative to the body is prescribed by the waveforms in `wingkin`, so
the free state is the body pose (x, R) with velocities (xdot inertial,
Omega body-frame). The reduced equations of motion are assembled from the
kinetic-energy metric blocks J, their time derivatives L, the coadjoint
matrices of both velocity channels, and aero/gravity wrenches coupled through
C = [[0, 0], [-Q_R, -Q_L]].

Conventions: inertial z up, gravity -g e3. The left wing mirrors the right
one through M = diag(1, -1, 1) (joint location, mass offset, inertia).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _core
from .liegroup import ad_star_body, ad_star_wings, check_rotation, hat
from .wingkin import ControlSchedule, WingParams, apply_delta

MIRROR = np.diag([1.0, -1.0, 1.0])


@dataclass(frozen=True)
class Morphology:
    """Mass, inertia, joint geometry and aero coefficients of the vehicle.

    Wing quantities describe the right wing; the left wing is its mirror
    image. I_W and rho_W are about/from the wing root frame origin is the
    joint; rho_W points to the wing COM. Strip geometry is a rectangular
    planform of `span` x `chord` split into `n_strips` spanwise panels with
    the aerodynamic centre `ac_frac` chord lengths behind the leading edge.
    """

    m_B: float = 4.0e-4
    m_W: float = 5.0e-5
    I_B: np.ndarray = field(default_factory=lambda: np.diag([1.0e-8, 5.5e-8, 5.5e-8]))
    I_W: np.ndarray = field(default_factory=lambda: np.diag([1.05e-8, 6.7e-9, 1.72e-8]))
    mu_R: np.ndarray = field(default_factory=lambda: np.array([0.0, 6.0e-3, 0.0]))
    rho_W: np.ndarray = field(default_factory=lambda: np.array([0.0, 2.5e-2, 0.0]))
    span: float = 5.0e-2
    chord: float = 4.0e-2
    n_strips: int = 10
    ac_frac: float = 0.25
    rho_air: float = 1.225
    grav: float = 9.81
    C_Lmax: float = 1.3
    C_D0: float = 0.4
    C_Dk: float = 1.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "I_B", np.asarray(self.I_B, dtype=float).reshape(3, 3))
        object.__setattr__(self, "I_W", np.asarray(self.I_W, dtype=float).reshape(3, 3))
        object.__setattr__(self, "mu_R", np.asarray(self.mu_R, dtype=float).reshape(3))
        object.__setattr__(self, "rho_W", np.asarray(self.rho_W, dtype=float).reshape(3))

    @property
    def m_total(self) -> float:
        return self.m_B + 2.0 * self.m_W

    @property
    def weight(self) -> float:
        return self.m_total * self.grav

    def strips(self) -> np.ndarray:
        """(n_strips, 3) table: spanwise station, panel area, chord offset."""
        n = self.n_strips
        dr = self.span / n
        r = (np.arange(n) + 0.5) * dr
        area = np.full(n, self.chord * dr)
        x_off = np.full(n, (0.5 - self.ac_frac) * self.chord)
        return np.column_stack([r, area, x_off])

    def pack(self) -> tuple:
        """Argument tuple consumed by the jitted kernels."""
        mu_L = MIRROR @ self.mu_R
        rho_L = MIRROR @ self.rho_W
        I_WL = MIRROR @ self.I_W @ MIRROR
        return (self.m_B, self.m_W, self.grav, self.rho_air, self.C_Lmax,
                self.C_D0, self.C_Dk, self.I_B, self.I_W, I_WL,
                self.mu_R, mu_L, self.rho_W, rho_L, self.strips())

    def content_hash(self) -> str:
        payload = {
            "m_B": self.m_B, "m_W": self.m_W,
            "I_B": self.I_B.tolist(), "I_W": self.I_W.tolist(),
            "mu_R": self.mu_R.tolist(), "rho_W": self.rho_W.tolist(),
            "span": self.span, "chord": self.chord,
            "n_strips": self.n_strips, "ac_frac": self.ac_frac,
            "rho_air": self.rho_air, "grav": self.grav,
            "C_Lmax": self.C_Lmax, "C_D0": self.C_D0, "C_Dk": self.C_Dk,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FreeState:
    """Body pose and velocity: x, R, xdot (inertial), Omega (body frame)."""

    x: np.ndarray
    R: np.ndarray
    v: np.ndarray
    Om: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float).reshape(3).copy()
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3).copy()
        self.v = np.asarray(self.v, dtype=float).reshape(3).copy()
        self.Om = np.asarray(self.Om, dtype=float).reshape(3).copy()

    def validate(self, tol: float = 1e-8) -> None:
        check_rotation(self.R, tol)
        for name in ("x", "v", "Om"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    def copy(self) -> "FreeState":
        return FreeState(self.x, self.R, self.v, self.Om)

    @classmethod
    def rest(cls) -> "FreeState":
        return cls(np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x, self.R.ravel(), self.v, self.Om])

    @classmethod
    def from_flat(cls, a: np.ndarray) -> "FreeState":
        a = np.asarray(a, dtype=float).reshape(18)
        return cls(a[:3], a[3:12].reshape(3, 3), a[12:15], a[15:18])


@dataclass(frozen=True)
class WingState:
    """Prescribed wing configuration at one instant (both wings)."""

    Q_R: np.ndarray
    Om_R: np.ndarray
    Omd_R: np.ndarray
    Q_L: np.ndarray
    Om_L: np.ndarray
    Omd_L: np.ndarray

    @property
    def xi2(self) -> np.ndarray:
        return np.concatenate([self.Om_R, self.Om_L])

    @property
    def xi2_dot(self) -> np.ndarray:
        return np.concatenate([self.Omd_R, self.Omd_L])


@dataclass(frozen=True)
class Wrench:
    """Generalized forces: f1 on the (xdot, Omega) channel, f2 on the wings.

    f1[:3] is an inertial-frame force, f1[3:] a body-frame moment about the
    body COM; f2 stacks the two wing-root moments in their wing frames.
    """

    f1: np.ndarray
    f2: np.ndarray


def wing_state_at(p_R: WingParams, p_L: WingParams, t: float) -> WingState:
    qr = np.empty((3, 3)); omr = np.empty(3); omdr = np.empty(3)
    ql = np.empty((3, 3)); oml = np.empty(3); omdl = np.empty(3)
    _core._wing_state(p_R.as_array(), float(t), 1.0, qr, omr, omdr)
    _core._wing_state(p_L.as_array(), float(t), -1.0, ql, oml, omdl)
    return WingState(qr, omr, omdr, ql, oml, omdl)


def coupling_matrix(ws: WingState) -> np.ndarray:
    """C = [[0, 0], [-Q_R, -Q_L]]: wing-channel wrenches seen by the body."""
    c = np.zeros((6, 6))
    c[3:, :3] = -ws.Q_R
    c[3:, 3:] = -ws.Q_L
    return c


def inertia_blocks(morph: Morphology, R: np.ndarray, Om: np.ndarray,
                   ws: WingState) -> tuple[np.ndarray, np.ndarray]:
    """Full 12x12 kinetic-energy metric J and its time derivative L.

    Velocity ordering [xdot, Omega, Omega_R, Omega_L]. J is symmetric positive
    definite; L = dJ/dt along the prescribed motion (finite-difference checked
    in tests). With massless wings J collapses to diag(m_B I, I_B) with zero
    coupling blocks.
    """
    (m_B, m_W, _, _, _, _, _, I_B, I_WR, I_WL,
     mu_R, mu_L, rho_R, rho_L, _) = morph.pack()
    J = np.empty((12, 12))
    L = np.empty((12, 12))
    _core._jl_blocks(np.asarray(R, dtype=float), np.asarray(Om, dtype=float),
                     ws.Q_R, ws.Om_R, ws.Q_L, ws.Om_L, m_B, m_W,
                     I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L, J, L)
    return J, L


def aero_wrench(morph: Morphology, state: FreeState, ws: WingState) -> Wrench:
    """Quasi-steady strip aerodynamics resolved on both channels."""
    fa1, fa2, _, _ = _forces_split(morph, state, ws, aero_on=True)
    return Wrench(fa1, fa2)


def gravity_wrench(morph: Morphology, state: FreeState, ws: WingState) -> Wrench:
    """Weight of all three bodies resolved on both channels."""
    _, _, fg1, fg2 = _forces_split(morph, state, ws, aero_on=False)
    return Wrench(fg1, fg2)


def _forces_split(morph: Morphology, state: FreeState, ws: WingState,
                  aero_on: bool):
    (m_B, m_W, grav, rho_air, clmax, cd0, cdk, _, _, _,
     mu_R, mu_L, rho_R, rho_L, strips) = morph.pack()
    fa1 = np.empty(6); fa2 = np.empty(6)
    fg1 = np.empty(6); fg2 = np.empty(6)
    _core._forces(state.R, state.v, ws.Q_R, ws.Om_R, ws.Q_L, ws.Om_L,
                  m_B, m_W, grav, rho_air, clmax, cd0, cdk,
                  mu_R, mu_L, strips, rho_R, rho_L, state.Om, aero_on,
                  fa1, fa2, fg1, fg2)
    return fa1, fa2, fg1, fg2


def eom_rhs(morph: Morphology, state: FreeState, t: float,
            p_ref: WingParams, schedule: ControlSchedule | None = None,
            aero_on: bool = True, diagnostics: bool = False):
    """Body-channel acceleration xi1dot = [xddot, Omegadot] at time t.

    Assembles J/L blocks, both coadjoint terms, the xi2dot feedthrough, the
    velocity transport term and the C-coupled aero/gravity wrenches, then
    solves the J11 system. With `diagnostics` also returns a dict with the
    J11 condition number and the instantaneous aerodynamic power.
    """
    if schedule is None:
        delta = np.zeros(6)
        period = p_ref.period
    else:
        period = schedule.period
        delta = schedule.eval(float(t) % period if period > 0 else 0.0)
    p_R, p_L = apply_delta(p_ref, delta)
    ws = wing_state_at(p_R, p_L, t)

    J, L = inertia_blocks(morph, state.R, state.Om, ws)
    j11 = J[:6, :6]
    cond = float(np.linalg.cond(j11))
    if not np.isfinite(cond) or cond > 1e12:
        raise ArithmeticError(f"singular body mass matrix, cond = {cond:.3e}")

    xi1 = np.concatenate([state.v, state.Om])
    xi2 = ws.xi2
    pi1 = j11 @ xi1 + J[:6, 6:] @ xi2

    ad1 = ad_star_body(xi1)
    rhs = ad1 @ pi1
    # transport term from the mixed-frame velocity convention
    rtv = state.R.T @ state.v
    rtp = state.R.T @ pi1[:3]
    rhs[3:] -= np.cross(rtv, rtp)
    rhs -= L[:6, :6] @ xi1 + L[:6, 6:] @ xi2 + J[:6, 6:] @ ws.xi2_dot

    awr = aero_wrench(morph, state, ws) if aero_on else Wrench(np.zeros(6), np.zeros(6))
    gwr = gravity_wrench(morph, state, ws)
    C = coupling_matrix(ws)
    rhs += awr.f1 + gwr.f1 - C @ (awr.f2 + gwr.f2)

    xi1_dot = np.linalg.solve(j11, rhs)
    if diagnostics:
        power = 0.0
        if aero_on:
            power = _aero_power(morph, state, ws)
        return xi1_dot, {"cond_J11": cond, "aero_power": power,
                         "wing_state": ws, "ad_star_wings": ad_star_wings(xi2)}
    return xi1_dot


def _aero_power(morph: Morphology, state: FreeState, ws: WingState) -> float:
    (m_B, m_W, grav, rho_air, clmax, cd0, cdk, _, _, _,
     mu_R, mu_L, rho_R, rho_L, strips) = morph.pack()
    rt_v = state.R.T @ state.v
    p = 0.0
    for Q, Omw, mu, side in ((ws.Q_R, ws.Om_R, mu_R, 1.0),
                             (ws.Q_L, ws.Om_L, mu_L, -1.0)):
        F = np.empty(3); M = np.empty(3)
        p += _core._wing_aero(rt_v, state.Om, Q, Omw, mu, side, strips,
                              rho_air, clmax, cd0, cdk, F, M)
    return float(p)


# --------------------------------------------------------- energy diagnostics


def kinetic_energy(morph: Morphology, state: FreeState, ws: WingState) -> float:
    J, _ = inertia_blocks(morph, state.R, state.Om, ws)
    xi = np.concatenate([state.v, state.Om, ws.xi2])
    return 0.5 * float(xi @ J @ xi)


def potential_energy(morph: Morphology, state: FreeState, ws: WingState) -> float:
    z_terms = morph.m_B * state.x[2]
    for Q, mu, rho in ((ws.Q_R, morph.mu_R, morph.rho_W),
                       (ws.Q_L, MIRROR @ morph.mu_R, MIRROR @ morph.rho_W)):
        a = mu + Q @ rho
        z_terms += morph.m_W * (state.x + state.R @ a)[2]
    return morph.grav * float(z_terms)


def joint_torques(morph: Morphology, state: FreeState, t: float,
                  p_R: WingParams, p_L: WingParams,
                  aero_on: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Joint torques driving each wing, from wing-body Newton-Euler.

    Independent of the Lagrangian assembly: given the body acceleration from
    eom_rhs, each wing's full motion is known, so its Newton and Euler
    balances yield the root constraint force and the actuation torque (wing
    frame). Used by the work-energy oracle.
    """
    ws = wing_state_at(p_R, p_L, t)
    xi1_dot = _eom_pair(morph, state, t, p_R, p_L, aero_on)
    acc, omdot = xi1_dot[:3], xi1_dot[3:]

    (m_B, m_W, grav, rho_air, clmax, cd0, cdk, _, I_WR, I_WL,
     mu_R, mu_L, rho_R, rho_L, strips) = morph.pack()
    R, v, Om = state.R, state.v, state.Om
    rt_v = R.T @ v
    g_vec = np.array([0.0, 0.0, -grav])
    taus = []
    for Q, Omw, Omdw, mu, rho, I_W, side in (
            (ws.Q_R, ws.Om_R, ws.Omd_R, mu_R, rho_R, I_WR, 1.0),
            (ws.Q_L, ws.Om_L, ws.Omd_L, mu_L, rho_L, I_WL, -1.0)):
        a = mu + Q @ rho
        d = Q @ np.cross(Omw, rho)
        # wing COM acceleration (inertial)
        ddx_w = (acc + R @ (np.cross(Om, np.cross(Om, a) + d)
                            + np.cross(omdot, a) + np.cross(Om, d)
                            + Q @ (np.cross(Omw, np.cross(Omw, rho))
                                   + np.cross(Omdw, rho))))
        # total wing angular velocity/acceleration in the wing frame
        om_w = Q.T @ Om + Omw
        omd_w = -np.cross(Omw, Q.T @ Om) + Q.T @ omdot + Omdw
        F_aero = np.zeros(3)
        M_aero = np.zeros(3)
        if aero_on:
            _core._wing_aero(rt_v, Om, Q, Omw, mu, side, strips, rho_air,
                             clmax, cd0, cdk, F_aero, M_aero)
        S = R @ Q   # wing frame -> inertial
        f_joint = m_W * (ddx_w - g_vec) - S @ F_aero          # inertial
        f_joint_w = S.T @ f_joint
        m_com = M_aero - np.cross(rho, F_aero)                # aero about COM
        tau = I_W @ omd_w + np.cross(om_w, I_W @ om_w) - m_com + np.cross(rho, f_joint_w)
        taus.append(tau)
    return taus[0], taus[1]


def _eom_pair(morph: Morphology, state: FreeState, t: float,
              p_R: WingParams, p_L: WingParams, aero_on: bool) -> np.ndarray:
    """eom_rhs with an explicit right/left parameter pair (no schedule)."""
    (m_B, m_W, grav, rho_air, clmax, cd0, cdk, I_B, I_WR, I_WL,
     mu_R, mu_L, rho_R, rho_L, strips) = morph.pack()
    acc = np.empty(3)
    omd = np.empty(3)
    _core._eom(float(t), state.R, state.v, state.Om,
               p_R.as_array(), p_L.as_array(), m_B, m_W, grav, rho_air,
               clmax, cd0, cdk, I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L,
               strips, aero_on, acc, omd)
    return np.concatenate([acc, omd])


def linear_momentum(morph: Morphology, state: FreeState, ws: WingState) -> np.ndarray:
    """Total linear momentum (inertial frame)."""
    J, _ = inertia_blocks(morph, state.R, state.Om, ws)
    xi = np.concatenate([state.v, state.Om, ws.xi2])
    return (J @ xi)[:3]


def angular_momentum_origin(morph: Morphology, state: FreeState,
                            ws: WingState) -> np.ndarray:
    """Total angular momentum about the inertial origin (inertial frame)."""
    J, _ = inertia_blocks(morph, state.R, state.Om, ws)
    xi = np.concatenate([state.v, state.Om, ws.xi2])
    pi1 = (J @ xi)[:6]
    p, h = pi1[:3], pi1[3:]
    return state.R @ h + np.cross(state.x, p)
