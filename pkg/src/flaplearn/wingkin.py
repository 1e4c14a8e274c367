"""Wing kinematics: waveform parameterization, control deltas, schedules.

Each wing's attitude relative to the body follows a 1-3-2 Euler sequence
driven by three periodic waveforms (flapping phi, pitching theta, deviation
psi). A 6-component delta vector shifts selected waveform parameters
symmetrically or antisymmetrically across the two wings; a piecewise-linear
schedule of deltas over one period is the control input of the vehicle.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _core

#: clamp applied to every delta component before it touches the waveforms, rad
DELTA_MAX = _core.DELTA_MAX

#: number of schedule intervals per period; knots 0..N_KNOTS
N_KNOTS = 10

#: delta component order
DELTA_CHANNELS = ("dphi_m_s", "dtheta_0_s", "dphi_m_a",
                  "dphi_0_s", "dtheta_0_a", "dpsi_0_a")

#: version tag for the 60-dim flattened control layout (channel-major, knots
#: 1..10 of the period, slot of knot 10 structurally zero)
U_LAYOUT_VERSION = "u60-cm-z10-v1"


@dataclass(frozen=True)
class WingParams:
    """Waveform parameters for one wing. Angles in rad, f in Hz.

    phi_K in [0, 1) sharpens the flapping profile toward a triangle wave;
    theta_C > 0 flattens the pitching profile toward a square wave; psi_N is
    the deviation frequency multiple.
    """

    f: float = 11.75
    phi_m: float = 1.0
    phi_0: float = 0.0
    phi_K: float = 0.7
    theta_m: float = 0.8
    theta_0: float = 0.0
    theta_C: float = 2.0
    theta_a: float = 1.2
    psi_m: float = 0.05
    psi_0: float = 0.0
    psi_N: float = 2.0
    psi_a: float = 0.0
    # stroke-plane angle: -pi/2 lays the stroke plane flat so the default
    # waveform supports weight at identity attitude
    beta: float = -0.5 * np.pi

    def as_array(self) -> np.ndarray:
        return np.array([self.f, self.phi_m, self.phi_0, self.phi_K,
                         self.theta_m, self.theta_0, self.theta_C,
                         self.theta_a, self.psi_m, self.psi_0, self.psi_N,
                         self.psi_a, self.beta])

    @classmethod
    def from_array(cls, a: np.ndarray) -> "WingParams":
        a = np.asarray(a, dtype=float).reshape(13)
        return cls(*[float(x) for x in a])

    @property
    def period(self) -> float:
        return 1.0 / self.f


def reference_wing_params() -> WingParams:
    """Default near-hover waveform for the default morphology."""
    return WingParams()


def flap_angle(p: WingParams, t: float) -> tuple[float, float, float]:
    """phi(t) and its first two derivatives."""
    out = np.empty(9)
    _core._wing_angles(p.as_array(), float(t), out)
    return float(out[0]), float(out[1]), float(out[2])


def pitch_angle(p: WingParams, t: float) -> tuple[float, float, float]:
    """theta(t) and its first two derivatives."""
    out = np.empty(9)
    _core._wing_angles(p.as_array(), float(t), out)
    return float(out[3]), float(out[4]), float(out[5])


def deviation_angle(p: WingParams, t: float) -> tuple[float, float, float]:
    """psi(t) and its first two derivatives."""
    out = np.empty(9)
    _core._wing_angles(p.as_array(), float(t), out)
    return float(out[6]), float(out[7]), float(out[8])


def wing_attitude(p: WingParams, t: float, side: str) -> np.ndarray:
    """Rotation from wing frame to body frame at time t; side 'right'/'left'."""
    q = np.empty((3, 3))
    om = np.empty(3)
    omd = np.empty(3)
    _core._wing_state(p.as_array(), float(t), _side_sign(side), q, om, omd)
    return q


def wing_velocity_accel(p: WingParams, t: float, side: str):
    """(Q, Omega_w, Omegadot_w): attitude, body-relative angular velocity and
    acceleration of the wing, rate vectors expressed in the wing frame."""
    q = np.empty((3, 3))
    om = np.empty(3)
    omd = np.empty(3)
    _core._wing_state(p.as_array(), float(t), _side_sign(side), q, om, omd)
    return q, om, omd


def _side_sign(side: str) -> float:
    if side == "right":
        return 1.0
    if side == "left":
        return -1.0
    raise ValueError(f"side must be 'right' or 'left', got {side!r}")


def apply_delta(p_ref: WingParams, delta: np.ndarray) -> tuple[WingParams, WingParams]:
    """Right/left parameter pair for a 6-component delta vector.

    Components (clamped to +-DELTA_MAX): symmetric flapping amplitude,
    symmetric pitch offset, asymmetric flapping amplitude, symmetric flapping
    offset, asymmetric pitch offset, asymmetric deviation offset.
    """
    d = np.asarray(delta, dtype=float).reshape(6)
    out_r = np.empty(13)
    out_l = np.empty(13)
    ref = p_ref.as_array()
    _core._apply_delta(ref, d, 1.0, out_r)
    _core._apply_delta(ref, d, -1.0, out_l)
    return WingParams.from_array(out_r), WingParams.from_array(out_l)


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-linear delta schedule over one period.

    knots: (N_KNOTS+1, 6); the first and last rows must be zero so that the
    stitched multi-period schedule is continuous and each period starts from
    the reference waveform.
    """

    knots: np.ndarray
    period: float

    def __post_init__(self) -> None:
        k = np.asarray(self.knots, dtype=float)
        if k.shape != (N_KNOTS + 1, 6):
            raise ValueError(f"knots must be {(N_KNOTS + 1, 6)}, got {k.shape}")
        if not (np.allclose(k[0], 0.0, atol=1e-12) and np.allclose(k[-1], 0.0, atol=1e-12)):
            raise ValueError("schedule endpoints must be zero")
        k = k.copy()
        k[0] = 0.0
        k[-1] = 0.0
        object.__setattr__(self, "knots", k)
        if self.period <= 0.0:
            raise ValueError("period must be positive")

    @classmethod
    def zero(cls, period: float) -> "ControlSchedule":
        return cls(np.zeros((N_KNOTS + 1, 6)), period)

    @classmethod
    def from_u(cls, u: np.ndarray, period: float) -> "ControlSchedule":
        """Rebuild from the flat 60-dim layout (see U_LAYOUT_VERSION).

        u[c*10 + k] holds channel c at knot k+1; the slot of knot 10 is
        overwritten with the structural zero regardless of its value.
        """
        u = np.asarray(u, dtype=float).reshape(60)
        knots = np.zeros((N_KNOTS + 1, 6))
        for c in range(6):
            knots[1:N_KNOTS + 1, c] = u[c * N_KNOTS:(c + 1) * N_KNOTS]
        knots[N_KNOTS] = 0.0
        return cls(knots, period)

    def to_u(self) -> np.ndarray:
        u = np.empty(60)
        for c in range(6):
            u[c * N_KNOTS:(c + 1) * N_KNOTS] = self.knots[1:N_KNOTS + 1, c]
        return u

    def eval(self, t: float) -> np.ndarray:
        """Delta vector at local time t (clamped to [0, period])."""
        out = np.empty(6)
        _core._delta_at(self.knots, self.period, float(t), out)
        return out


def schedule_eval(schedule: ControlSchedule, t: float) -> np.ndarray:
    return schedule.eval(t)


def wing_pair_at(p_ref: WingParams, schedule: ControlSchedule, t: float):
    """Instantaneous right/left parameters under the schedule at local time t."""
    return apply_delta(p_ref, schedule.eval(t))
