"""Primitives on R^3 x SO(3): hat/vee maps, exponentials, attitude errors.

The configuration space of the vehicle body is the direct product R^3 x SO(3)
(position and attitude are composed independently; this is NOT SE(3), so the
exponential and the adjoint have no screw coupling).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS_ANGLE = 1e-6


def hat(v: np.ndarray) -> np.ndarray:
    """Map a 3-vector to the skew matrix with hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of hat for skew-symmetric input (antisymmetric part is used)."""
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def exp_so3(v: np.ndarray) -> np.ndarray:
    """Rodrigues exponential. Taylor branch below ||v|| = 1e-6 keeps the
    result orthogonal to machine precision without dividing by the angle."""
    v = np.asarray(v, dtype=float)
    th = float(np.linalg.norm(v))
    vh = hat(v)
    if th < _EPS_ANGLE:
        # 4th-order expansions of sin(t)/t and (1-cos t)/t^2
        a = 1.0 - th * th / 6.0 * (1.0 - th * th / 20.0)
        b = 0.5 * (1.0 - th * th / 12.0 * (1.0 - th * th / 30.0))
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / (th * th)
    return np.eye(3) + a * vh + b * (vh @ vh)


def log_so3(r: np.ndarray) -> np.ndarray:
    """Rotation vector of R (principal branch). Used by tests and the
    integrator order study; inverse of exp_so3 away from angle pi."""
    tr = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    th = float(np.arccos(tr))
    if th < _EPS_ANGLE:
        return 0.5 * vee(r - r.T)  # r - r^T = 2 sin(th) hat(axis)
    if np.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        m = (r + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(m), 0.0))
        k = int(np.argmax(axis))
        ax = m[:, k] / max(axis[k], 1e-15)
        ax = ax / np.linalg.norm(ax)
        # fix signs using the off-diagonal antisymmetry
        s = vee(r - r.T)
        if np.dot(s, ax) < 0:
            ax = -ax
        return th * ax
    return th / (2.0 * np.sin(th)) * np.array([
        r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def orthogonality_error(r: np.ndarray) -> float:
    """Frobenius norm of R^T R - I; the integrator drift metric."""
    r = np.asarray(r, dtype=float)
    return float(np.linalg.norm(r.T @ r - np.eye(3)))


def check_rotation(r: np.ndarray, tol: float = 1e-8) -> None:
    """Raise ValueError unless R is in SO(3) within tol."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    err = orthogonality_error(r)
    if err > tol:
        raise ValueError(f"matrix is not orthogonal: ||R^T R - I||_F = {err:.3e}")
    if np.linalg.det(r) < 0.0:
        raise ValueError("matrix has determinant -1 (reflection, not rotation)")


def attitude_error(r: np.ndarray, r_des: np.ndarray) -> np.ndarray:
    """Right-invariant-free attitude error 0.5 * vee(Rd^T R - R^T Rd).

    For R = Rd @ exp_so3(eta) this equals sin(||eta||)/||eta|| * eta, so it is
    a sin-scaled rotation vector; it degrades gracefully (norm <= 1) and is
    invertible for angles below pi/2.
    """
    e = 0.5 * (np.asarray(r_des).T @ np.asarray(r) - np.asarray(r).T @ np.asarray(r_des))
    return np.array([e[2, 1], e[0, 2], e[1, 0]])


def attitude_error_inverse(delta_r: np.ndarray) -> np.ndarray:
    """Rotation vector eta with attitude_error(Rd @ exp_so3(eta), Rd) == delta_r.

    Requires ||delta_r|| < 1. asin-scaled inverse of the sin-scaled map.
    """
    d = np.asarray(delta_r, dtype=float)
    n = float(np.linalg.norm(d))
    if n >= 1.0:
        raise ValueError(f"attitude error norm {n:.3f} >= 1 is outside the invertible range")
    if n < _EPS_ANGLE:
        # asin(n)/n = 1 + n^2/6 + 3 n^4/40 + ...
        scale = 1.0 + n * n / 6.0 * (1.0 + 0.45 * n * n)
    else:
        scale = np.arcsin(n) / n
    return scale * d


@dataclass
class GroupElement:
    """Element (x, R) of R^3 x SO(3)."""

    x: np.ndarray
    R: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float).reshape(3)
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)

    def compose(self, other: "GroupElement") -> "GroupElement":
        # direct product: translations add, rotations multiply
        return GroupElement(self.x + other.x, self.R @ other.R)

    def inverse(self) -> "GroupElement":
        return GroupElement(-self.x, self.R.T)

    @classmethod
    def identity(cls) -> "GroupElement":
        return cls(np.zeros(3), np.eye(3))


def ad_star_body(xi: np.ndarray) -> np.ndarray:
    """Coadjoint matrix of the body twist xi1 = [xdot, Omega]: diag(0, -hat(Omega)).

    The translational block is zero because the R^3 factor is abelian.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    out = np.zeros((6, 6))
    out[3:, 3:] = -hat(xi[3:])
    return out


def ad_star_wings(xi2: np.ndarray) -> np.ndarray:
    """Coadjoint matrix of the wing rates xi2 = [Omega_R, Omega_L]."""
    xi2 = np.asarray(xi2, dtype=float).reshape(6)
    out = np.zeros((6, 6))
    out[:3, :3] = -hat(xi2[:3])
    out[3:, 3:] = -hat(xi2[3:])
    return out
