"""Jitted kernels for the flapping-wing dynamics and Lie-group integrators.

Everything here operates on plain float64 arrays so numba can compile it; the
public modules (wingkin, dynamics, integrate) wrap these kernels with typed
dataclasses. The generic, pure-Python integrator in `integrate` defines the
reference semantics; `tests/test_integrate.py` pins this module against it.

Array layouts
-------------
wing params row (13,): [f, phi_m, phi_0, phi_K, theta_m, theta_0, theta_C,
                        theta_a, psi_m, psi_0, psi_N, psi_a, beta]
delta (6,):            [dphi_m_s, dtheta_0_s, dphi_m_a, dphi_0_s,
                        dtheta_0_a, dpsi_0_a]
strips (n, 3):         [spanwise station r_i, panel area c_i*dr, chordwise
                        offset of the aerodynamic centre]
morph scalars:         m_B, m_W (per wing), grav, rho_air, C_Lmax, C_D0, C_Dk
"""
from __future__ import annotations

import numpy as np
from numba import njit

DELTA_MAX = 0.3

# ---------------------------------------------------------------- small linalg


@njit(cache=True, inline="always")
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True, inline="always")
def _mv3(m, v, out):
    out[0] = m[0, 0] * v[0] + m[0, 1] * v[1] + m[0, 2] * v[2]
    out[1] = m[1, 0] * v[0] + m[1, 1] * v[1] + m[1, 2] * v[2]
    out[2] = m[2, 0] * v[0] + m[2, 1] * v[1] + m[2, 2] * v[2]


@njit(cache=True, inline="always")
def _mtv3(m, v, out):
    out[0] = m[0, 0] * v[0] + m[1, 0] * v[1] + m[2, 0] * v[2]
    out[1] = m[0, 1] * v[0] + m[1, 1] * v[1] + m[2, 1] * v[2]
    out[2] = m[0, 2] * v[0] + m[1, 2] * v[1] + m[2, 2] * v[2]


@njit(cache=True)
def _mm33(a, b, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]


@njit(cache=True)
def _hat(v, out):
    out[0, 0] = 0.0
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 1] = 0.0
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    out[2, 2] = 0.0


@njit(cache=True)
def _exp_so3(v, out):
    th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    th = np.sqrt(th2)
    if th < 1e-6:
        a = 1.0 - th2 / 6.0 * (1.0 - th2 / 20.0)
        b = 0.5 * (1.0 - th2 / 12.0 * (1.0 - th2 / 30.0))
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    h = np.empty((3, 3))
    _hat(v, h)
    for i in range(3):
        for j in range(3):
            hh = h[i, 0] * h[0, j] + h[i, 1] * h[1, j] + h[i, 2] * h[2, j]
            out[i, j] = a * h[i, j] + b * hh
        out[i, i] += 1.0


@njit(cache=True)
def _solve6(a, b, out):
    # Gaussian elimination with partial pivoting on a copy; 6x6 only
    m = a.copy()
    r = b.copy()
    for col in range(6):
        piv = col
        best = abs(m[col, col])
        for row in range(col + 1, 6):
            if abs(m[row, col]) > best:
                best = abs(m[row, col])
                piv = row
        if piv != col:
            for j in range(6):
                tmp = m[col, j]
                m[col, j] = m[piv, j]
                m[piv, j] = tmp
            tmp = r[col]
            r[col] = r[piv]
            r[piv] = tmp
        d = m[col, col]
        for row in range(col + 1, 6):
            f = m[row, col] / d
            if f != 0.0:
                for j in range(col, 6):
                    m[row, j] -= f * m[col, j]
                r[row] -= f * r[col]
    for row in range(5, -1, -1):
        s = r[row]
        for j in range(row + 1, 6):
            s -= m[row, j] * out[j]
        out[row] = s / m[row, row]


# ------------------------------------------------------------------ waveforms


@njit(cache=True)
def _wing_angles(wp, t, out):
    """Flap/pitch/deviation angles and their first two time derivatives.

    out (9,): [phi, dphi, ddphi, theta, dtheta, ddtheta, psi, dpsi, ddpsi]
    """
    f = wp[0]
    w = 2.0 * np.pi * f
    # flapping: clipped-sine profile, sharpness phi_K in [0, 1)
    phi_m, phi_0, k = wp[1], wp[2], wp[3]
    cwt = np.cos(w * t)
    swt = np.sin(w * t)
    if k < 1e-10:
        out[0] = phi_m * cwt + phi_0
        out[1] = -phi_m * w * swt
        out[2] = -phi_m * w * w * cwt
    else:
        amp = phi_m / np.arcsin(k)
        g = k * cwt
        gd = -k * w * swt
        gdd = -k * w * w * cwt
        den = np.sqrt(1.0 - g * g)
        out[0] = amp * np.arcsin(g) + phi_0
        out[1] = amp * gd / den
        out[2] = amp * (gdd / den + g * gd * gd / (den * den * den))
    # pitching: flattened-sine profile, sharpness theta_C > 0
    th_m, th_0, cshp, th_a = wp[4], wp[5], wp[6], wp[7]
    if cshp < 1e-10:
        s2 = np.sin(w * t + th_a)
        c2 = np.cos(w * t + th_a)
        out[3] = th_m * s2 + th_0
        out[4] = th_m * w * c2
        out[5] = -th_m * w * w * s2
    else:
        amp = th_m / np.tanh(cshp)
        u = cshp * np.sin(w * t + th_a)
        ud = cshp * w * np.cos(w * t + th_a)
        udd = -cshp * w * w * np.sin(w * t + th_a)
        th = np.tanh(u)
        sech2 = 1.0 - th * th
        out[3] = amp * th + th_0
        out[4] = amp * sech2 * ud
        out[5] = amp * sech2 * (udd - 2.0 * th * ud * ud)
    # deviation: plain cosine at psi_N x the flapping frequency
    ps_m, ps_0, ps_n, ps_a = wp[8], wp[9], wp[10], wp[11]
    wn = ps_n * w
    out[6] = ps_m * np.cos(wn * t + ps_a) + ps_0
    out[7] = -ps_m * wn * np.sin(wn * t + ps_a)
    out[8] = -ps_m * wn * wn * np.cos(wn * t + ps_a)


@njit(cache=True)
def _wing_state(wp, t, side, q_out, om_out, omd_out):
    """Wing attitude Q (body->wing frame on the right), rate and acceleration.

    side = +1.0 for the right wing, -1.0 for the left. The composition is the
    1-3-2 sequence Q = E2(beta) E1(side*phi) E3(-side*psi) E2(theta); the left
    wing mirrors the right one through M = diag(1,-1,1).
    """
    ang = np.empty(9)
    _wing_angles(wp, t, ang)
    phi, dphi, ddphi = ang[0], ang[1], ang[2]
    theta, dtheta, ddtheta = ang[3], ang[4], ang[5]
    psi, dpsi, ddpsi = ang[6], ang[7], ang[8]
    beta = wp[12]

    e1 = np.empty((3, 3))
    e2 = np.empty((3, 3))
    e3 = np.empty((3, 3))
    eb = np.empty((3, 3))
    v = np.empty(3)
    v[0] = side * phi
    v[1] = 0.0
    v[2] = 0.0
    _exp_so3(v, e1)
    v[0] = 0.0
    v[2] = -side * psi
    _exp_so3(v, e3)
    v[2] = 0.0
    v[1] = theta
    _exp_so3(v, e2)
    v[1] = beta
    _exp_so3(v, eb)
    t1 = np.empty((3, 3))
    t2 = np.empty((3, 3))
    _mm33(eb, e1, t1)
    _mm33(t1, e3, t2)
    _mm33(t2, e2, q_out)

    # body-relative angular velocity in the wing frame:
    #   Omega = side*dphi*b1 + dpsi*b2 + dtheta*e2,
    #   b1 = [ct*cp, side*sp, st*cp], b2 = [side*st, 0, -side*ct]
    ct = np.cos(theta)
    st = np.sin(theta)
    cp = np.cos(psi)
    sp = np.sin(psi)
    b1x, b1y, b1z = ct * cp, side * sp, st * cp
    b2x, b2z = side * st, -side * ct
    om_out[0] = side * dphi * b1x + dpsi * b2x
    om_out[1] = side * dphi * b1y + dtheta
    om_out[2] = side * dphi * b1z + dpsi * b2z
    # db1, db2 via theta/psi rates
    db1x = -st * cp * dtheta - ct * sp * dpsi
    db1y = side * cp * dpsi
    db1z = ct * cp * dtheta - st * sp * dpsi
    db2x = side * ct * dtheta
    db2z = side * st * dtheta
    omd_out[0] = side * (ddphi * b1x + dphi * db1x) + ddpsi * b2x + dpsi * db2x
    omd_out[1] = side * (ddphi * b1y + dphi * db1y) + ddtheta
    omd_out[2] = side * (ddphi * b1z + dphi * db1z) + ddpsi * b2z + dpsi * db2z


@njit(cache=True)
def _delta_at(knots, period, t_local, out):
    """Piecewise-linear schedule value at t_local in [0, period]."""
    n = knots.shape[0] - 1
    u = t_local / period * n
    if u <= 0.0:
        for j in range(6):
            out[j] = knots[0, j]
        return
    if u >= n:
        for j in range(6):
            out[j] = knots[n, j]
        return
    i = int(u)
    frac = u - i
    for j in range(6):
        out[j] = knots[i, j] * (1.0 - frac) + knots[i + 1, j] * frac


@njit(cache=True)
def _apply_delta(wp_ref, d, side, out):
    """Deviated waveform parameters for one side; deltas clamped to +-0.3 rad.

    The symmetric components act identically on both wings, the asymmetric
    ones with opposite signs; the stroke-offset delta is symmetric-only and
    the deviation-offset delta asymmetric-only.
    """
    for j in range(13):
        out[j] = wp_ref[j]
    c = np.empty(6)
    for j in range(6):
        x = d[j]
        if x > DELTA_MAX:
            x = DELTA_MAX
        elif x < -DELTA_MAX:
            x = -DELTA_MAX
        c[j] = x
    out[1] += c[0] + side * c[2]   # phi_m
    out[5] += c[1] + side * c[4]   # theta_0
    out[2] += c[3]                 # phi_0, symmetric only
    out[9] += side * c[5]          # psi_0, asymmetric only


# ------------------------------------------------------------------- dynamics


@njit(cache=True)
def _jl_blocks(R, Om, QR, OmR, QL, OmL, m_B, m_W, I_B, I_WR, I_WL,
               mu_R, mu_L, rho_R, rho_L, J, L):
    """Kinetic-energy metric J and its time derivative L, both 12x12.

    Velocity ordering: [xdot (inertial), Omega (body), Omega_R, Omega_L]
    (wing rates are body-relative, in each wing's own frame). J is symmetric
    positive definite; L = dJ/dt along the prescribed motion.
    """
    J[:, :] = 0.0
    L[:, :] = 0.0
    m_tot = m_B + 2.0 * m_W
    for i in range(3):
        J[i, i] = m_tot
    # body inertia seed for the Omega block
    for i in range(3):
        for j in range(3):
            J[3 + i, 3 + j] = I_B[i, j]

    tmp = np.empty(3)
    a_w = np.empty(3)
    d_w = np.empty(3)
    s = np.zeros(3)
    k = np.zeros(3)
    ah = np.empty((3, 3))
    dh = np.empty((3, 3))
    rh = np.empty((3, 3))
    oh = np.empty((3, 3))
    m1 = np.empty((3, 3))
    m2 = np.empty((3, 3))
    m3 = np.empty((3, 3))
    qiw = np.empty((3, 3))

    for w in range(2):
        if w == 0:
            Q = QR
            Omw = OmR
            mu = mu_R
            rho = rho_R
            I_W = I_WR
            c0 = 6
        else:
            Q = QL
            Omw = OmL
            mu = mu_L
            rho = rho_L
            I_W = I_WL
            c0 = 9
        # a = mu + Q rho, d = Q (Omw x rho)
        _mv3(Q, rho, tmp)
        for i in range(3):
            a_w[i] = mu[i] + tmp[i]
        _cross(Omw, rho, tmp)
        _mv3(Q, tmp, d_w)
        for i in range(3):
            s[i] += m_W * a_w[i]
            k[i] += m_W * d_w[i]
        _hat(a_w, ah)
        _hat(d_w, dh)
        _hat(rho, rh)
        _hat(Omw, oh)
        _mm33(Q, I_W, qiw)

        # J_OmegaOmega += -m ah ah + Q I_W Q^T; the sandwich is averaged with
        # its transpose so J is symmetric to the bit, not just to rounding
        _mm33(ah, ah, m1)
        _mm33(qiw, Q.T.copy(), m2)
        for i in range(3):
            for j in range(3):
                J[3 + i, 3 + j] += -m_W * m1[i, j] + 0.5 * (m2[i, j] + m2[j, i])
        # J_Omega,w = -m ah Q rh + Q I_W
        _mm33(Q, rh, m1)
        _mm33(ah, m1, m2)
        for i in range(3):
            for j in range(3):
                J[3 + i, c0 + j] = -m_W * m2[i, j] + qiw[i, j]
                J[c0 + j, 3 + i] = J[3 + i, c0 + j]
        # J_x,w = -m R Q rh
        _mm33(R, m1, m2)
        for i in range(3):
            for j in range(3):
                J[i, c0 + j] = -m_W * m2[i, j]
                J[c0 + j, i] = J[i, c0 + j]
        # J_w,w = -m rh rh + I_W  (constant in time => no L contribution)
        _mm33(rh, rh, m3)
        for i in range(3):
            for j in range(3):
                J[c0 + i, c0 + j] = -m_W * m3[i, j] + I_W[i, j]

        # ---- L pieces for this wing
        # d/dt J_OmegaOmega: -m (dh ah + ah dh) + Q (oh I_W - I_W oh) Q^T
        _mm33(dh, ah, m1)
        _mm33(ah, dh, m2)
        for i in range(3):
            for j in range(3):
                L[3 + i, 3 + j] += -m_W * (m1[i, j] + m2[i, j])
        _mm33(oh, I_W, m1)
        _mm33(I_W, oh, m2)
        for i in range(3):
            for j in range(3):
                m3[i, j] = m1[i, j] - m2[i, j]
        _mm33(Q, m3, m1)
        _mm33(m1, Q.T.copy(), m2)
        for i in range(3):
            for j in range(3):
                L[3 + i, 3 + j] += 0.5 * (m2[i, j] + m2[j, i])
        # d/dt J_Omega,w = -m (dh Q rh + ah Q oh rh) + Q oh I_W
        _mm33(Q, rh, m1)
        _mm33(dh, m1, m2)
        _mm33(oh, rh, m3)
        _mm33(Q, m3, m1)
        ahm = np.empty((3, 3))
        _mm33(ah, m1, ahm)
        qoi = np.empty((3, 3))
        _mm33(Q, oh, m3)
        _mm33(m3, I_W, qoi)
        for i in range(3):
            for j in range(3):
                L[3 + i, c0 + j] = -m_W * (m2[i, j] + ahm[i, j]) + qoi[i, j]
                L[c0 + j, 3 + i] = L[3 + i, c0 + j]
        # d/dt J_x,w = -m R (OmHat Q rh + Q oh rh)
        _hat(Om, m3)
        qrh = np.empty((3, 3))
        _mm33(Q, rh, qrh)
        _mm33(m3, qrh, m1)
        _mm33(oh, rh, m2)
        qor = np.empty((3, 3))
        _mm33(Q, m2, qor)
        for i in range(3):
            for j in range(3):
                m2[i, j] = m1[i, j] + qor[i, j]
        _mm33(R, m2, m1)
        for i in range(3):
            for j in range(3):
                L[i, c0 + j] = -m_W * m1[i, j]
                L[c0 + j, i] = L[i, c0 + j]

    # cross block J_x,Omega = -R sh ; L via sdot = k and Rdot = R OmHat
    sh = np.empty((3, 3))
    _hat(s, sh)
    _mm33(R, sh, m1)
    for i in range(3):
        for j in range(3):
            J[i, 3 + j] = -m1[i, j]
            J[3 + j, i] = -m1[i, j]
    _hat(Om, oh)
    kh = np.empty((3, 3))
    _hat(k, kh)
    _mm33(oh, sh, m2)
    for i in range(3):
        for j in range(3):
            m3[i, j] = m2[i, j] + kh[i, j]
    _mm33(R, m3, m1)
    for i in range(3):
        for j in range(3):
            L[i, 3 + j] = -m1[i, j]
            L[3 + j, i] = -m1[i, j]


@njit(cache=True)
def _wing_aero(Rt_v, Om, Q, Omw, mu, side, strips, rho_air, clmax, cd0, cdk,
               F_out, M_out):
    """Quasi-steady strip forces for one wing: root wrench in the wing frame.

    Translational lift/drag only; C_L = C_Lmax sin(2a), C_D = C_D0 +
    C_Dk (1 - cos 2a) on the chord-plane flow. Returns the aerodynamic power
    (force dot strip velocity, <= 0 in still air).
    """
    F_out[0] = F_out[1] = F_out[2] = 0.0
    M_out[0] = M_out[1] = M_out[2] = 0.0
    r_pt = np.empty(3)
    o = np.empty(3)
    tmp = np.empty(3)
    u = np.empty(3)
    power = 0.0
    for i in range(strips.shape[0]):
        r_pt[0] = strips[i, 2]
        r_pt[1] = side * strips[i, 0]
        r_pt[2] = 0.0
        # strip velocity in the wing frame: Q^T(R^T v + Om x (mu + Q r)) + Omw x r
        _mv3(Q, r_pt, tmp)
        for j in range(3):
            o[j] = mu[j] + tmp[j]
        _cross(Om, o, tmp)
        for j in range(3):
            tmp[j] += Rt_v[j]
        _mtv3(Q, tmp, u)
        _cross(Omw, r_pt, tmp)
        for j in range(3):
            u[j] += tmp[j]
        ux = u[0]
        uz = u[2]
        vsq = ux * ux + uz * uz
        if vsq < 1e-16:
            continue
        vmag = np.sqrt(vsq)
        q = 0.5 * rho_air * strips[i, 1]
        # drag along -(ux, 0, uz); lift perpendicular, opposing the normal
        # velocity component. Both written smoothly in (ux, uz).
        cd = cd0 + 2.0 * cdk * uz * uz / vsq
        fdx = -q * cd * vmag * ux
        fdz = -q * cd * vmag * uz
        cl_fac = -2.0 * clmax * ux * uz / (vsq * vmag) * q * vsq
        flx = cl_fac * (-uz)
        flz = cl_fac * ux
        fx = fdx + flx
        fz = fdz + flz
        F_out[0] += fx
        F_out[2] += fz
        # moment about the wing root
        M_out[0] += r_pt[1] * fz
        M_out[1] += r_pt[2] * fx - r_pt[0] * fz
        M_out[2] += -r_pt[1] * fx
        power += fx * ux + fz * uz
    return power


@njit(cache=True)
def _forces(R, v, QR, OmR, QL, OmL, m_B, m_W, grav, rho_air, clmax, cd0, cdk,
            mu_R, mu_L, strips, rho_R, rho_L, Om, aero_on,
            fa1, fa2, fg1, fg2):
    """Generalized aero/gravity forces on the body and wing channels.

    fa1/fg1 act on (xdot, Omega): inertial force and body-frame moment about
    the body COM from wrenches transmitted at the wing roots. fa2/fg2 are the
    root moments in each wing frame; the coupling matrix C maps them onto the
    body channel as f1 - C f2.
    """
    for j in range(6):
        fa1[j] = 0.0
        fa2[j] = 0.0
        fg1[j] = 0.0
        fg2[j] = 0.0
    m_tot = m_B + 2.0 * m_W
    fg1[2] = -m_tot * grav

    Rt_v = np.empty(3)
    _mtv3(R, v, Rt_v)
    gI = np.empty(3)
    gI[0] = 0.0
    gI[1] = 0.0
    gI[2] = -grav
    gB = np.empty(3)
    _mtv3(R, gI, gB)

    Fw = np.empty(3)
    Mw = np.empty(3)
    tmp = np.empty(3)
    tm2 = np.empty(3)
    power = 0.0
    for w in range(2):
        if w == 0:
            Q = QR
            Omw = OmR
            mu = mu_R
            rho = rho_R
            side = 1.0
            c0 = 0
        else:
            Q = QL
            Omw = OmL
            mu = mu_L
            rho = rho_L
            side = -1.0
            c0 = 3
        if aero_on:
            power += _wing_aero(Rt_v, Om, Q, Omw, mu, side, strips,
                                rho_air, clmax, cd0, cdk, Fw, Mw)
            # translational: rotate the root force to the inertial frame
            _mv3(Q, Fw, tmp)
            _mv3(R, tmp, tm2)
            for j in range(3):
                fa1[j] += tm2[j]
            # moment about the body COM: mu x (Q F)
            _cross(mu, tmp, tm2)
            for j in range(3):
                fa1[3 + j] += tm2[j]
            for j in range(3):
                fa2[c0 + j] = Mw[j]
        # gravity on this wing, resolved at the root
        fw_g = np.empty(3)
        _mtv3(Q, gB, fw_g)
        for j in range(3):
            fw_g[j] *= m_W
        _mv3(Q, fw_g, tmp)       # back to body frame
        _cross(mu, tmp, tm2)
        for j in range(3):
            fg1[3 + j] += tm2[j]
        _cross(rho, fw_g, tmp)
        for j in range(3):
            fg2[c0 + j] = tmp[j]
    return power


@njit(cache=True)
def _eom(t, R, v, Om, wpR, wpL, m_B, m_W, grav, rho_air, clmax, cd0, cdk,
         I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L, strips, aero_on,
         acc, omdot):
    """Body-channel reduced equations of motion.

    Solves J11 xi1dot = ad*_{xi1}(J11 xi1 + J12 xi2) - [0; (R^T v) x (R^T p)]
                        - L11 xi1 - L12 xi2 - J12 xi2dot + f1 - C f2
    for xi1dot = [acc, omdot]. The transport term exists because xi1 mixes an
    inertial translational velocity with a body-frame angular velocity, so the
    kinetic energy is not left-invariant under the direct product. Returns the
    instantaneous aerodynamic power (diagnostic).
    """
    QR = np.empty((3, 3))
    OmR = np.empty(3)
    OmdR = np.empty(3)
    QL = np.empty((3, 3))
    OmL = np.empty(3)
    OmdL = np.empty(3)
    _wing_state(wpR, t, 1.0, QR, OmR, OmdR)
    _wing_state(wpL, t, -1.0, QL, OmL, OmdL)

    J = np.empty((12, 12))
    L = np.empty((12, 12))
    _jl_blocks(R, Om, QR, OmR, QL, OmL, m_B, m_W, I_B, I_WR, I_WL,
               mu_R, mu_L, rho_R, rho_L, J, L)

    xi1 = np.empty(6)
    xi2 = np.empty(6)
    xi2d = np.empty(6)
    for j in range(3):
        xi1[j] = v[j]
        xi1[3 + j] = Om[j]
        xi2[j] = OmR[j]
        xi2[3 + j] = OmL[j]
        xi2d[j] = OmdR[j]
        xi2d[3 + j] = OmdL[j]

    # momentum pi1 = J11 xi1 + J12 xi2
    pi1 = np.zeros(6)
    for i in range(6):
        s = 0.0
        for j in range(6):
            s += J[i, j] * xi1[j] + J[i, 6 + j] * xi2[j]
        pi1[i] = s

    fa1 = np.empty(6)
    fa2 = np.empty(6)
    fg1 = np.empty(6)
    fg2 = np.empty(6)
    power = _forces(R, v, QR, OmR, QL, OmL, m_B, m_W, grav, rho_air,
                    clmax, cd0, cdk, mu_R, mu_L, strips, rho_R, rho_L,
                    Om, aero_on, fa1, fa2, fg1, fg2)

    rhs = np.zeros(6)
    # ad*_{xi1} pi1 : translational rows zero, rotational rows -Om x h
    h = pi1[3:]
    tmp = np.empty(3)
    _cross(Om, h, tmp)
    for j in range(3):
        rhs[3 + j] -= tmp[j]
    # transport term -(R^T v) x (R^T p)
    rtv = np.empty(3)
    rtp = np.empty(3)
    _mtv3(R, v, rtv)
    _mtv3(R, pi1[:3].copy(), rtp)
    _cross(rtv, rtp, tmp)
    for j in range(3):
        rhs[3 + j] -= tmp[j]
    # -L11 xi1 - L12 xi2 - J12 xi2dot
    for i in range(6):
        s = 0.0
        for j in range(6):
            s += L[i, j] * xi1[j] + L[i, 6 + j] * xi2[j] + J[i, 6 + j] * xi2d[j]
        rhs[i] -= s
    # forces: f1 - C f2 with C = [[0,0],[-Q_R,-Q_L]]
    for i in range(6):
        rhs[i] += fa1[i] + fg1[i]
    f2 = np.empty(6)
    for j in range(6):
        f2[j] = fa2[j] + fg2[j]
    _mv3(QR, f2[:3].copy(), tmp)
    for j in range(3):
        rhs[3 + j] += tmp[j]
    _mv3(QL, f2[3:].copy(), tmp)
    for j in range(3):
        rhs[3 + j] += tmp[j]

    j11 = J[:6, :6].copy()
    out = np.empty(6)
    _solve6(j11, rhs, out)
    for j in range(3):
        acc[j] = out[j]
        omdot[j] = out[3 + j]
    return power


@njit(cache=True)
def _eom_scheduled(t, t_lo, R, v, Om, wp_ref, knots, period,
                   m_B, m_W, grav, rho_air, clmax, cd0, cdk,
                   I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L, strips,
                   aero_on, acc, omdot):
    """EOM with the waveform deltas interpolated from a knot table.

    t_lo is the start of the period the schedule covers; waveforms see the
    absolute time t (phase continuity across periods).
    """
    d = np.empty(6)
    _delta_at(knots, period, t - t_lo, d)
    wpR = np.empty(13)
    wpL = np.empty(13)
    _apply_delta(wp_ref, d, 1.0, wpR)
    _apply_delta(wp_ref, d, -1.0, wpL)
    return _eom(t, R, v, Om, wpR, wpL, m_B, m_W, grav, rho_air, clmax,
                cd0, cdk, I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L,
                strips, aero_on, acc, omdot)


# ---------------------------------------------------------------- integrators


@njit(cache=True)
def _rollout_cg(A, bw, cw, n_steps, h, t0, x0, R0, v0, Om0,
                wp_ref, knots, period,
                m_B, m_W, grav, rho_air, clmax, cd0, cdk,
                I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L, strips,
                aero_on, want_power, save_every,
                xs, Rs, vs, Oms, ts):
    """Explicit Crouch-Grossman rollout over one schedule window.

    The attitude factor advances through ordered products of exponentials of
    the stage angular velocities; the position factor is abelian, so it
    advances through plain weighted sums. Saved rows: every `save_every`-th
    step boundary, starting with the initial state. Returns the time integral
    of aerodynamic power (rectangle rule at step ends).
    """
    ns = A.shape[0]
    x = x0.copy()
    R = R0.copy()
    v = v0.copy()
    Om = Om0.copy()

    sv = np.empty((ns, 3))     # stage translational velocities
    sOm = np.empty((ns, 3))    # stage angular velocities
    sZ = np.empty((ns, 6))     # stage accelerations
    acc = np.empty(3)
    omd = np.empty(3)
    Rst = np.empty((3, 3))
    Rtm = np.empty((3, 3))
    ex = np.empty((3, 3))
    wv = np.empty(3)

    irow = 0
    xs[0] = x
    Rs[0] = R
    vs[0] = v
    Oms[0] = Om
    ts[0] = t0
    work = 0.0

    for step in range(n_steps):
        tstep = t0 + step * h
        for i in range(ns):
            # stage group element and velocity
            for j in range(3):
                wv[j] = 0.0
            Rst[:, :] = R
            xi_v = v.copy()
            xi_O = Om.copy()
            for j in range(i):
                aij = A[i, j]
                if aij != 0.0:
                    for m in range(3):
                        wv[m] = h * aij * sOm[j, m]
                    _exp_so3(wv, ex)
                    _mm33(Rst, ex, Rtm)
                    Rst[:, :] = Rtm
                    for m in range(3):
                        xi_v[m] += h * aij * sZ[j, m]
                        xi_O[m] += h * aij * sZ[j, 3 + m]
            tt = tstep + cw[i] * h
            p = _eom_scheduled(tt, t0, Rst, xi_v, xi_O, wp_ref, knots, period,
                               m_B, m_W, grav, rho_air, clmax, cd0, cdk,
                               I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L,
                               strips, aero_on, acc, omd)
            for m in range(3):
                sv[i, m] = xi_v[m]
                sOm[i, m] = xi_O[m]
                sZ[i, m] = acc[m]
                sZ[i, 3 + m] = omd[m]
        # update
        for i in range(ns):
            bi = bw[i]
            if bi != 0.0:
                for m in range(3):
                    wv[m] = h * bi * sOm[i, m]
                _exp_so3(wv, ex)
                _mm33(R, ex, Rtm)
                R[:, :] = Rtm
                for m in range(3):
                    x[m] += h * bi * sv[i, m]
                    v[m] += h * bi * sZ[i, m]
                    Om[m] += h * bi * sZ[i, 3 + m]
        if want_power:
            p = _eom_scheduled(t0 + (step + 1) * h, t0, R, v, Om, wp_ref,
                               knots, period, m_B, m_W, grav, rho_air, clmax,
                               cd0, cdk, I_B, I_WR, I_WL, mu_R, mu_L,
                               rho_R, rho_L, strips, aero_on, acc, omd)
            work += p * h
        if (step + 1) % save_every == 0:
            irow += 1
            xs[irow] = x
            Rs[irow] = R
            vs[irow] = v
            Oms[irow] = Om
            ts[irow] = t0 + (step + 1) * h
    return work


@njit(cache=True)
def _rollout_rk4(n_steps, h, t0, x0, R0, v0, Om0,
                 wp_ref, knots, period,
                 m_B, m_W, grav, rho_air, clmax, cd0, cdk,
                 I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L, strips,
                 aero_on, save_every,
                 xs, Rs, vs, Oms, ts):
    """Classical RK4 with Rdot = R hat(Omega) integrated additively.

    Deliberately unprojected: the attitude block drifts off SO(3) at the
    integrator truncation order. Baseline for the structure-preservation
    comparison.
    """
    x = x0.copy()
    R = R0.copy()
    v = v0.copy()
    Om = Om0.copy()
    acc = np.empty(3)
    omd = np.empty(3)
    oh = np.empty((3, 3))
    kR = np.empty((4, 3, 3))
    kx = np.empty((4, 3))
    kv = np.empty((4, 3))
    kO = np.empty((4, 3))
    Rt = np.empty((3, 3))
    xt = np.empty(3)
    vt = np.empty(3)
    Ot = np.empty(3)

    irow = 0
    xs[0] = x
    Rs[0] = R
    vs[0] = v
    Oms[0] = Om
    ts[0] = t0

    coef = np.empty(4)
    coef[0] = 0.0
    coef[1] = 0.5
    coef[2] = 0.5
    coef[3] = 1.0

    for step in range(n_steps):
        tstep = t0 + step * h
        for i in range(4):
            if i == 0:
                Rt[:, :] = R
                for m in range(3):
                    xt[m] = x[m]
                    vt[m] = v[m]
                    Ot[m] = Om[m]
            else:
                f = coef[i] * h
                for a in range(3):
                    for b in range(3):
                        Rt[a, b] = R[a, b] + f * kR[i - 1, a, b]
                for m in range(3):
                    xt[m] = x[m] + f * kx[i - 1, m]
                    vt[m] = v[m] + f * kv[i - 1, m]
                    Ot[m] = Om[m] + f * kO[i - 1, m]
            tt = tstep + coef[i] * h
            _eom_scheduled(tt, t0, Rt, vt, Ot, wp_ref, knots, period,
                           m_B, m_W, grav, rho_air, clmax, cd0, cdk,
                           I_B, I_WR, I_WL, mu_R, mu_L, rho_R, rho_L,
                           strips, aero_on, acc, omd)
            _hat(Ot, oh)
            for a in range(3):
                for b in range(3):
                    kR[i, a, b] = (Rt[a, 0] * oh[0, b] + Rt[a, 1] * oh[1, b]
                                   + Rt[a, 2] * oh[2, b])
            for m in range(3):
                kx[i, m] = vt[m]
                kv[i, m] = acc[m]
                kO[i, m] = omd[m]
        for a in range(3):
            for b in range(3):
                R[a, b] += h / 6.0 * (kR[0, a, b] + 2.0 * kR[1, a, b]
                                      + 2.0 * kR[2, a, b] + kR[3, a, b])
        for m in range(3):
            x[m] += h / 6.0 * (kx[0, m] + 2.0 * kx[1, m] + 2.0 * kx[2, m] + kx[3, m])
            v[m] += h / 6.0 * (kv[0, m] + 2.0 * kv[1, m] + 2.0 * kv[2, m] + kv[3, m])
            Om[m] += h / 6.0 * (kO[0, m] + 2.0 * kO[1, m] + 2.0 * kO[2, m] + kO[3, m])
        if (step + 1) % save_every == 0:
            irow += 1
            xs[irow] = x
            Rs[irow] = R
            vs[irow] = v
            Oms[irow] = Om
            ts[irow] = t0 + (step + 1) * h
    return 0.0
