"""Numpy twin of ``_kernels.pyx``.

Same signatures, same in-place semantics, same operation order. ``nthreads``
is accepted and ignored.
"""
import numpy as np

P_MASS, P_INERTIA, P_KD, P_HALF_LEN, P_ACT_LIMIT, P_LAG_ALPHA, P_THRUST_GAIN, P_THRUST_PER_RAD = range(8)
N_PARAMS = 8


def _rigid_step(X, f, tau, m, inertia, kd, g, torque_sign, dt):
    vx = X[:, 2]
    vy = X[:, 3]
    s = np.sin(X[:, 4])
    c = np.cos(X[:, 4])
    fm = f / m
    ax = fm * (-s) + (-(kd * np.abs(vx)) * vx) / m
    ay = -g + fm * c + (-(kd * np.abs(vy)) * vy) / m
    X[:, 2] = vx + dt * ax
    X[:, 3] = vy + dt * ay
    X[:, 0] = X[:, 0] + dt * X[:, 2]
    X[:, 1] = X[:, 1] + dt * X[:, 3]
    X[:, 5] = X[:, 5] + dt * (torque_sign * tau / inertia)
    X[:, 4] = X[:, 4] + dt * X[:, 5]


def physics_step(X, f, tau, mass, inertia, kd, g, torque_sign, dt, nthreads=1):
    _rigid_step(X, f, tau, mass, inertia, kd, g, torque_sign, dt)


def pipeline_substeps(X, F, q_prev, f_cmd, q_des, P, poly, kp, kd_rate, tau_limit,
                      g, torque_sign, dt, n_sub, f_out, nthreads=1):
    lim = P[:, P_ACT_LIMIT]
    half = P[:, P_HALF_LEN]
    a = P[:, P_LAG_ALPHA]
    gain = P[:, P_THRUST_GAIN]
    tpr = P[:, P_THRUST_PER_RAD]
    for _ in range(n_sub):
        q = X[:, 5].copy()
        qdot = (q - q_prev) / dt
        q_prev[:] = q
        tau = np.clip(kp * (q_des - q) - kd_rate * qdot, -tau_limit, tau_limit)
        d = np.clip(tau / half, -2.0 * lim, 2.0 * lim)
        head = 2.0 * lim - np.abs(d)
        fc = np.clip(f_cmd, -head, head)
        f1c = (fc + d) / 2.0
        f2c = (fc - d) / 2.0
        F[:, 0] = F[:, 0] + a * (f1c - F[:, 0])
        F[:, 1] = F[:, 1] + a * (f2c - F[:, 1])
        al1 = F[:, 0] / tpr
        al2 = F[:, 1] / tpr
        s1 = np.full_like(al1, poly[-1])
        s2 = np.full_like(al2, poly[-1])
        for k in range(len(poly) - 2, -1, -1):
            s1 = s1 * al1 + poly[k]
            s2 = s2 * al2 + poly[k]
        f1 = F[:, 0] * (gain * (1.0 + s1))
        f2 = F[:, 1] * (gain * (1.0 + s2))
        _rigid_step(X, f1 + f2, (f1 - f2) * half, P[:, P_MASS], P[:, P_INERTIA], P[:, P_KD],
                    g, torque_sign, dt)
        f_out[:, 0] = f1
        f_out[:, 1] = f2
