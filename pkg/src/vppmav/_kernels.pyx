# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops for batched planar VPP stepping.

Every routine here has a line-for-line twin in ``_kernels_py.py``; the two
must perform the same floating-point operations in the same order so the
backends agree bit for bit.
"""
from cython.parallel import prange
from libc.math cimport sin, cos, fabs

# columns of the packed per-env parameter table
DEF P_MASS = 0
DEF P_INERTIA = 1
DEF P_KD = 2
DEF P_HALF_LEN = 3
DEF P_ACT_LIMIT = 4
DEF P_LAG_ALPHA = 5
DEF P_THRUST_GAIN = 6
DEF P_THRUST_PER_RAD = 7

N_PARAMS = 8


cdef inline void _rigid_step(double* x, double f, double tau, double m, double inertia,
                             double kd, double g, double torque_sign, double dt) noexcept nogil:
    cdef double s = sin(x[4])
    cdef double c = cos(x[4])
    cdef double fm = f / m
    cdef double ax = fm * (-s) + (-(kd * fabs(x[2])) * x[2]) / m
    cdef double ay = -g + fm * c + (-(kd * fabs(x[3])) * x[3]) / m
    x[2] = x[2] + dt * ax
    x[3] = x[3] + dt * ay
    x[0] = x[0] + dt * x[2]
    x[1] = x[1] + dt * x[3]
    x[5] = x[5] + dt * (torque_sign * tau / inertia)
    x[4] = x[4] + dt * x[5]


def physics_step(double[:, ::1] X, const double[::1] f, const double[::1] tau,
                 const double[::1] mass, const double[::1] inertia, const double[::1] kd,
                 double g, double torque_sign, double dt, int nthreads=1):
    """Advance every row of ``X`` = [px, py, vx, vy, theta, q] by one step, in place."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t i
    for i in prange(n, nogil=True, schedule="static", num_threads=nthreads):
        _rigid_step(&X[i, 0], f[i], tau[i], mass[i], inertia[i], kd[i], g, torque_sign, dt)


cdef inline double _clamp(double x, double lo, double hi) noexcept nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def pipeline_substeps(double[:, ::1] X, double[:, ::1] F, double[::1] q_prev,
                      const double[::1] f_cmd, const double[::1] q_des,
                      const double[:, ::1] P, const double[::1] poly,
                      double kp, double kd_rate, double tau_limit,
                      double g, double torque_sign, double dt, int n_sub,
                      double[:, ::1] f_out, int nthreads=1):
    """Run ``n_sub`` physics ticks of rate PD -> allocation -> lag -> disturbance -> rigid body.

    ``X`` (N, 6), ``F`` (N, 2) lagged actuator thrusts and ``q_prev`` (N,) are
    updated in place; ``f_out`` receives the delivered actuator thrusts of the
    final tick.
    """
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t npoly = poly.shape[0]
    cdef Py_ssize_t i, k
    cdef int j
    cdef double q, qdot, tau, d, fc, head, f1c, f2c, lim, a
    cdef double al1, al2, s1, s2, f1, f2
    for i in prange(n, nogil=True, schedule="static", num_threads=nthreads):
        for j in range(n_sub):
            q = X[i, 5]
            qdot = (q - q_prev[i]) / dt
            q_prev[i] = q
            tau = _clamp(kp * (q_des[i] - q) - kd_rate * qdot, -tau_limit, tau_limit)
            # torque-priority allocation
            lim = P[i, P_ACT_LIMIT]
            d = _clamp(tau / P[i, P_HALF_LEN], -2.0 * lim, 2.0 * lim)
            head = 2.0 * lim - fabs(d)
            fc = _clamp(f_cmd[i], -head, head)
            f1c = (fc + d) / 2.0
            f2c = (fc - d) / 2.0
            # first-order actuator lag
            a = P[i, P_LAG_ALPHA]
            F[i, 0] = F[i, 0] + a * (f1c - F[i, 0])
            F[i, 1] = F[i, 1] + a * (f2c - F[i, 1])
            # pitch-dependent speed disturbance
            al1 = F[i, 0] / P[i, P_THRUST_PER_RAD]
            al2 = F[i, 1] / P[i, P_THRUST_PER_RAD]
            s1 = poly[npoly - 1]
            s2 = poly[npoly - 1]
            for k in range(npoly - 2, -1, -1):
                s1 = s1 * al1 + poly[k]
                s2 = s2 * al2 + poly[k]
            f1 = F[i, 0] * (P[i, P_THRUST_GAIN] * (1.0 + s1))
            f2 = F[i, 1] * (P[i, P_THRUST_GAIN] * (1.0 + s2))
            _rigid_step(&X[i, 0], f1 + f2, (f1 - f2) * P[i, P_HALF_LEN], P[i, P_MASS],
                        P[i, P_INERTIA], P[i, P_KD], g, torque_sign, dt)
            f_out[i, 0] = f1
            f_out[i, 1] = f2
