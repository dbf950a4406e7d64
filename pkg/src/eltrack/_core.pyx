# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RK4 closed-loop integrator for the catalog models.

State layout: [q, v, qc0, xi_1..xi_m, qc_1..qc_m, zeta_1..zeta_m, (qd, vd)],
each block of length n; the trailing (qd, vd) block exists only for
references integrated alongside the plant.  Aux samples hold
[u, qd, vd, ad, D(q) (v - vd), xi1*], each of length n.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, isfinite, floor, fabs, fmax

cnp.import_array()

cdef enum:
    MODEL_PENDULUM = 0
    MODEL_TWOLINK = 1
    REF_SINUSOID = 0
    REF_UNFORCED = 1
    CTRL_RD2 = 0
    CTRL_RD2_FF = 1
    CTRL_CASCADE = 2
    MAXM = 8


cdef struct Sys:
    int model
    int ref
    int ctrl
    int n
    int m
    int dim
    int ref_off
    double mp[8]
    double fr[2]
    double rp[6]
    double kp0[2]
    double kd0[2]
    double a0[2]
    double b0[2]
    double kp[MAXM]
    double kd[MAXM]
    double a[MAXM]
    double b[MAXM]
    double sg[MAXM]


cdef inline void model_D(Sys* s, const double* q, double* D) noexcept nogil:
    cdef double c2
    if s.model == MODEL_PENDULUM:
        D[0] = s.mp[0] * s.mp[1] * s.mp[1]
    else:
        c2 = cos(q[1])
        D[0] = s.mp[0] + 2.0 * s.mp[2] * c2
        D[1] = s.mp[1] + s.mp[2] * c2
        D[2] = D[1]
        D[3] = s.mp[1]


cdef inline void model_C(Sys* s, const double* q, const double* y, double* C) noexcept nogil:
    cdef double h
    if s.model == MODEL_PENDULUM:
        C[0] = 0.0
    else:
        h = s.mp[2] * sin(q[1])
        C[0] = -h * y[1]
        C[1] = -h * (y[0] + y[1])
        C[2] = h * y[0]
        C[3] = 0.0


cdef inline void model_g(Sys* s, const double* q, double* g) noexcept nogil:
    cdef double c12
    if s.model == MODEL_PENDULUM:
        g[0] = s.mp[0] * s.mp[2] * s.mp[1] * sin(q[0]) + s.mp[3] * q[0]
    else:
        c12 = cos(q[0] + q[1])
        g[0] = s.mp[3] * cos(q[0]) + s.mp[4] * c12 + s.mp[5] * q[0]
        g[1] = s.mp[4] * c12 + s.mp[6] * q[1]


cdef inline void matvec(int n, const double* M, const double* x, double* out) noexcept nogil:
    if n == 1:
        out[0] = M[0] * x[0]
    else:
        out[0] = M[0] * x[0] + M[1] * x[1]
        out[1] = M[2] * x[0] + M[3] * x[1]


cdef inline void solve_sym(int n, const double* D, const double* r, double* out) noexcept nogil:
    # Cholesky solve, same operation order as the Python fallback
    cdef double l11, l21, l22, z0, z1
    if n == 1:
        out[0] = r[0] / D[0]
    else:
        l11 = sqrt(D[0])
        l21 = D[2] / l11
        l22 = sqrt(D[3] - l21 * l21)
        z0 = r[0] / l11
        z1 = (r[1] - l21 * z0) / l22
        out[1] = z1 / l22
        out[0] = (z0 - l21 * out[1]) / l11


cdef void ref_eval(Sys* s, double t, const double* x, double* qd, double* vd, double* ad) noexcept nogil:
    cdef int j, n = s.n
    cdef double arg, D[4], C[4], g[2], r[2], Cv[2]
    if s.ref == REF_SINUSOID:
        for j in range(n):
            arg = s.rp[n + j] * t + s.rp[2 * n + j]
            qd[j] = s.rp[j] * sin(arg)
            vd[j] = s.rp[j] * s.rp[n + j] * cos(arg)
            ad[j] = -s.rp[j] * s.rp[n + j] * s.rp[n + j] * sin(arg)
    else:
        for j in range(n):
            qd[j] = x[s.ref_off + j]
            vd[j] = x[s.ref_off + n + j]
        model_D(s, qd, D)
        model_C(s, qd, vd, C)
        model_g(s, qd, g)
        matvec(n, C, vd, Cv)
        for j in range(n):
            r[j] = -Cv[j] - g[j]
        solve_sym(n, D, r, ad)


cdef void rhs(Sys* s, double t, const double* x, double* dx, double* aux) noexcept nogil:
    cdef int i, j, n = s.n, m = s.m
    cdef double qd[2], vd[2], ad[2], qt[2], th0[2], xs[2], xt[2], th[2], u[2]
    cdef double D[4], C[4], g[2], tmp[2], tmp2[2], r[2], acc[2], dqt[2]
    cdef const double* q = x
    cdef const double* v = x + n
    cdef int xo = 3 * n
    cdef int qco = 3 * n + m * n
    cdef int zo = 3 * n + 2 * m * n

    ref_eval(s, t, x, qd, vd, ad)
    model_D(s, q, D)
    model_g(s, q, g)
    # xi1* = -kp0 q~ - kd0 theta0 + D ad + C(q, vd) vd + g
    model_C(s, q, vd, C)
    matvec(n, D, ad, tmp)
    matvec(n, C, vd, tmp2)
    for j in range(n):
        qt[j] = q[j] - qd[j]
        th0[j] = x[2 * n + j] + s.b0[j] * qt[j]
        dx[2 * n + j] = -s.a0[j] * th0[j]
        xs[j] = -s.kp0[j] * qt[j] - s.kd0[j] * th0[j] + tmp[j] + tmp2[j] + g[j]
    if aux != NULL:
        for j in range(n):
            aux[5 * n + j] = xs[j]

    if s.ctrl == CTRL_CASCADE:
        for i in range(m):
            for j in range(n):
                th[j] = x[qco + i * n + j] + s.b[i] * xs[j] + x[zo + i * n + j]
                xt[j] = x[xo + i * n + j] - xs[j]
                dx[qco + i * n + j] = -s.a[i] * th[j]
                dx[zo + i * n + j] = -(s.kd[i] - s.sg[i]) * xt[j]
                xs[j] = -s.kp[i] * xt[j] + s.kd[i] * th[j]
        for j in range(n):
            u[j] = xs[j]
            r[j] = x[xo + j]
        for i in range(m - 1):
            for j in range(n):
                dx[xo + i * n + j] = x[xo + (i + 1) * n + j]
        for j in range(n):
            dx[xo + (m - 1) * n + j] = u[j]
    else:
        for j in range(n):
            u[j] = xs[j]
            if s.ctrl == CTRL_RD2_FF:
                u[j] += s.fr[j] * vd[j]
            r[j] = u[j]

    # plant: D acc = r - C(q, v) v - g - F v
    model_C(s, q, v, C)
    matvec(n, C, v, tmp)
    for j in range(n):
        r[j] = r[j] - tmp[j] - g[j] - s.fr[j] * v[j]
    solve_sym(n, D, r, acc)
    for j in range(n):
        dx[j] = v[j]
        dx[n + j] = acc[j]
    if s.ref == REF_UNFORCED:
        for j in range(n):
            dx[s.ref_off + j] = vd[j]
            dx[s.ref_off + n + j] = ad[j]
    if aux != NULL:
        for j in range(n):
            dqt[j] = v[j] - vd[j]
        matvec(n, D, dqt, tmp)
        for j in range(n):
            aux[j] = u[j]
            aux[n + j] = qd[j]
            aux[2 * n + j] = vd[j]
            aux[3 * n + j] = ad[j]
            aux[4 * n + j] = tmp[j]


cdef void setup_sys(Sys* s, int model_kind, double[::1] mparams, double[::1] friction,
                    int ref_kind, double[::1] rparams, int ctrl_kind, double[::1] gains,
                    int n, int m) except *:
    cdef int i, j
    if n < 1 or n > 2 or (model_kind == MODEL_PENDULUM and n != 1) or (model_kind == MODEL_TWOLINK and n != 2):
        raise ValueError("model kind and dof do not match")
    if m < 0 or m > MAXM or (ctrl_kind == CTRL_CASCADE and m < 1) or (ctrl_kind != CTRL_CASCADE and m != 0):
        raise ValueError("chain length does not match the controller kind")
    if gains.shape[0] != 4 * n + 5 * m:
        raise ValueError("gain vector has the wrong length")
    s.model = model_kind
    s.ref = ref_kind
    s.ctrl = ctrl_kind
    s.n = n
    s.m = m
    s.ref_off = 3 * n + 3 * m * n
    s.dim = s.ref_off + (2 * n if ref_kind == REF_UNFORCED else 0)
    for i in range(8):
        s.mp[i] = mparams[i] if i < mparams.shape[0] else 0.0
    for i in range(6):
        s.rp[i] = rparams[i] if i < rparams.shape[0] else 0.0
    for j in range(n):
        s.fr[j] = friction[j]
        s.kp0[j] = gains[j]
        s.kd0[j] = gains[n + j]
        s.a0[j] = gains[2 * n + j]
        s.b0[j] = gains[3 * n + j]
    for i in range(m):
        s.kp[i] = gains[4 * n + 5 * i]
        s.kd[i] = gains[4 * n + 5 * i + 1]
        s.a[i] = gains[4 * n + 5 * i + 2]
        s.b[i] = gains[4 * n + 5 * i + 3]
        s.sg[i] = gains[4 * n + 5 * i + 4]


def rhs_eval(int model_kind, double[::1] mparams, double[::1] friction, int ref_kind,
             double[::1] rparams, int ctrl_kind, double[::1] gains, int n, int m,
             double t, double[::1] x):
    """Vector field and aux signals at one augmented state."""
    cdef Sys s
    setup_sys(&s, model_kind, mparams, friction, ref_kind, rparams, ctrl_kind, gains, n, m)
    if x.shape[0] != s.dim:
        raise ValueError("state has the wrong length")
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dx = np.zeros(s.dim)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] aux = np.zeros(6 * n)
    rhs(&s, t, &x[0], <double*> dx.data, <double*> aux.data)
    return dx, aux


def integrate(int model_kind, double[::1] mparams, double[::1] friction, int ref_kind,
              double[::1] rparams, int ctrl_kind, double[::1] gains, int n, int m,
              double[::1] x0, double t0, double t1, double h, int record_every, double cap):
    """Fixed-step RK4 of the closed loop; returns (t, X, AUX, status, t_fail).

    status is 0 on completion and 1 when the state norm exceeds ``cap`` or
    turns non-finite, in which case the arrays stop at the last good sample.
    """
    cdef Sys s
    setup_sys(&s, model_kind, mparams, friction, ref_kind, rparams, ctrl_kind, gains, n, m)
    cdef int dim = s.dim
    if x0.shape[0] != dim:
        raise ValueError("initial state has the wrong length")
    if not (h > 0 and t1 > t0) or record_every < 1:
        raise ValueError("need h > 0, t1 > t0 and record_every >= 1")
    cdef long nfull = <long> floor((t1 - t0) / h + 1e-9)
    cdef double last = t0 + nfull * h
    cdef bint partial = (t1 - last) > 1e-12 * fmax(1.0, fabs(t1))
    cdef long nsteps = nfull + (1 if partial else 0)
    cdef long nrec = nsteps // record_every + 2
    cdef cnp.ndarray[cnp.float64_t, ndim=1] T = np.empty(nrec)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] X = np.empty((nrec, dim))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] AUX = np.empty((nrec, 6 * n))
    cdef double[:, ::1] Xv = X
    cdef double[:, ::1] Av = AUX
    cdef double[::1] Tv = T
    cdef cnp.ndarray[cnp.float64_t, ndim=1] work = np.empty(6 * dim)
    cdef double* x = <double*> work.data
    cdef double* k1 = x + dim
    cdef double* k2 = x + 2 * dim
    cdef double* k3 = x + 3 * dim
    cdef double* k4 = x + 4 * dim
    cdef double* y = x + 5 * dim
    cdef long i, r = 0
    cdef int j
    cdef int status = 0
    cdef double t, tn, dt, nrm, t_fail = float("nan")
    with nogil:
        for j in range(dim):
            x[j] = x0[j]
        Tv[0] = t0
        for j in range(dim):
            Xv[0, j] = x[j]
        rhs(&s, t0, x, k1, &Av[0, 0])
        r = 1
        for i in range(nsteps):
            t = t0 + i * h
            tn = t1 if (i == nsteps - 1) else t0 + (i + 1) * h
            dt = tn - t
            rhs(&s, t, x, k1, NULL)
            for j in range(dim):
                y[j] = x[j] + 0.5 * dt * k1[j]
            rhs(&s, t + 0.5 * dt, y, k2, NULL)
            for j in range(dim):
                y[j] = x[j] + 0.5 * dt * k2[j]
            rhs(&s, t + 0.5 * dt, y, k3, NULL)
            for j in range(dim):
                y[j] = x[j] + dt * k3[j]
            rhs(&s, t + dt, y, k4, NULL)
            nrm = 0.0
            for j in range(dim):
                x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                nrm += x[j] * x[j]
            if not isfinite(nrm) or sqrt(nrm) > cap:
                status = 1
                t_fail = tn
                break
            if (i + 1) % record_every == 0 or i == nsteps - 1:
                Tv[r] = tn
                for j in range(dim):
                    Xv[r, j] = x[j]
                rhs(&s, tn, x, k1, &Av[r, 0])
                r += 1
    return T[:r].copy(), X[:r].copy(), AUX[:r].copy(), status, t_fail


cdef void free_rhs(Sys* s, const double* x, double* dx) noexcept nogil:
    cdef int j, n = s.n
    cdef double D[4], C[4], g[2], Cv[2], r[2], acc[2]
    model_D(s, x, D)
    model_C(s, x, x + n, C)
    model_g(s, x, g)
    matvec(n, C, x + n, Cv)
    for j in range(n):
        r[j] = -Cv[j] - g[j]
    solve_sym(n, D, r, acc)
    for j in range(n):
        dx[j] = x[n + j]
        dx[n + j] = acc[j]


def unforced_flow(int model_kind, double[::1] mparams, double[::1] x0, double t1, double h):
    """RK4 of D q'' + C q' + g = 0 on [0, t1]; returns (t, X, ACC) at every step."""
    cdef Sys s
    cdef int n = x0.shape[0] // 2
    setup_sys(&s, model_kind, mparams, np.zeros(n), REF_SINUSOID, np.zeros(0), CTRL_RD2,
              np.ones(4 * n), n, 0)
    if not (h > 0 and t1 > 0):
        raise ValueError("need h > 0 and t1 > 0")
    cdef long nfull = <long> floor(t1 / h + 1e-9)
    cdef bint partial = (t1 - nfull * h) > 1e-12 * fmax(1.0, t1)
    cdef long nsteps = nfull + (1 if partial else 0)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] T = np.empty(nsteps + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] X = np.empty((nsteps + 1, 2 * n))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ACC = np.empty((nsteps + 1, n))
    cdef double[:, ::1] Xv = X
    cdef double[:, ::1] Av = ACC
    cdef double[::1] Tv = T
    cdef double x[4], k1[4], k2[4], k3[4], k4[4], y[4]
    cdef long i
    cdef int j, dim = 2 * n
    cdef double t, tn, dt
    with nogil:
        for j in range(dim):
            x[j] = x0[j]
        Tv[0] = 0.0
        free_rhs(&s, x, k1)
        for j in range(dim):
            Xv[0, j] = x[j]
        for j in range(n):
            Av[0, j] = k1[n + j]
        for i in range(nsteps):
            t = i * h
            tn = t1 if (i == nsteps - 1) else (i + 1) * h
            dt = tn - t
            free_rhs(&s, x, k1)
            for j in range(dim):
                y[j] = x[j] + 0.5 * dt * k1[j]
            free_rhs(&s, y, k2)
            for j in range(dim):
                y[j] = x[j] + 0.5 * dt * k2[j]
            free_rhs(&s, y, k3)
            for j in range(dim):
                y[j] = x[j] + dt * k3[j]
            free_rhs(&s, y, k4)
            for j in range(dim):
                x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            free_rhs(&s, x, k1)
            Tv[i + 1] = tn
            for j in range(dim):
                Xv[i + 1, j] = x[j]
            for j in range(n):
                Av[i + 1, j] = k1[n + j]
    return T, X, ACC
