"""Pure-Python port of the compiled closed-loop integrator (same API and layout)."""

import math

import numpy as np

MODEL_PENDULUM, MODEL_TWOLINK = 0, 1
REF_SINUSOID, REF_UNFORCED = 0, 1
CTRL_RD2, CTRL_RD2_FF, CTRL_CASCADE = 0, 1, 2
MAXM = 8


class _Sys:
    __slots__ = ("model", "ref", "ctrl", "n", "m", "dim", "ref_off", "mp", "fr", "rp",
                 "kp0", "kd0", "a0", "b0", "kp", "kd", "a", "b", "sg")


def _model_D(s, q):
    if s.model == MODEL_PENDULUM:
        return [s.mp[0] * s.mp[1] * s.mp[1]]
    c2 = math.cos(q[1])
    d01 = s.mp[1] + s.mp[2] * c2
    return [s.mp[0] + 2.0 * s.mp[2] * c2, d01, d01, s.mp[1]]


def _model_C(s, q, y):
    if s.model == MODEL_PENDULUM:
        return [0.0]
    h = s.mp[2] * math.sin(q[1])
    return [-h * y[1], -h * (y[0] + y[1]), h * y[0], 0.0]


def _model_g(s, q):
    if s.model == MODEL_PENDULUM:
        return [s.mp[0] * s.mp[2] * s.mp[1] * math.sin(q[0]) + s.mp[3] * q[0]]
    c12 = math.cos(q[0] + q[1])
    return [s.mp[3] * math.cos(q[0]) + s.mp[4] * c12 + s.mp[5] * q[0],
            s.mp[4] * c12 + s.mp[6] * q[1]]


def _matvec(n, M, x):
    if n == 1:
        return [M[0] * x[0]]
    return [M[0] * x[0] + M[1] * x[1], M[2] * x[0] + M[3] * x[1]]


def _solve_sym(n, D, r):
    if n == 1:
        return [r[0] / D[0]]
    l11 = math.sqrt(D[0])
    l21 = D[2] / l11
    l22 = math.sqrt(D[3] - l21 * l21)
    z0 = r[0] / l11
    z1 = (r[1] - l21 * z0) / l22
    o1 = z1 / l22
    return [(z0 - l21 * o1) / l11, o1]


def _ref_eval(s, t, x):
    n = s.n
    if s.ref == REF_SINUSOID:
        qd, vd, ad = [0.0] * n, [0.0] * n, [0.0] * n
        for j in range(n):
            arg = s.rp[n + j] * t + s.rp[2 * n + j]
            qd[j] = s.rp[j] * math.sin(arg)
            vd[j] = s.rp[j] * s.rp[n + j] * math.cos(arg)
            ad[j] = -s.rp[j] * s.rp[n + j] * s.rp[n + j] * math.sin(arg)
        return qd, vd, ad
    qd = [x[s.ref_off + j] for j in range(n)]
    vd = [x[s.ref_off + n + j] for j in range(n)]
    D = _model_D(s, qd)
    Cv = _matvec(n, _model_C(s, qd, vd), vd)
    g = _model_g(s, qd)
    return qd, vd, _solve_sym(n, D, [-Cv[j] - g[j] for j in range(n)])


def _rhs(s, t, x, want_aux):
    n, m = s.n, s.m
    xo, qco, zo = 3 * n, 3 * n + m * n, 3 * n + 2 * m * n
    dx = [0.0] * s.dim
    q = x[:n]
    v = x[n:2 * n]
    qd, vd, ad = _ref_eval(s, t, x)
    D = _model_D(s, q)
    g = _model_g(s, q)
    tmp = _matvec(n, D, ad)
    tmp2 = _matvec(n, _model_C(s, q, vd), vd)
    qt, th0, xs = [0.0] * n, [0.0] * n, [0.0] * n
    for j in range(n):
        qt[j] = q[j] - qd[j]
        th0[j] = x[2 * n + j] + s.b0[j] * qt[j]
        dx[2 * n + j] = -s.a0[j] * th0[j]
        xs[j] = -s.kp0[j] * qt[j] - s.kd0[j] * th0[j] + tmp[j] + tmp2[j] + g[j]
    xi1s = list(xs)

    if s.ctrl == CTRL_CASCADE:
        for i in range(m):
            for j in range(n):
                th = x[qco + i * n + j] + s.b[i] * xs[j] + x[zo + i * n + j]
                xt = x[xo + i * n + j] - xs[j]
                dx[qco + i * n + j] = -s.a[i] * th
                dx[zo + i * n + j] = -(s.kd[i] - s.sg[i]) * xt
                xs[j] = -s.kp[i] * xt + s.kd[i] * th
        u = list(xs)
        r = [x[xo + j] for j in range(n)]
        for i in range(m - 1):
            for j in range(n):
                dx[xo + i * n + j] = x[xo + (i + 1) * n + j]
        for j in range(n):
            dx[xo + (m - 1) * n + j] = u[j]
    else:
        u = list(xs)
        if s.ctrl == CTRL_RD2_FF:
            for j in range(n):
                u[j] += s.fr[j] * vd[j]
        r = list(u)

    tmp = _matvec(n, _model_C(s, q, v), v)
    for j in range(n):
        r[j] = r[j] - tmp[j] - g[j] - s.fr[j] * v[j]
    acc = _solve_sym(n, D, r)
    for j in range(n):
        dx[j] = v[j]
        dx[n + j] = acc[j]
    if s.ref == REF_UNFORCED:
        for j in range(n):
            dx[s.ref_off + j] = vd[j]
            dx[s.ref_off + n + j] = ad[j]
    if not want_aux:
        return dx, None
    Dq = _matvec(n, D, [v[j] - vd[j] for j in range(n)])
    return dx, u + qd + vd + ad + Dq + xi1s


def _setup(model_kind, mparams, friction, ref_kind, rparams, ctrl_kind, gains, n, m):
    if n < 1 or n > 2 or (model_kind == MODEL_PENDULUM and n != 1) or (model_kind == MODEL_TWOLINK and n != 2):
        raise ValueError("model kind and dof do not match")
    if m < 0 or m > MAXM or (ctrl_kind == CTRL_CASCADE and m < 1) or (ctrl_kind != CTRL_CASCADE and m != 0):
        raise ValueError("chain length does not match the controller kind")
    gains = [float(v) for v in gains]
    if len(gains) != 4 * n + 5 * m:
        raise ValueError("gain vector has the wrong length")
    s = _Sys()
    s.model, s.ref, s.ctrl, s.n, s.m = model_kind, ref_kind, ctrl_kind, n, m
    s.ref_off = 3 * n + 3 * m * n
    s.dim = s.ref_off + (2 * n if ref_kind == REF_UNFORCED else 0)
    mparams = [float(v) for v in mparams]
    rparams = [float(v) for v in rparams]
    s.mp = [mparams[i] if i < len(mparams) else 0.0 for i in range(8)]
    s.rp = [rparams[i] if i < len(rparams) else 0.0 for i in range(6)]
    s.fr = [float(friction[j]) for j in range(n)]
    s.kp0 = gains[0:n]
    s.kd0 = gains[n:2 * n]
    s.a0 = gains[2 * n:3 * n]
    s.b0 = gains[3 * n:4 * n]
    s.kp = [gains[4 * n + 5 * i] for i in range(m)]
    s.kd = [gains[4 * n + 5 * i + 1] for i in range(m)]
    s.a = [gains[4 * n + 5 * i + 2] for i in range(m)]
    s.b = [gains[4 * n + 5 * i + 3] for i in range(m)]
    s.sg = [gains[4 * n + 5 * i + 4] for i in range(m)]
    return s


def rhs_eval(model_kind, mparams, friction, ref_kind, rparams, ctrl_kind, gains, n, m, t, x):
    """Vector field and aux signals at one augmented state."""
    s = _setup(model_kind, mparams, friction, ref_kind, rparams, ctrl_kind, gains, n, m)
    if len(x) != s.dim:
        raise ValueError("state has the wrong length")
    dx, aux = _rhs(s, float(t), [float(v) for v in x], True)
    return np.array(dx), np.array(aux)


def integrate(model_kind, mparams, friction, ref_kind, rparams, ctrl_kind, gains, n, m,
              x0, t0, t1, h, record_every, cap):
    """Fixed-step RK4 of the closed loop; returns (t, X, AUX, status, t_fail)."""
    s = _setup(model_kind, mparams, friction, ref_kind, rparams, ctrl_kind, gains, n, m)
    dim = s.dim
    if len(x0) != dim:
        raise ValueError("initial state has the wrong length")
    if not (h > 0 and t1 > t0) or record_every < 1:
        raise ValueError("need h > 0, t1 > t0 and record_every >= 1")
    nfull = int(math.floor((t1 - t0) / h + 1e-9))
    last = t0 + nfull * h
    partial = (t1 - last) > 1e-12 * max(1.0, abs(t1))
    nsteps = nfull + (1 if partial else 0)
    x = [float(v) for v in x0]
    T = [t0]
    X = [list(x)]
    A = [_rhs(s, t0, x, True)[1]]
    status, t_fail = 0, float("nan")
    rng = range(dim)
    for i in range(nsteps):
        t = t0 + i * h
        tn = t1 if i == nsteps - 1 else t0 + (i + 1) * h
        dt = tn - t
        k1, _ = _rhs(s, t, x, False)
        k2, _ = _rhs(s, t + 0.5 * dt, [x[j] + 0.5 * dt * k1[j] for j in rng], False)
        k3, _ = _rhs(s, t + 0.5 * dt, [x[j] + 0.5 * dt * k2[j] for j in rng], False)
        k4, _ = _rhs(s, t + dt, [x[j] + dt * k3[j] for j in rng], False)
        nrm = 0.0
        for j in rng:
            x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            nrm += x[j] * x[j]
        if not math.isfinite(nrm) or math.sqrt(nrm) > cap:
            status, t_fail = 1, tn
            break
        if (i + 1) % record_every == 0 or i == nsteps - 1:
            T.append(tn)
            X.append(list(x))
            A.append(_rhs(s, tn, x, True)[1])
    return (np.array(T), np.array(X, dtype=float).reshape(len(T), dim),
            np.array(A, dtype=float).reshape(len(T), 6 * n), status, t_fail)


def _free_rhs(s, x):
    n = s.n
    q, v = x[:n], x[n:]
    Cv = _matvec(n, _model_C(s, q, v), v)
    g = _model_g(s, q)
    acc = _solve_sym(n, _model_D(s, q), [-Cv[j] - g[j] for j in range(n)])
    return list(v) + acc


def unforced_flow(model_kind, mparams, x0, t1, h):
    """RK4 of D q'' + C q' + g = 0 on [0, t1]; returns (t, X, ACC) at every step."""
    n = len(x0) // 2
    s = _setup(model_kind, mparams, [0.0] * n, REF_SINUSOID, [], CTRL_RD2, [1.0] * (4 * n), n, 0)
    if not (h > 0 and t1 > 0):
        raise ValueError("need h > 0 and t1 > 0")
    nfull = int(math.floor(t1 / h + 1e-9))
    partial = (t1 - nfull * h) > 1e-12 * max(1.0, t1)
    nsteps = nfull + (1 if partial else 0)
    x = [float(v) for v in x0]
    dim = 2 * n
    T, X, A = [0.0], [list(x)], [_free_rhs(s, x)[n:]]
    for i in range(nsteps):
        t = i * h
        tn = t1 if i == nsteps - 1 else (i + 1) * h
        dt = tn - t
        k1 = _free_rhs(s, x)
        k2 = _free_rhs(s, [x[j] + 0.5 * dt * k1[j] for j in range(dim)])
        k3 = _free_rhs(s, [x[j] + 0.5 * dt * k2[j] for j in range(dim)])
        k4 = _free_rhs(s, [x[j] + dt * k3[j] for j in range(dim)])
        x = [x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]) for j in range(dim)]
        T.append(tn)
        X.append(list(x))
        A.append(_free_rhs(s, x)[n:])
    return np.array(T), np.array(X, dtype=float), np.array(A, dtype=float)
