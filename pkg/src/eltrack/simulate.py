"""Closed-loop simulation, Lyapunov and passivity monitors, and batch stability tests."""

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .certify import build_AB
from .controller import (ConfigurationError, ControllerState, GainSet, cascade_control,
                         raw_from_error, rd2_control, xi1_star_dot)
from .models import el_accel
from .numerics import rk4_integrate
from .reference import unforced_jerk


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """Plant, reference and controller of one closed loop.

    controller: "rd2", "rd2_ff" (friction feedforward) or "cascade".  For the
    cascade, ``model`` is the base EL model of the chain and the chain length
    is ``gains.m``.
    """
    model: object
    gains: GainSet
    ref: object
    controller: str = "rd2"
    allow_assumption_violation: bool = False

    def __post_init__(self):
        if self.controller not in ("rd2", "rd2_ff", "cascade"):
            raise ConfigurationError(f"unknown controller {self.controller!r}")
        if self.controller == "cascade" and self.gains.m < 1:
            raise ConfigurationError("the cascade controller needs m >= 1 stages")
        if self.controller != "cascade" and self.gains.m != 0:
            raise ConfigurationError("rd2 controllers take a gain set without chain stages")
        if self.controller == "rd2_ff" and self.model.friction is None:
            raise ConfigurationError("friction feedforward requires a model with friction")
        if self.ref.n != self.model.n:
            raise ConfigurationError("reference and model dimensions differ")
        if self.controller == "cascade" and not self.allow_assumption_violation:
            if self.ref.kind != "unforced":
                worst = self.ref.unforced_residual(self.model, np.linspace(0, self.ref.period or 1.0, 7))
                if worst > 1e-9:
                    raise ConfigurationError(
                        "the cascade controller needs an unforced reference; pass "
                        "allow_assumption_violation=True to run anyway")

    @property
    def n(self):
        return self.model.n

    @property
    def m(self):
        return self.gains.m

    @property
    def err_dim(self):
        return (3 + 2 * self.m) * self.n

    @property
    def raw_dim(self):
        extra = 2 * self.n if self.ref.kind == "unforced" else 0
        return (3 + 3 * self.m) * self.n + extra

    @property
    def ctrl_code(self):
        return {"rd2": kernels.CTRL_RD2, "rd2_ff": kernels.CTRL_RD2_FF,
                "cascade": kernels.CTRL_CASCADE}[self.controller]


def _same_model(a, b):
    return a.kind == b.kind and tuple(a.params) == tuple(b.params)


def kernel_args(cl):
    """Arguments of the flat kernel for this closed loop, or None if unsupported."""
    model, n, m = cl.model, cl.n, cl.m
    if model.kind not in kernels.MODEL_KINDS or m > kernels.MAX_STAGES:
        return None
    if model.friction is None:
        fr = np.zeros(n)
    else:
        F = np.asarray(model.friction)
        if np.any(F != np.diag(np.diag(F))):
            return None
        fr = np.diag(F).astype(float).copy()
    if cl.ref.kind == "sinusoid":
        p = cl.ref.params
        rp = np.concatenate([p["amplitudes"], p["frequencies"], p["phases"]]).astype(float)
        rk = kernels.REF_SINUSOID
    elif cl.ref.kind == "unforced" and cl.ref.model is not None and _same_model(cl.ref.model, model):
        rp = np.zeros(0)
        rk = kernels.REF_UNFORCED
    else:
        return None
    g = cl.gains
    gv = [g.vec(k, n) for k in ("kp0", "kd0", "a0", "b0")]
    stages = []
    for i in range(m):
        stages += [g.kp[i], g.kd[i], g.a[i], g.b[i], g.sigma[i]]
    gains = np.concatenate(gv + [np.asarray(stages, float)])
    return (kernels.MODEL_KINDS[model.kind], np.asarray(model.params, float), fr, rk, rp,
            cl.ctrl_code, gains, n, m)


# ------------------------------------------------------------ generic path

def _ref_from_state(cl, t, s):
    """(qd, vd, ad, jerk) at time t for raw state s."""
    n = cl.n
    if cl.ref.kind == "unforced" and s.size == cl.raw_dim:
        off = (3 + 3 * cl.m) * n
        qd, vd = s[off:off + n], s[off + n:off + 2 * n]
        rm = cl.ref.model if cl.ref.model is not None else cl.model
        ad = el_accel(rm, qd, vd, np.zeros(n))
        return qd, vd, ad, unforced_jerk(rm, qd, vd, ad)
    return cl.ref.eval(t)


def python_rhs(cl, t, s):
    """Vector field and aux signals using the controller operations directly."""
    n, m = cl.n, cl.m
    q, v = s[:n], s[n:2 * n]
    r = _ref_from_state(cl, t, s)
    ds = np.zeros_like(s)
    if cl.controller == "cascade":
        xo = 3 * n
        xi = [s[xo + i * n:xo + (i + 1) * n] for i in range(m)]
        st = ControllerState(s[2 * n:3 * n],
                             [s[3 * n + m * n + i * n:3 * n + m * n + (i + 1) * n] for i in range(m)],
                             [s[3 * n + 2 * m * n + i * n:3 * n + 2 * m * n + (i + 1) * n] for i in range(m)])
        u, dst, out = cascade_control(cl.gains, st, q, xi, r, cl.model)
        acc = el_accel(cl.model, q, v, xi[0])
        ds[2 * n:3 * n] = dst.qc0
        for i in range(m):
            ds[xo + i * n:xo + (i + 1) * n] = xi[i + 1] if i < m - 1 else u
            ds[3 * n + m * n + i * n:3 * n + m * n + (i + 1) * n] = dst.qc[i]
            ds[3 * n + 2 * m * n + i * n:3 * n + 2 * m * n + (i + 1) * n] = dst.zeta[i]
        xi1s = out.xi_star[0]
    else:
        st = ControllerState(s[2 * n:3 * n])
        u, dst = rd2_control(cl.gains, st, q, r, cl.model)
        xi1s = u.copy()
        if cl.controller == "rd2_ff":
            u = u + cl.model.friction @ r[1]
        acc = el_accel(cl.model, q, v, u)
        ds[2 * n:3 * n] = dst.qc0
    ds[:n] = v
    ds[n:2 * n] = acc
    if s.size == cl.raw_dim and cl.ref.kind == "unforced":
        off = (3 + 3 * m) * n
        ds[off:off + n] = r[1]
        ds[off + n:off + 2 * n] = r[2]
    aux = np.concatenate([u, r[0], r[1], r[2], cl.model.inertia(q) @ (v - r[1]), xi1s])
    return ds, aux


def rhs_eval(cl, t, s, backend="auto"):
    args = kernel_args(cl) if backend != "python" else None
    if args is not None:
        return kernels.rhs_eval(*args, float(t), np.ascontiguousarray(s, dtype=float))
    return python_rhs(cl, t, np.asarray(s, float))


def _python_integrate(cl, s0, t0, t1, h, record_every, cap):
    """Generic RK4 loop mirroring the kernel's grid and divergence rule."""
    nfull = int(math.floor((t1 - t0) / h + 1e-9))
    partial = (t1 - (t0 + nfull * h)) > 1e-12 * max(1.0, abs(t1))
    nsteps = nfull + (1 if partial else 0)
    x = np.array(s0, float)
    T, X, A = [t0], [x.copy()], [python_rhs(cl, t0, x)[1]]
    status, t_fail = 0, math.nan
    f = lambda t, y: python_rhs(cl, t, y)[0]
    for i in range(nsteps):
        t = t0 + i * h
        tn = t1 if i == nsteps - 1 else t0 + (i + 1) * h
        dt = tn - t
        k1 = f(t, x)
        k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
        k4 = f(t + dt, x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        nrm = float(np.sqrt(x @ x))
        if not math.isfinite(nrm) or nrm > cap:
            status, t_fail = 1, tn
            break
        if (i + 1) % record_every == 0 or i == nsteps - 1:
            T.append(tn)
            X.append(x.copy())
            A.append(python_rhs(cl, tn, x)[1])
    return np.array(T), np.array(X), np.array(A), status, t_fail


# ------------------------------------------------------------ trajectories

@dataclass(eq=False)
class Trajectory:
    """Uniformly sampled closed-loop run.

    ``raw`` holds kernel-layout states, ``aux`` the per-sample signals
    [u, qd, vd, ad, D(q) q~', xi1*]; ``x`` the error coordinates
    [q~, q~', theta0, xi~_1..xi~_m, theta_1..theta_m].
    """
    cl: ClosedLoop
    t: np.ndarray
    raw: np.ndarray
    aux: np.ndarray
    diverged: bool = False
    t_blowup: float = math.nan
    h: float = 1e-3
    record_every: int = 1
    backend: str = "kernel"
    _cache: dict = field(default_factory=dict, repr=False)

    def _blk(self, arr, k):
        n = self.cl.n
        return arr[:, k * n:(k + 1) * n]

    @property
    def n(self):
        return self.cl.n

    @property
    def u(self):
        return self._blk(self.aux, 0)

    @property
    def qd(self):
        return self._blk(self.aux, 1)

    @property
    def vd(self):
        return self._blk(self.aux, 2)

    @property
    def q(self):
        return self._blk(self.raw, 0)

    @property
    def v(self):
        return self._blk(self.raw, 1)

    def parts(self):
        """Dict of error-coordinate blocks (arrays of shape (N, n))."""
        if "parts" in self._cache:
            return self._cache["parts"]
        cl, n, m = self.cl, self.cl.n, self.cl.m
        g = cl.gains
        qt = self.q - self.qd
        dqt = self.v - self.vd
        th0 = self._blk(self.raw, 2) + g.vec("b0", n) * qt
        xs = self._blk(self.aux, 5).copy()
        xis, ths, stars = [], [], []
        for i in range(m):
            xi = self.raw[:, (3 + i) * n:(4 + i) * n]
            qc = self.raw[:, (3 + m + i) * n:(4 + m + i) * n]
            ze = self.raw[:, (3 + 2 * m + i) * n:(4 + 2 * m + i) * n]
            th = qc + g.b[i] * xs + ze
            xt = xi - xs
            stars.append(xs)
            xis.append(xt)
            ths.append(th)
            xs = -g.kp[i] * xt + g.kd[i] * th
        out = {"qtilde": qt, "dqtilde": dqt, "theta0": th0, "xi_tilde": xis, "theta": ths,
               "xi_star": stars}
        self._cache["parts"] = out
        return out

    @property
    def x(self):
        p = self.parts()
        return np.hstack([p["qtilde"], p["dqtilde"], p["theta0"], *p["xi_tilde"], *p["theta"]])

    @property
    def chi(self):
        p = self.parts()
        return np.hstack([*p["xi_tilde"], *p["theta"]]) if self.cl.m else np.zeros((self.t.size, 0))

    def norm_x(self):
        return np.linalg.norm(self.x, axis=1)

    def monitors(self, eps1=None, eps2=None, P=None):
        """Lyapunov-type functions V1, V2, V, W1, W and V1 + W along the run."""
        cl, n = self.cl, self.cl.n
        g = cl.gains
        p = self.parts()
        Dq = self._blk(self.aux, 4)
        kp, kd, b = g.vec("kp0", n), g.vec("kd0", n), g.vec("b0", n)
        V1 = 0.5 * (np.sum(p["dqtilde"] * Dq, axis=1) + np.sum(kp * p["qtilde"] ** 2, axis=1)
                    + np.sum(kd / b * p["theta0"] ** 2, axis=1))
        e1, e2 = default_eps(g, cl.model.bounds) if eps1 is None or eps2 is None else (eps1, eps2)
        V2 = np.sum((e1 * p["qtilde"] - e2 * p["theta0"]) * Dq, axis=1)
        out = {"V1": V1, "V2": V2, "V": V1 + V2}
        if cl.m:
            chi = self.chi
            W = 0.5 * (np.sum(chi ** 2, axis=1) if P is None else np.einsum("ij,jk,ik->i", chi, P, chi))
            out["W1"] = 0.5 * (np.sum(p["xi_tilde"][0] ** 2, axis=1) + np.sum(p["theta"][0] ** 2, axis=1))
            out["W"] = W
            out["Vcal"] = V1 + W
        else:
            out["W"] = np.zeros_like(V1)
        return out


def default_eps(gains, bounds):
    """Cross-term weights satisfying kp/(4 d_M) >= eps1^2 and kd/(4 b d_M) >= eps2^2 (halved)."""
    kp, kd = gains.extreme("kp0", "min"), gains.extreme("kd0", "min")
    a, b = gains.extreme("a0", "min"), gains.extreme("b0", "max")
    e1 = 0.5 * math.sqrt(kp / (4 * bounds.d_M))
    e2 = 0.5 * math.sqrt(min(a / (4 * b), kd / (8 * b * bounds.d_M)))
    return e1, e2


def initial_raw(cl, x0, t0=0.0):
    """Raw kernel state realizing error coordinates x0 at time t0 (zeta = 0)."""
    n, m = cl.n, cl.m
    x0 = np.asarray(x0, float)
    if x0.size != cl.err_dim:
        raise ConfigurationError(f"initial error state must have length {cl.err_dim}")
    r = cl.ref.eval(t0)
    blk = [x0[k * n:(k + 1) * n] for k in range(3 + 2 * m)]
    q, v, st, xi = raw_from_error(cl.gains, cl.model, r, blk[0], blk[1], blk[2],
                                  blk[3:3 + m], blk[3 + m:3 + 2 * m])
    parts = [q, v, st.qc0, *xi, *st.qc, *st.zeta]
    if cl.ref.kind == "unforced":
        parts += [np.asarray(r[0], float), np.asarray(r[1], float)]
    return np.concatenate(parts)


def run_closed_loop(cl, x0=None, t0=0.0, horizon=10.0, h=1e-3, *, raw0=None, record_every=1,
                    cap=1e9, backend="auto"):
    """Integrate the closed loop with RK4; x0 in error coordinates (or raw0 in kernel layout)."""
    s0 = initial_raw(cl, x0, t0) if raw0 is None else np.asarray(raw0, float)
    args = kernel_args(cl) if backend != "python" else None
    if backend == "kernel" and args is None:
        raise ConfigurationError("closed loop not supported by the kernel")
    if args is not None:
        T, X, A, status, tf = kernels.integrate(*args, np.ascontiguousarray(s0), float(t0),
                                                float(t0 + horizon), float(h), int(record_every), float(cap))
        used = "compiled" if kernels.COMPILED else "python-port"
    else:
        T, X, A, status, tf = _python_integrate(cl, s0, float(t0), float(t0 + horizon), float(h),
                                                int(record_every), float(cap))
        used = "generic"
    return Trajectory(cl, T, X, A, bool(status), tf, h, record_every, used)


# ------------------------------------------------------------ monitors

def five_point_derivative(y, dt):
    """Fourth-order central difference at interior samples (first/last two are NaN)."""
    d = np.full_like(y, np.nan, dtype=float)
    if y.size >= 5:
        d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * dt)
    return d


def _uniform_slice(traj):
    """Indices with a uniform grid (drops a shortened final step)."""
    dt = traj.h * traj.record_every
    N = traj.t.size
    if N >= 2 and abs((traj.t[-1] - traj.t[-2]) - dt) > 1e-9 * max(1.0, dt):
        N -= 1
    return slice(0, N), dt


@dataclass
class BoundReport:
    """Violations of a pointwise derivative bound along a trajectory."""
    name: str
    n_checked: int
    violations: list
    max_excess: float

    @property
    def ok(self):
        return not self.violations

    def to_dict(self):
        return {"name": self.name, "n_checked": self.n_checked, "n_violations": len(self.violations),
                "max_excess": self.max_excess, "violations": self.violations[:20]}


def _bound_report(name, t, lhs, rhs, tol):
    ok = np.isfinite(lhs)
    excess = lhs - rhs - tol
    bad = np.where(ok & (excess > 0))[0]
    viol = [(float(t[i]), float(excess[i] + tol[i])) for i in bad]
    mx = float(np.nanmax(np.where(ok, lhs - rhs, -np.inf))) if np.any(ok) else math.nan
    return BoundReport(name, int(ok.sum()), viol, mx)


def check_vdot_bound(traj, bounds=None, k_delta=None, rel_tol=1e-4):
    """V1' <= -(kd a/b)|theta0|^2 + kc kdelta |q~'|^2 along an rd2 run (5-point differences)."""
    cl = traj.cl
    bounds = cl.model.bounds if bounds is None else bounds
    k_delta = cl.ref.k_delta if k_delta is None else k_delta
    sl, dt = _uniform_slice(traj)
    mon = traj.monitors()
    p = traj.parts()
    n = cl.n
    g = cl.gains
    dV = five_point_derivative(mon["V1"][sl], dt)
    rhs = (-np.sum(g.vec("kd0", n) * g.vec("a0", n) / g.vec("b0", n) * p["theta0"][sl] ** 2, axis=1)
           + bounds.k_c * k_delta * np.sum(p["dqtilde"][sl] ** 2, axis=1))
    if cl.model.friction is not None and cl.controller == "rd2_ff":
        rhs = rhs - float(np.linalg.eigvalsh(cl.model.friction).min()) * np.sum(p["dqtilde"][sl] ** 2, axis=1)
    tol = rel_tol * (1 + np.sum(traj.x[sl] ** 2, axis=1))
    return _bound_report("V1dot", traj.t[sl], dV, rhs, tol)


def envelope_check(traj, bounds=None, k_delta=None):
    """Ratio max_t |x(t)| / (c1 |x0| exp(c2 (t - t0))) for the rd2 growth envelope."""
    cl = traj.cl
    bounds = cl.model.bounds if bounds is None else bounds
    k_delta = cl.ref.k_delta if k_delta is None else k_delta
    g = cl.gains
    kp, kd, b = g.extreme("kp0", "min"), g.extreme("kd0", "min"), g.extreme("b0", "max")
    kpM, kdM, bm = g.extreme("kp0", "max"), g.extreme("kd0", "max"), g.extreme("b0", "min")
    a1 = 0.5 * max(bounds.d_M, kpM, kdM / bm)
    a2 = 0.5 * min(bounds.d_m, kp, kd / b)
    c1 = math.sqrt(a1 / a2)
    c2 = bounds.k_c * k_delta / (2 * a2)
    nx = traj.norm_x()
    env = c1 * nx[0] * np.exp(c2 * (traj.t - traj.t[0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, nx / env, np.where(nx > 0, np.inf, 0.0))
    return float(np.max(ratio)), c1, c2


def _slow_index(cl):
    """State components that xi1*, V1 and the storage function depend on."""
    n, m = cl.n, cl.m
    idx = list(range(3 * n))
    if cl.ref.kind == "unforced":
        off = (3 + 3 * m) * n
        idx += list(range(off, off + 2 * n))
    return np.array(idx)


def flow_derivative(cl, t, s, fun, rel_step=1e-4):
    """d/dt fun(t, x(t)) at (t, s) by a 5-point difference along the vector field.

    ``fun`` must depend only on time and the plant, qc0 and reference components
    of the raw state; the step is scaled by the speed of those components.
    """
    s = np.asarray(s, float)
    f, _ = rhs_eval(cl, t, s)
    speed = float(np.linalg.norm(f[_slow_index(cl)]))
    e = rel_step / max(1.0, speed)
    g = [np.asarray(fun(t + k * e, s + k * e * f), float) for k in (-2, -1, 1, 2)]
    return (g[0] - 8 * g[1] + 8 * g[2] - g[3]) / (12 * e)


def xi1_dot_along_flow(traj, idx, rel_step=1e-4):
    """xi1*' at recorded samples by differencing xi1* along the vector field."""
    cl, n = traj.cl, traj.cl.n
    fun = lambda t, s: rhs_eval(cl, t, s)[1][5 * n:6 * n]
    return np.array([flow_derivative(cl, traj.t[i], traj.raw[i], fun, rel_step) for i in idx])


def _ref_sample(cl, t, s):
    return _ref_from_state(cl, t, s)


def xi1_dot_formula(traj, idx):
    """xi1*' at recorded samples from the closed-form derivative."""
    cl, n = traj.cl, traj.cl.n
    p = traj.parts()
    out = []
    for i in idx:
        s = traj.raw[i]
        r = _ref_sample(cl, traj.t[i], s)
        out.append(xi1_star_dot(cl.gains, s[:n], s[n:2 * n], p["theta0"][i], r, cl.model))
    return np.array(out)


@dataclass
class CascadeBalance:
    """Residuals of the chain error-dynamics identities along a run."""
    w1_residual: float
    matrix_residual: float
    eta_violations: int
    eta_max_ratio: float
    n_checked: int

    def to_dict(self):
        return dict(self.__dict__)


def cascade_balance(traj, eta=None, n_points=400):
    """W1' identity (m >= 1), X' = A X + B xi1*' pointwise, and the eta bound.

    The left sides use the closed-loop vector field with xi1*' differenced
    along the flow; the right sides use the closed-form xi1*'.
    """
    cl = traj.cl
    if cl.controller != "cascade":
        raise ConfigurationError("cascade_balance needs a cascade trajectory")
    n, m, g = cl.n, cl.m, cl.gains
    N = traj.t.size
    idx = np.unique(np.linspace(0, N - 1, min(n_points, N)).astype(int))
    d_flow = xi1_dot_along_flow(traj, idx)
    d_form = xi1_dot_formula(traj, idx)
    A, B, *_ = build_AB(g, n)
    p = traj.parts()
    w1_res, mat_res = 0.0, 0.0
    for k, i in enumerate(idx):
        s = traj.raw[i]
        ds, _ = rhs_eval(cl, traj.t[i], s)
        # derivative of the error blocks along the flow
        xs_dot = d_flow[k]
        xt_dot, th_dot = [], []
        for j in range(m):
            dxi = ds[(3 + j) * n:(4 + j) * n]
            dqc = ds[(3 + m + j) * n:(4 + m + j) * n]
            dze = ds[(3 + 2 * m + j) * n:(4 + 2 * m + j) * n]
            xt_dot.append(dxi - xs_dot)
            th_dot.append(dqc + g.b[j] * xs_dot + dze)
            xs_dot = -g.kp[j] * xt_dot[-1] + g.kd[j] * th_dot[-1]
        xt1, th1 = p["xi_tilde"][0][i], p["theta"][0][i]
        lhs = xt1 @ xt_dot[0] + th1 @ th_dot[0]
        rhs = (-g.kp[0] * xt1 @ xt1 - g.a[0] * th1 @ th1 + d_form[k] @ (g.b[0] * th1 - xt1))
        w1_res = max(w1_res, abs(lhs - rhs))
        chi = np.concatenate([*[p["xi_tilde"][j][i] for j in range(m)], *[p["theta"][j][i] for j in range(m)]])
        chi_dot = np.concatenate(xt_dot + th_dot)
        mat_res = max(mat_res, float(np.max(np.abs(chi_dot - (A @ chi + B @ d_form[k])))))
    viol, ratio = 0, 0.0
    if eta is not None:
        sat = cl.model.bounds.sat(np.linalg.norm(p["qtilde"][idx], axis=1))
        bound = (eta.eta1 * sat + eta.eta2 * np.linalg.norm(p["dqtilde"][idx], axis=1)
                 + eta.eta3 * np.linalg.norm(p["theta0"][idx], axis=1))
        mag = np.linalg.norm(d_form, axis=1)
        viol = int(np.sum(mag > bound * (1 + 1e-9) + 1e-12))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(bound > 0, mag / bound, 0.0)
        ratio = float(np.max(r))
    return CascadeBalance(float(w1_res), float(mat_res), viol, ratio, int(idx.size))


@dataclass
class PassivityReport:
    max_residual: float
    n_checked: int
    friction: Optional[BoundReport] = None

    def to_dict(self):
        d = {"max_residual": self.max_residual, "n_checked": self.n_checked}
        if self.friction is not None:
            d["friction"] = self.friction.to_dict()
        return d


def _rd2_signals(cl, t, s):
    n = cl.n
    q, v = s[:n], s[n:2 * n]
    r = _ref_from_state(cl, t, s)
    theta = s[2 * n:3 * n] + cl.gains.vec("b0", n) * (q - r[0])
    return q, v, theta, r


def storage(cl, t, s):
    """(q'Dq' + kp|q|^2 + (kd/b)|theta|^2)/2 at raw state s."""
    g, n = cl.gains, cl.n
    q, v, th, _ = _rd2_signals(cl, t, s)
    return 0.5 * (v @ cl.model.inertia(q) @ v + np.sum(g.vec("kp0", n) * q ** 2)
                  + np.sum(g.vec("kd0", n) / g.vec("b0", n) * th ** 2))


def lyapunov_v1(cl, t, s):
    """(q~'Dq~' + kp|q~|^2 + (kd/b)|theta|^2)/2 at raw state s."""
    g, n = cl.gains, cl.n
    q, v, th, r = _rd2_signals(cl, t, s)
    dqt = v - r[1]
    return 0.5 * (dqt @ cl.model.inertia(q) @ dqt + np.sum(g.vec("kp0", n) * (q - r[0]) ** 2)
                  + np.sum(g.vec("kd0", n) / g.vec("b0", n) * th ** 2))


def passivity_balance(traj, tol=1e-5, n_points=None):
    """Storage balance for v -> q' (friction-free) or the friction dissipation inequality.

    With v = D qd'' + C(q, qd') qd' + kp qd the storage derivative is
    -(kd a/b)|theta|^2 - kd theta'qd' + q'v.  With friction the error storage
    satisfies V1' <= -(kd a/b)|theta|^2 - (lambda_min(F) - kc kdelta)|q~'|^2.
    Derivatives are taken along the vector field at recorded samples.
    """
    cl = traj.cl
    if cl.controller == "cascade":
        raise ConfigurationError("passivity balance applies to rd2 runs")
    model, g, n = cl.model, cl.gains, cl.n
    kp, kd, a, b = (g.vec(k, n) for k in ("kp0", "kd0", "a0", "b0"))
    N = traj.t.size
    idx = np.arange(N) if n_points is None else np.unique(np.linspace(0, N - 1, min(n_points, N)).astype(int))
    if model.friction is None:
        res = 0.0
        for i in idx:
            t, s = traj.t[i], traj.raw[i]
            q, v, th, r = _rd2_signals(cl, t, s)
            vin = model.inertia(q) @ r[2] + model.coriolis(q, r[1]) @ r[1] + kp * r[0]
            pred = -np.sum(kd * a / b * th ** 2) - np.sum(kd * th * r[1]) + v @ vin
            dV = flow_derivative(cl, t, s, lambda tt, ss: storage(cl, tt, ss))
            res = max(res, abs(float(dV) - pred))
        return PassivityReport(float(res), int(idx.size))
    fmin = float(np.linalg.eigvalsh(model.friction).min())
    lhs, rhs = np.empty(idx.size), np.empty(idx.size)
    for k, i in enumerate(idx):
        t, s = traj.t[i], traj.raw[i]
        q, v, th, r = _rd2_signals(cl, t, s)
        dqt = v - r[1]
        rhs[k] = -np.sum(kd * a / b * th ** 2) - (fmin - model.bounds.k_c * cl.ref.k_delta) * (dqt @ dqt)
        lhs[k] = flow_derivative(cl, t, s, lambda tt, ss: lyapunov_v1(cl, tt, ss))
    friction = _bound_report("friction_dissipation", traj.t[idx], lhs, rhs, np.full(idx.size, tol))
    return PassivityReport(math.nan, int(idx.size), friction)


# ------------------------------------------------------------ matrix form

def form_equivalence(gains, model, ref, x0, horizon=5.0, h=1e-3, t0=0.0):
    """Sup-norm gap between the chain error coordinates and the matrix-form solution.

    Both are integrated in one RK4 state; the matrix form is driven by the
    closed-form xi1*' evaluated on the plant part of the same state.
    """
    cl = ClosedLoop(model, gains, ref, "cascade", allow_assumption_violation=True)
    n, m = cl.n, cl.m
    A, B, *_ = build_AB(gains, n)
    s0 = initial_raw(cl, x0, t0)
    chi0 = np.asarray(x0, float)[3 * n:]
    R = s0.size

    def f(t, y):
        s = y[:R]
        ds, aux = rhs_eval(cl, t, s)
        r = _ref_from_state(cl, t, s)
        th0 = s[2 * n:3 * n] + gains.vec("b0", n) * (s[:n] - r[0])
        d1 = xi1_star_dot(gains, s[:n], s[n:2 * n], th0, r, model)
        return np.concatenate([ds, A @ y[R:] + B @ d1])

    try:
        T, Y = rk4_integrate(f, np.concatenate([s0, chi0]), t0, t0 + horizon, h)
    except Exception as exc:  # divergence in either form
        return {"gap": math.inf, "diverged": True, "detail": str(exc)}
    aux = np.array([rhs_eval(cl, t, y[:R])[1] for t, y in zip(T, Y)])
    traj = Trajectory(cl, T, Y[:, :R], aux, h=h)
    gap = float(np.max(np.abs(traj.chi - Y[:, R:])))
    return {"gap": gap, "diverged": False, "max_chi": float(np.max(np.abs(Y[:, R:])))}


# ------------------------------------------------------------ batch stability

@dataclass
class UGASReport:
    radii: list
    phases: list
    envelope: list      # [r][phase] sup |x|
    entry_time: list    # [r][phase] worst first entry time into |x| <= sigma
    integral: list      # [r] max over runs of int |x|^2 dt
    tail_fraction: list  # [r] max share of the integral from the last 10% of the horizon
    monotone: bool
    uniform: bool
    envelope_variation: list
    all_attractive: bool
    diverged: list
    sigma: float
    seed: int
    verdict: str
    exp_fit: Optional[dict] = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def _entry_time(t, nx, sigma):
    hit = np.where(nx <= sigma)[0]
    return float(t[hit[0]] - t[0]) if hit.size else math.inf


def forward_sup(y):
    """s(t) = max_{s >= t} y(s)."""
    return np.maximum.accumulate(y[::-1])[::-1]


def fit_exponential(t, nx, decades=6.0, floor=1e-12):
    """Least-squares fit of log sup_{s>=t}|x(s)| = log M - lam t; returns dict with lam, M, R^2.

    Only samples within ``decades`` of the initial envelope enter the fit, which
    keeps the integrator's accuracy floor out of the regression.
    """
    env = forward_sup(nx)
    keep = env > max(floor, 10.0 ** (-decades) * env[0])
    tt, ly = t[keep] - t[0], np.log(env[keep])
    if tt.size < 3:
        return {"lam": math.nan, "M": math.nan, "r2": math.nan}
    A = np.vstack([np.ones_like(tt), -tt]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"lam": float(coef[1]), "M": float(np.exp(coef[0])), "r2": r2}


def sphere_directions(dim, count, seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _run_summary(tr, sigma, horizon):
    nx = tr.norm_x()
    sq = nx ** 2
    total = float(np.trapezoid(sq, tr.t))
    cut = tr.t >= tr.t[0] + 0.9 * horizon
    tail = float(np.trapezoid(sq[cut], tr.t[cut])) if cut.sum() > 1 else 0.0
    return float(nx.max()), _entry_time(tr.t, nx, sigma), total, tail


def empirical_ugas(cl, radii=(0.1, 1.0, 10.0), n_phases=8, n_dirs=8, sigma=1e-3, horizon=60.0,
                   h=1e-3, seed=0, period=None, record_every=10, uniform_tol=0.1, on_run=None,
                   workers=None, fit_radius=None, fit_horizon=None):
    """Batch test of boundedness, uniformity in t0 and attractivity on spheres of initial states.

    Runs for one (r, t0) cell execute concurrently; results are merged in
    direction order, so the report does not depend on ``workers``.
    ``on_run(traj, r, t0, k)`` is called in the calling thread after each cell.
    With ``fit_radius`` an exponential envelope is fitted on runs from that radius.
    """
    period = period if period is not None else (cl.ref.period or 2 * np.pi)
    phases = [period * k / n_phases for k in range(n_phases)]
    dirs = sphere_directions(cl.err_dim, n_dirs, seed)
    workers = workers or min(8, os.cpu_count() or 1)
    env, tent, integ, tails, diverged = [], [], [], [], []

    def one(args):
        r, t0, d = args
        return run_closed_loop(cl, r * d, t0, horizon, h, record_every=record_every)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for r in radii:
            env_r, t_r, int_r, tail_r = [], [], 0.0, 0.0
            for t0 in phases:
                e_max, T_max = 0.0, 0.0
                runs = [] if r == 0 else list(pool.map(one, [(r, t0, d) for d in dirs]))
                for k, tr in enumerate(runs):
                    if on_run is not None:
                        on_run(tr, r, t0, k)
                    if tr.diverged:
                        diverged.append({"r": r, "t0": t0, "dir": k, "seed": seed, "t_blowup": tr.t_blowup})
                        e_max, T_max = math.inf, math.inf
                        continue
                    peak, T, total, tail = _run_summary(tr, sigma, horizon)
                    e_max = max(e_max, peak)
                    T_max = max(T_max, T)
                    int_r = max(int_r, total)
                    if total > 0:
                        tail_r = max(tail_r, tail / total)
                env_r.append(e_max)
                t_r.append(T_max)
            env.append(env_r)
            tent.append(t_r)
            integ.append(int_r)
            tails.append(tail_r)
        fit = None
        if fit_radius:
            fh = fit_horizon or horizon
            fits = list(pool.map(lambda d: run_closed_loop(cl, fit_radius * d, 0.0, fh, h,
                                                           record_every=record_every), dirs))
            res = [fit_exponential(tr.t, tr.norm_x()) for tr in fits if not tr.diverged]
            fit = {"radius": fit_radius, "lam_min": min((f["lam"] for f in res), default=math.nan),
                   "r2_min": min((f["r2"] for f in res), default=math.nan), "runs": res}
    peaks = [max(e) if e else 0.0 for e in env]
    monotone = all(peaks[i] <= peaks[i + 1] for i in range(len(peaks) - 1))
    variation = []
    for e in env:
        e = np.asarray(e)
        variation.append(float((e.max() - e.min()) / e.max()) if e.size and e.max() > 0 else 0.0)
    uniform = all(v < uniform_tol for v in variation) and not diverged
    attractive = all(math.isfinite(T) for row in tent for T in row)
    if diverged:
        verdict = "failure: divergent runs"
    elif monotone and uniform and attractive:
        verdict = "consistent with UGAS on tested grid"
    else:
        why = [w for w, ok in (("envelopes not monotone in r", monotone),
                               ("envelopes vary across t0", uniform),
                               ("some runs never reached sigma", attractive)) if not ok]
        verdict = "not consistent with UGAS on tested grid: " + "; ".join(why)
    return UGASReport(list(radii), phases, env, tent, integ, tails, monotone, uniform, variation,
                      attractive, diverged, sigma, seed, verdict, fit)


# ------------------------------------------------------------ flexible joint

def simulate_flexjoint(fj, gains, ref, x0, horizon=5.0, h=1e-3, t0=0.0):
    """Flexible-joint plant driven by tau = K (q2 - q1) + J K^-1 u with u from the m = 2 cascade.

    Returns (t, link positions, motor positions).
    """
    from .models import flexjoint_accel, flexjoint_to_chain
    chain, imap = flexjoint_to_chain(fj)
    cl = ClosedLoop(chain.base, gains, ref, "cascade", allow_assumption_violation=True)
    n = cl.n
    s0 = initial_raw(cl, x0, t0)
    q1, v1 = s0[:n], s0[n:2 * n]
    xi1, xi2 = s0[3 * n:4 * n], s0[4 * n:5 * n]
    _, _, q2, v2 = imap.flex_state(q1, v1, [xi1, xi2])
    ctrl0 = np.concatenate([s0[2 * n:3 * n], s0[5 * n:]])

    def f(t, y):
        q1, v1, q2, v2 = y[:n], y[n:2 * n], y[2 * n:3 * n], y[3 * n:4 * n]
        c = y[4 * n:]
        raw = np.concatenate([q1, v1, c[:n], fj.K @ q2, fj.K @ v2, c[n:]])
        ds, aux = rhs_eval(cl, t, raw)
        u = aux[:n]
        tau = imap(q1, q2, u)
        a1, a2 = flexjoint_accel(fj, q1, v1, q2, v2, tau)
        return np.concatenate([v1, a1, v2, a2, ds[2 * n:3 * n], ds[5 * n:]])

    T, Y = rk4_integrate(f, np.concatenate([q1, v1, q2, v2, ctrl0]), t0, t0 + horizon, h)
    return T, Y[:, :n], Y[:, 2 * n:3 * n]


# ------------------------------------------------------------ export

def csv_columns(cl):
    n, m = cl.n, cl.m
    cols = ["t"]
    cols += [f"qtilde_{j}" for j in range(n)]
    cols += [f"dqtilde_{j}" for j in range(n)]
    cols += [f"theta0_{j}" for j in range(n)]
    for i in range(1, m + 1):
        cols += [f"xi_{i}_{j}" for j in range(n)]
    for i in range(1, m + 1):
        cols += [f"theta_{i}_{j}" for j in range(n)]
    cols += [f"u_{j}" for j in range(n)]
    return cols + ["V1", "V2", "V", "W"]


def trajectory_table(traj):
    mon = traj.monitors()
    return np.column_stack([traj.t, traj.x, traj.u, mon["V1"], mon["V2"], mon["V"], mon["W"]])


def write_csv(traj, path):
    table = trajectory_table(traj)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_columns(traj.cl))
        for row in table:
            w.writerow([repr(float(v)) for v in row])


def summary(traj):
    nx = traj.norm_x()
    return {
        "samples": int(traj.t.size),
        "t0": float(traj.t[0]),
        "t_end": float(traj.t[-1]),
        "h": traj.h,
        "record_every": traj.record_every,
        "diverged": traj.diverged,
        "t_blowup": None if not traj.diverged else float(traj.t_blowup),
        "x0_norm": float(nx[0]),
        "final_norm": float(nx[-1]),
        "peak_norm": float(nx.max()),
        "controller": traj.cl.controller,
        "m": traj.cl.m,
    }


def write_json(obj, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating,)):
        o = float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, float) and not math.isfinite(o):
        return "inf" if o > 0 else ("-inf" if o < 0 else "nan")
    return o
