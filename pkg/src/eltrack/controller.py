"""Position-feedback tracking laws: the dirty-derivative law and its cascade."""

from dataclasses import dataclass, field
from typing import List

import numpy as np


class ConfigurationError(ValueError):
    """Raised for inconsistent controller configuration."""


def _as_gain(x):
    if np.ndim(x) == 0:
        return float(x)
    return tuple(float(v) for v in x)


@dataclass(frozen=True)
class GainSet:
    """Rigid-loop gains (scalars or per-joint tuples) and per-stage chain gains."""
    kp0: object
    kd0: object
    a0: object
    b0: object
    kp: tuple = ()
    kd: tuple = ()
    a: tuple = ()
    b: tuple = ()

    def __post_init__(self):
        for name in ("kp0", "kd0", "a0", "b0"):
            object.__setattr__(self, name, _as_gain(getattr(self, name)))
        for name in ("kp", "kd", "a", "b"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        m = len(self.kp)
        if not (len(self.kd) == len(self.a) == len(self.b) == m):
            raise ConfigurationError("stage gain lists must have equal length")
        for name in ("kp0", "kd0", "a0", "b0", "kp", "kd", "a", "b"):
            vals = np.atleast_1d(getattr(self, name))
            if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise ConfigurationError(f"gain {name} must be positive, got {getattr(self, name)}")

    @property
    def m(self):
        return len(self.kp)

    @property
    def sigma(self):
        """sigma_1 = 0, sigma_i = b_i kp_{i-1}."""
        return tuple([0.0] + [self.b[i] * self.kp[i - 1] for i in range(1, self.m)])

    def vec(self, name, n):
        return np.broadcast_to(np.asarray(getattr(self, name), float), (n,)).copy()

    def extreme(self, name, which):
        vals = np.atleast_1d(getattr(self, name))
        return float(vals.min() if which == "min" else vals.max())

    def stage(self, m):
        """Copy keeping only the first m stages."""
        return GainSet(self.kp0, self.kd0, self.a0, self.b0,
                       self.kp[:m], self.kd[:m], self.a[:m], self.b[:m])

    def to_dict(self):
        d = {}
        for k in ("kp0", "kd0", "a0", "b0"):
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        for k in ("kp", "kd", "a", "b"):
            d[k] = list(getattr(self, k))
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kp0"], d["kd0"], d["a0"], d["b0"],
                   tuple(d.get("kp", ())), tuple(d.get("kd", ())),
                   tuple(d.get("a", ())), tuple(d.get("b", ())))


@dataclass
class ControllerState:
    """Filter states qc0 and, per chain stage, qc_i and zeta_i."""
    qc0: np.ndarray
    qc: List[np.ndarray] = field(default_factory=list)
    zeta: List[np.ndarray] = field(default_factory=list)

    def pack(self):
        return np.concatenate([self.qc0, *self.qc, *self.zeta])

    @classmethod
    def unpack(cls, vec, n, m):
        vec = np.asarray(vec, float)
        qc0 = vec[:n]
        qc = [vec[n * (1 + i):n * (2 + i)] for i in range(m)]
        zeta = [vec[n * (1 + m + i):n * (2 + m + i)] for i in range(m)]
        return cls(qc0, qc, zeta)


@dataclass
class ControlOutput:
    """Control value with the intermediate signals of the law."""
    u: np.ndarray
    theta0: np.ndarray
    xi_star: List[np.ndarray] = field(default_factory=list)
    theta: List[np.ndarray] = field(default_factory=list)
    xi_tilde: List[np.ndarray] = field(default_factory=list)


def _unpack_ref(ref_at_t):
    qd, vd, ad = ref_at_t[0], ref_at_t[1], ref_at_t[2]
    return np.asarray(qd, float), np.asarray(vd, float), np.asarray(ad, float)


def feedforward(q, ref_at_t, model):
    """D(q) q_d'' + C(q, q_d') q_d' + g(q)."""
    _, vd, ad = _unpack_ref(ref_at_t)
    return model.inertia(q) @ ad + model.coriolis(q, vd) @ vd + model.gravity(q)


def xi1_star(gains, theta0, q, ref_at_t, model):
    """-kp0 q~ - kd0 theta0 + D(q) q_d'' + C(q, q_d') q_d' + g(q)."""
    n = model.n
    q = np.asarray(q, float)
    qt = q - np.asarray(ref_at_t[0], float)
    return -gains.vec("kp0", n) * qt - gains.vec("kd0", n) * np.asarray(theta0) + feedforward(q, ref_at_t, model)


def rd2_control(gains, state, q, ref_at_t, model):
    """Dirty-derivative tracking law; returns (u, d/dt of the filter state)."""
    n = model.n
    q = np.asarray(q, float)
    if q.shape != (n,) or np.shape(state.qc0) != (n,):
        raise ConfigurationError("dimension mismatch in rd2_control")
    qt = q - np.asarray(ref_at_t[0], float)
    theta = state.qc0 + gains.vec("b0", n) * qt
    u = xi1_star(gains, theta, q, ref_at_t, model)
    return u, ControllerState(-gains.vec("a0", n) * theta)


def rd2_friction_feedforward(gains, state, q, ref_at_t, model):
    """Dirty-derivative law plus F q_d' (model must carry friction F)."""
    if model.friction is None:
        raise ConfigurationError("friction feedforward requires a model with friction")
    u, _ = rd2_control(gains, state, q, ref_at_t, model)
    return u + model.friction @ np.asarray(ref_at_t[1], float)


def xi1_star_dot(gains, q, v, theta0, ref_at_t, model):
    """Time derivative of xi1* along the closed loop, written with q'.

    Needs q_d''' (fourth entry of ``ref_at_t``).
    """
    if len(ref_at_t) < 4 or ref_at_t[3] is None:
        raise ConfigurationError("xi1* derivative needs the reference third derivative")
    n = model.n
    qd, vd, ad = _unpack_ref(ref_at_t)
    jd = np.asarray(ref_at_t[3], float)
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    dqt = v - vd
    kp0, kd0 = gains.vec("kp0", n), gains.vec("kd0", n)
    a0, b0 = gains.vec("a0", n), gains.vec("b0", n)
    Cv = model.coriolis(q, v)
    # C(q, q_d'') q_d' equals C(q, q_d') q_d'' by the exchange identity
    M_vd = model.dC(q, vd, v) @ vd + model.coriolis(q, ad) @ vd
    return (-kp0 * dqt - kd0 * (-a0 * theta0 + b0 * dqt)
            + (model.coriolis(q, vd) + Cv + Cv.T) @ ad
            + model.inertia(q) @ jd + M_vd + model.gravity_jacobian(q) @ v)


def cascade_control(gains, state, q, xi, ref_at_t, model):
    """Cascade law for the plant driven through m integrators.

    Returns (u, d/dt of the controller state, ControlOutput).
    """
    m = gains.m
    if m < 1:
        raise ConfigurationError("cascade_control needs m >= 1; use rd2_control for m = 0")
    if len(xi) != m or len(state.qc) != m or len(state.zeta) != m:
        raise ConfigurationError("chain state length does not match the gain set")
    n = model.n
    q = np.asarray(q, float)
    qt = q - np.asarray(ref_at_t[0], float)
    theta0 = state.qc0 + gains.vec("b0", n) * qt
    dqc0 = -gains.vec("a0", n) * theta0
    sig = gains.sigma
    xs = xi1_star(gains, theta0, q, ref_at_t, model)
    out = ControlOutput(u=None, theta0=theta0)
    dqc, dzeta = [], []
    for i in range(m):
        th = state.qc[i] + gains.b[i] * xs + state.zeta[i]
        xt = np.asarray(xi[i], float) - xs
        out.xi_star.append(xs)
        out.theta.append(th)
        out.xi_tilde.append(xt)
        dqc.append(-gains.a[i] * th)
        dzeta.append(-(gains.kd[i] - sig[i]) * xt)
        xs = -gains.kp[i] * xt + gains.kd[i] * th
    out.u = xs
    return xs, ControllerState(dqc0, dqc, dzeta), out


def raw_from_error(gains, model, ref_at_t, qt, dqt, theta0, xi_tilde=(), theta=()):
    """Plant and controller states realizing given error coordinates (zeta = 0).

    Returns (q, v, ControllerState, xi list).
    """
    n = model.n
    qd, vd, _ = _unpack_ref(ref_at_t)
    q = qd + np.asarray(qt, float)
    v = vd + np.asarray(dqt, float)
    theta0 = np.asarray(theta0, float)
    state = ControllerState(theta0 - gains.vec("b0", n) * np.asarray(qt, float))
    xs = xi1_star(gains, theta0, q, ref_at_t, model)
    xi = []
    for i in range(gains.m):
        xt = np.asarray(xi_tilde[i], float)
        th = np.asarray(theta[i], float)
        xi.append(xt + xs)
        state.qc.append(th - gains.b[i] * xs)
        state.zeta.append(np.zeros(n))
        xs = -gains.kp[i] * xt + gains.kd[i] * th
    return q, v, state, xi
