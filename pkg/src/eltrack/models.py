"""Euler-Lagrange plant models, structural bounds and the flexible-joint chain."""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .numerics import NotPositiveDefiniteError, solve_spd


class ParameterError(ValueError):
    """Raised for invalid model parameters."""


class ModelIntegrityError(RuntimeError):
    """Raised when the inertia matrix loses positive definiteness."""


@dataclass(frozen=True)
class ModelBounds:
    """Structural constants of a model.

    ``lam`` is the Lipschitz constant of C in its first argument, measured
    against sat(s) = sat_delta1 * min(sat_delta2, s).
    """
    d_m: float
    d_M: float
    k_c: float
    k_v: float
    lam: float
    sat_delta1: float = 1.0
    sat_delta2: float = 1.0
    method: str = "analytic"

    def __post_init__(self):
        if not (0 < self.d_m <= self.d_M):
            raise ParameterError(f"need 0 < d_m <= d_M, got {self.d_m}, {self.d_M}")
        if min(self.k_c, self.k_v, self.lam) < 0:
            raise ParameterError("k_c, k_v and lam must be nonnegative")

    def sat(self, s):
        return self.sat_delta1 * np.minimum(self.sat_delta2, s)


@dataclass(frozen=True, eq=False)
class ELModel:
    """D(q) q'' + C(q, q') q' + g(q) + F q' = u.

    ``kind`` and ``params`` identify catalog models the compiled kernel can
    evaluate; ``coriolis_jvp(q, y, dq)`` is the derivative of C(q, y) along dq.
    """
    n: int
    inertia: Callable
    coriolis: Callable
    gravity: Callable
    gravity_jacobian: Callable
    bounds: ModelBounds
    friction: Optional[np.ndarray] = None
    name: str = "custom"
    kind: str = "custom"
    params: tuple = ()
    coriolis_jvp: Optional[Callable] = None
    potential: Optional[Callable] = None

    def with_friction(self, F):
        """Copy of the model with friction matrix F (scalar means F*I)."""
        if F is None:
            return replace(self, friction=None)
        F = np.asarray(F, dtype=float)
        if F.ndim == 0:
            F = float(F) * np.eye(self.n)
        if F.shape != (self.n, self.n) or not np.allclose(F, F.T):
            raise ParameterError("friction must be a symmetric n x n matrix")
        if np.linalg.eigvalsh(F).min() <= 0:
            raise ParameterError("friction must be positive definite")
        F.setflags(write=False)
        return replace(self, friction=F)

    def dC(self, q, y, dq, eps=1e-6):
        """Directional derivative of C(q, y) in q along dq."""
        if self.coriolis_jvp is not None:
            return self.coriolis_jvp(q, y, dq)
        q = np.asarray(q, float)
        dq = np.asarray(dq, float)
        return (self.coriolis(q + eps * dq, y) - self.coriolis(q - eps * dq, y)) / (2 * eps)

    def energy(self, q, v):
        if self.potential is None:
            raise ParameterError(f"model {self.name} has no potential")
        v = np.asarray(v, float)
        return 0.5 * v @ self.inertia(q) @ v + self.potential(q)


def el_accel(model, q, v, u):
    """q'' = D(q)^-1 (u - C(q, v) v - g(q) - F v)."""
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    rhs = np.asarray(u, float) - model.coriolis(q, v) @ v - model.gravity(q)
    if model.friction is not None:
        rhs = rhs - model.friction @ v
    try:
        return solve_spd(model.inertia(q), rhs)
    except NotPositiveDefiniteError as exc:
        raise ModelIntegrityError(f"inertia of {model.name} not positive definite at q={q}") from exc


def _positive(**kw):
    for k, v in kw.items():
        if not (np.isfinite(v) and v > 0):
            raise ParameterError(f"{k} must be positive, got {v}")


def _nonneg(**kw):
    for k, v in kw.items():
        if not (np.isfinite(v) and v >= 0):
            raise ParameterError(f"{k} must be nonnegative, got {v}")


def make_pendulum(mass=1.0, length=1.0, g0=9.81, spring=0.0, friction=None):
    """Single pendulum D = m l^2, C = 0, g = m g0 l sin q (+ spring q)."""
    _positive(mass=mass, length=length)
    _nonneg(g0=g0, spring=spring)
    d = mass * length ** 2
    mgl = mass * g0 * length
    Dm = np.array([[d]])
    Z = np.zeros((1, 1))

    bounds = ModelBounds(d_m=d, d_M=d, k_c=0.0, k_v=mgl + spring, lam=0.0)
    model = ELModel(
        n=1,
        inertia=lambda q: Dm.copy(),
        coriolis=lambda q, y: Z.copy(),
        gravity=lambda q: np.array([mgl * np.sin(q[0]) + spring * q[0]]),
        gravity_jacobian=lambda q: np.array([[mgl * np.cos(q[0]) + spring]]),
        bounds=bounds,
        name="pendulum",
        kind="pendulum",
        params=(float(mass), float(length), float(g0), float(spring)),
        coriolis_jvp=lambda q, y, dq: Z.copy(),
        potential=lambda q: mgl * (1 - np.cos(q[0])) + 0.5 * spring * q[0] ** 2,
    )
    return model.with_friction(friction) if friction is not None else model


def _twolink_M(y):
    return np.array([[-y[1], -(y[0] + y[1])], [y[0], 0.0]])


def _twolink_sigma_star():
    """max over unit y of the spectral norm of the linear map y -> M(y)."""
    f = lambda th: -np.linalg.norm(_twolink_M((np.cos(th), np.sin(th))), 2)
    grid = np.linspace(0.0, 2 * np.pi, 4001)
    vals = np.array([f(t) for t in grid])
    i = int(np.argmin(vals))
    res = minimize_scalar(f, bounds=(grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]),
                          method="bounded", options={"xatol": 1e-12})
    return max(-res.fun, -vals[i])


def make_two_link(a1=3.3, a2=0.97, a3=1.04, g1=14.7, g2=4.9, spring=(0.0, 0.0), friction=None):
    """Planar 2R arm in the (a1, a2, a3) inertia parametrization.

    D = [[a1 + 2 a3 c2, a2 + a3 c2], [a2 + a3 c2, a2]],
    C = a3 sin q2 [[-q2', -(q1' + q2')], [q1', 0]],
    g = [g1 c1 + g2 c12, g2 c12] (+ diag(spring) q).
    """
    _positive(a1=a1, a2=a2, a3=a3)
    _nonneg(g1=g1, g2=g2)
    k1, k2 = (float(s) for s in np.broadcast_to(np.asarray(spring, float), (2,)))
    _nonneg(spring1=k1, spring2=k2)
    if a2 * (a1 - a2) - a3 ** 2 <= 0:
        raise ParameterError("inertia parameters give an indefinite D(q)")

    def inertia(q):
        c2 = np.cos(q[1])
        return np.array([[a1 + 2 * a3 * c2, a2 + a3 * c2], [a2 + a3 * c2, a2]])

    def coriolis(q, y):
        return a3 * np.sin(q[1]) * _twolink_M(y)

    def coriolis_jvp(q, y, dq):
        return a3 * np.cos(q[1]) * dq[1] * _twolink_M(y)

    def gravity(q):
        c12 = np.cos(q[0] + q[1])
        return np.array([g1 * np.cos(q[0]) + g2 * c12 + k1 * q[0], g2 * c12 + k2 * q[1]])

    def gravity_jacobian(q):
        s1 = np.sin(q[0])
        s12 = np.sin(q[0] + q[1])
        return np.array([[-g1 * s1 - g2 * s12 + k1, -g2 * s12], [-g2 * s12, -g2 * s12 + k2]])

    def potential(q):
        return g1 * np.sin(q[0]) + g2 * np.sin(q[0] + q[1]) + 0.5 * (k1 * q[0] ** 2 + k2 * q[1] ** 2)

    c = np.linspace(-1.0, 1.0, 20001)
    tr = a1 + 2 * a3 * c + a2
    det = (a1 + 2 * a3 * c) * a2 - (a2 + a3 * c) ** 2
    disc = np.sqrt(np.maximum(tr ** 2 / 4 - det, 0.0))
    sig = _twolink_sigma_star()
    bounds = ModelBounds(
        d_m=float(np.min(tr / 2 - disc)),
        d_M=float(np.max(tr / 2 + disc)),
        k_c=float(a3 * sig),
        # Frobenius bound on the gravity Jacobian plus the spring
        k_v=float(np.sqrt((g1 + g2) ** 2 + 3 * g2 ** 2) + max(k1, k2)),
        # |sin w - sin z| <= min(2, |w - z|) <= 2 min(1, |w - z|)
        lam=float(2 * a3 * sig),
        method="analytic; d_m/d_M by eigenvalue grid over cos q2",
    )
    model = ELModel(
        n=2, inertia=inertia, coriolis=coriolis, gravity=gravity,
        gravity_jacobian=gravity_jacobian, bounds=bounds, name="two_link",
        kind="two_link", params=(float(a1), float(a2), float(a3), float(g1), float(g2), k1, k2),
        coriolis_jvp=coriolis_jvp, potential=potential,
    )
    return model.with_friction(friction) if friction is not None else model


@dataclass(frozen=True, eq=False)
class FlexJointModel:
    """Link dynamics D q1'' + C q1' + gbar(q1) + K (q1 - q2) = 0 and
    motor dynamics J q2'' + K (q2 - q1) = tau."""
    link: ELModel
    K: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        n = self.link.n
        for name in ("K", "J"):
            M = np.asarray(getattr(self, name), float)
            if M.ndim == 1:
                M = np.diag(M)
            if M.shape != (n, n) or np.any(M != np.diag(np.diag(M))) or np.any(np.diag(M) <= 0):
                raise ParameterError(f"{name} must be diagonal with positive entries")
            M.setflags(write=False)
            object.__setattr__(self, name, M)


@dataclass(frozen=True, eq=False)
class ChainPlant:
    """EL model driven through m integrators: xi_1' = xi_2, ..., xi_m' = u."""
    base: ELModel
    m: int

    def __post_init__(self):
        if self.m < 0:
            raise ParameterError("m must be nonnegative")

    @property
    def state_dim(self):
        return (2 + self.m) * self.base.n


@dataclass(frozen=True, eq=False)
class FlexInputMap:
    """tau = K (q2 - q1) + J K^-1 u, with xi1 = K q2 and xi2 = K q2'."""
    K: np.ndarray
    J: np.ndarray
    Kinv: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "Kinv", np.diag(1.0 / np.diag(self.K)))

    def __call__(self, q1, q2, u):
        return self.K @ (np.asarray(q2) - np.asarray(q1)) + self.J @ self.Kinv @ np.asarray(u)

    def chain_state(self, q1, dq1, q2, dq2):
        return np.asarray(q1, float), np.asarray(dq1, float), [self.K @ q2, self.K @ dq2]

    def flex_state(self, q, v, xi):
        return q, v, self.Kinv @ xi[0], self.Kinv @ xi[1]


def add_spring(model, K):
    """Copy of ``model`` with gravity g(q) + K q (K diagonal)."""
    K = np.asarray(K, float)
    k = np.diag(K) if K.ndim == 2 else np.broadcast_to(K, (model.n,)).astype(float)
    if model.kind == "pendulum":
        mass, length, g0, s0 = model.params
        out = make_pendulum(mass, length, g0, spring=s0 + k[0])
    elif model.kind == "two_link":
        a1, a2, a3, g1, g2, s1, s2 = model.params
        out = make_two_link(a1, a2, a3, g1, g2, spring=(s1 + k[0], s2 + k[1]))
    else:
        Kd = np.diag(k)
        base = model
        pot = None if base.potential is None else (lambda q: base.potential(q) + 0.5 * q @ Kd @ q)
        out = replace(
            base,
            gravity=lambda q: base.gravity(q) + Kd @ q,
            gravity_jacobian=lambda q: base.gravity_jacobian(q) + Kd,
            bounds=replace(base.bounds, k_v=base.bounds.k_v + float(k.max())),
            potential=pot,
            name=base.name + "+spring",
        )
        return out
    out = replace(out, name=model.name + "+spring")
    return out.with_friction(model.friction) if model.friction is not None else out


def flexjoint_to_chain(fj):
    """Rewrite a flexible-joint robot as the m = 2 chain and its input map."""
    return ChainPlant(add_spring(fj.link, fj.K), 2), FlexInputMap(fj.K, fj.J)


def flexjoint_accel(fj, q1, v1, q2, v2, tau):
    """Link and motor accelerations of the flexible-joint model."""
    spring = fj.K @ (np.asarray(q1) - np.asarray(q2))
    a1 = el_accel(fj.link, q1, v1, -spring)
    a2 = np.linalg.solve(fj.J, np.asarray(tau) + spring)
    return a1, a2


def make_flexjoint(link="pendulum", stiffness=5.0, rotor_inertia=0.5, **link_params):
    base = MODEL_CATALOG[link](**link_params)
    n = base.n
    K = np.broadcast_to(np.asarray(stiffness, float), (n,))
    J = np.broadcast_to(np.asarray(rotor_inertia, float), (n,))
    return FlexJointModel(base, np.diag(K), np.diag(J))


MODEL_CATALOG = {
    "pendulum": make_pendulum,
    "two_link": make_two_link,
}


def make_model(name, **params):
    """Look up a model (or a flexible-joint model, prefix ``flexjoint_``) by name."""
    if name.startswith("flexjoint_"):
        link = name[len("flexjoint_"):]
        if link not in MODEL_CATALOG:
            raise ParameterError(f"unknown model {name!r}")
        return make_flexjoint(link, **params)
    if name not in MODEL_CATALOG:
        raise ParameterError(f"unknown model {name!r}; known: {sorted(MODEL_CATALOG)}")
    return MODEL_CATALOG[name](**params)
