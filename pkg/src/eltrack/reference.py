"""Reference trajectories: analytic sinusoids and unforced EL solutions."""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .models import el_accel
from .numerics import DivergenceError, rk4_integrate, solve_spd


class ReferenceInvalidError(ValueError):
    """Raised when a reference cannot be generated or queried."""


@dataclass(frozen=True, eq=False)
class Reference:
    """Time-indexed q_d with derivatives.

    ``eval(t)`` returns (q_d, q_d', q_d'', q_d''') with the last entry None
    when the third derivative is unavailable.
    """
    n: int
    evaluate: Callable
    k_delta: float
    kind: str
    params: dict = field(default_factory=dict)
    model: Optional[object] = None
    has_jerk: bool = True
    period: Optional[float] = None

    def eval(self, t):
        return self.evaluate(float(t))

    def unforced_residual(self, model, times):
        """max over times of |D(q_d) q_d'' + C(q_d, q_d') q_d' + g(q_d)|."""
        worst = 0.0
        for t in times:
            qd, vd, ad, _ = self.eval(t)
            r = model.inertia(qd) @ ad + model.coriolis(qd, vd) @ vd + model.gravity(qd)
            worst = max(worst, float(np.linalg.norm(r)))
        return worst


def make_sinusoid_ref(amplitudes, frequencies, phases=None):
    """q_d,i(t) = A_i sin(w_i t + phi_i)."""
    A = np.atleast_1d(np.asarray(amplitudes, float))
    n = A.size
    w = np.broadcast_to(np.asarray(frequencies, float), (n,)).copy()
    phi = np.zeros(n) if phases is None else np.broadcast_to(np.asarray(phases, float), (n,)).copy()
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(w)) and np.all(np.isfinite(phi))):
        raise ReferenceInvalidError("sinusoid parameters must be finite")

    def evaluate(t):
        s = np.sin(w * t + phi)
        c = np.cos(w * t + phi)
        return A * s, A * w * c, -A * w ** 2 * s, -A * w ** 3 * c

    kd = float(np.max(np.abs(A) * np.maximum(1.0, np.maximum(np.abs(w), w ** 2))) * np.sqrt(n)) if n else 0.0
    wpos = np.abs(w[(np.abs(w) > 0) & (np.abs(A) > 0)])
    period = float(2 * np.pi / wpos.min()) if wpos.size else None
    return Reference(
        n=n, evaluate=evaluate, k_delta=kd, kind="sinusoid",
        params={"amplitudes": A.tolist(), "frequencies": w.tolist(), "phases": phi.tolist()},
        period=period,
    )


def make_static_ref(qd):
    """Constant reference (a sinusoid frozen at its crest)."""
    qd = np.atleast_1d(np.asarray(qd, float))
    return make_sinusoid_ref(qd, np.zeros_like(qd), np.full_like(qd, np.pi / 2))


def unforced_jerk(model, q, v, a):
    """Third derivative of an unforced solution passing through (q, v, a)."""
    C = model.coriolis(q, v)
    rhs = (C + C.T) @ a + model.dC(q, v, v) @ v + 2 * C @ a + model.gravity_jacobian(q) @ v
    return -solve_spd(model.inertia(q), rhs)


def make_unforced_ref(model, q0, v0, horizon, h=1e-4, cap=1e6):
    """Solution of D q'' + C q' + g = 0 from (q0, v0), sampled on [0, horizon]."""
    if model.friction is not None:
        raise ReferenceInvalidError("unforced references use the friction-free model")
    n = model.n
    q0 = np.broadcast_to(np.asarray(q0, float), (n,)).copy()
    v0 = np.broadcast_to(np.asarray(v0, float), (n,)).copy()
    zero = np.zeros(n)

    def f(t, x):
        return np.concatenate([x[n:], el_accel(model, x[:n], x[n:], zero)])

    if model.kind in kernels.MODEL_KINDS:
        ts, X, Acc = kernels.unforced_flow(kernels.MODEL_KINDS[model.kind],
                                           np.asarray(model.params, float),
                                           np.concatenate([q0, v0]), float(horizon), float(h))
        if not np.all(np.isfinite(X)):
            raise ReferenceInvalidError("unforced solution is not finite")
    else:
        try:
            ts, X = rk4_integrate(f, np.concatenate([q0, v0]), 0.0, float(horizon), h)
        except DivergenceError as exc:
            raise ReferenceInvalidError(f"unforced solution blew up at t={exc.t_blowup}") from exc
        Acc = np.array([el_accel(model, X[i, :n], X[i, n:], zero) for i in range(len(ts))])
    Q, V = X[:, :n].copy(), X[:, n:].copy()
    peak = max(np.abs(Q).max(), np.abs(V).max(), np.abs(Acc).max())
    if not np.isfinite(peak) or peak > cap:
        raise ReferenceInvalidError(f"unforced solution exceeds cap {cap:g}")
    sup = max(np.linalg.norm(Q, axis=1).max(), np.linalg.norm(V, axis=1).max(),
              np.linalg.norm(Acc, axis=1).max())
    T = float(ts[-1])
    dt = float(h)

    def evaluate(t):
        if t < -1e-12 or t > T + 1e-12:
            raise ReferenceInvalidError(f"t={t} outside stored horizon [0, {T}]")
        i = min(int(t / dt), len(ts) - 2)
        # cubic Hermite on [t_i, t_{i+1}] using stored derivatives
        hh = ts[i + 1] - ts[i]
        s = (t - ts[i]) / hh
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        qd = h00 * Q[i] + h10 * hh * V[i] + h01 * Q[i + 1] + h11 * hh * V[i + 1]
        vd = h00 * V[i] + h10 * hh * Acc[i] + h01 * V[i + 1] + h11 * hh * Acc[i + 1]
        ad = el_accel(model, qd, vd, zero)
        return qd, vd, ad, unforced_jerk(model, qd, vd, ad)

    return Reference(
        n=n, evaluate=evaluate, k_delta=float(1.05 * sup), kind="unforced",
        params={"q0": q0.tolist(), "v0": v0.tolist(), "horizon": T,
                "sup_dq": float(np.linalg.norm(V, axis=1).max())},
        model=model,
    )
