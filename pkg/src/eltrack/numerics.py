"""Small dense linear algebra and a fixed-step RK4 integrator."""

import math

import numpy as np


class DimensionError(ValueError):
    """Raised for non-square, asymmetric or mis-sized inputs."""


class NumericalError(RuntimeError):
    """Raised when an iterative method fails to converge."""

    def __init__(self, msg, iterations=None):
        super().__init__(msg)
        self.iterations = iterations


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky factorization breaks down."""


class DivergenceError(RuntimeError):
    """Raised when an integrated state turns non-finite."""

    def __init__(self, msg, t_blowup):
        super().__init__(msg)
        self.t_blowup = t_blowup


def _square(m):
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionError("matrix has non-finite entries")
    return a


def _cholesky(a, tol, semidefinite):
    """Return the lower factor, or None if a pivot fails the test."""
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if semidefinite:
            if d <= -tol:
                return None
            if d <= tol:
                # zero pivot: the rest of the column must vanish too
                r = a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]
                lim = math.sqrt(max(tol, 0.0)) * (1.0 + np.sqrt(np.abs(np.diag(a)[j + 1:])))
                if np.any(np.abs(r) > lim):
                    return None
                continue
        elif d <= tol:
            return None
        ljj = math.sqrt(d)
        L[j, j] = ljj
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / ljj
    return L


def chol_pd(m, tol=1e-12, semidefinite=False, scaled=False):
    """True iff Cholesky succeeds with every pivot > tol (or > -tol when semidefinite).

    With ``scaled`` the matrix is first congruence-scaled by powers of two
    toward a unit diagonal, which keeps badly scaled matrices resolvable; tol
    then applies to the scaled matrix.
    """
    a = _square(m)
    if np.max(np.abs(a - a.T), initial=0.0) > max(tol, 1e-12) * (1.0 + np.max(np.abs(a), initial=0.0)):
        raise DimensionError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    if scaled:
        d = np.diag(a)
        if np.any(d < 0) or (not semidefinite and np.any(d <= 0)):
            return False
        e = np.where(d > 0, -np.round(0.5 * np.log2(np.where(d > 0, d, 1.0))), 0.0)
        s = np.exp2(e)
        a = a * s[:, None] * s[None, :]
    return _cholesky(a, tol, semidefinite) is not None


def solve_spd(m, b):
    """Solve m y = b for symmetric positive-definite m by Cholesky."""
    a = _square(m)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"rhs length {b.shape[0]} does not match matrix size {a.shape[0]}")
    L = _cholesky(0.5 * (a + a.T), 0.0, False)
    if L is None:
        raise NotPositiveDefiniteError("Cholesky factorization failed")
    n = a.shape[0]
    z = np.empty_like(b, dtype=float)
    for i in range(n):
        z[i] = (b[i] - L[i, :i] @ z[:i]) / L[i, i]
    y = np.empty_like(z)
    for i in range(n - 1, -1, -1):
        y[i] = (z[i] - L[i + 1:, i] @ y[i + 1:]) / L[i, i]
    return y


def _hessenberg(a):
    """Householder reduction to upper Hessenberg form (complex copy)."""
    H = np.array(a, dtype=complex)
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k].copy()
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        phase = x[0] / abs(x[0]) if x[0] != 0 else 1.0
        v = x
        v[0] += phase * alpha
        v /= np.linalg.norm(v)
        H[k + 1:, k:] -= 2.0 * np.outer(v, v.conj() @ H[k + 1:, k:])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v.conj())
    return H


def _wilkinson(a, b, c, d):
    """Eigenvalue of [[a, b], [c, d]] closer to d."""
    tr = a + d
    det = a * d - b * c
    disc = np.sqrt(tr * tr / 4.0 - det)
    l1 = tr / 2.0 + disc
    l2 = tr / 2.0 - disc
    return l1 if abs(l1 - d) < abs(l2 - d) else l2


def balance(a):
    """Diagonal similarity by powers of two equalizing row and column norms.

    Returns (D^-1 a D, d) with D = diag(d); the spectrum is unchanged.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    d = np.ones(n)
    converged = False
    while not converged:
        converged = True
        for i in range(n):
            c = np.sum(np.abs(a[:, i])) - abs(a[i, i])
            r = np.sum(np.abs(a[i, :])) - abs(a[i, i])
            if c == 0.0 or r == 0.0:
                continue
            f = 1.0
            s = c + r
            while c < r / 2.0:
                c *= 2.0
                r /= 2.0
                f *= 2.0
            while c >= r * 2.0:
                c /= 2.0
                r *= 2.0
                f /= 2.0
            if (c + r) < 0.95 * s:
                converged = False
                d[i] *= f
                a[i, :] /= f
                a[:, i] *= f
    return a, d


def eigenvalues(m):
    """All eigenvalues via balancing, Hessenberg reduction and Wilkinson-shifted QR."""
    a = _square(m)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex)
    top = np.abs(a).max()
    if top == 0.0:
        return np.zeros(n, dtype=complex)
    # exact power-of-two scaling keeps tiny or huge entries out of under/overflow
    e = -math.frexp(top)[1]
    a = np.ldexp(a, e)
    # entries below eps^2 of the norm are a negligible backward perturbation but
    # would drive balancing factors toward overflow
    a[np.abs(a) < np.finfo(float).eps ** 2] = 0.0
    H = _hessenberg(balance(a)[0])
    eps = np.finfo(float).eps
    floor = 4 * eps * np.abs(H).max()
    cap = 100 * n
    its = 0
    since = 0
    hi = n - 1
    out = []
    while hi >= 0:
        if hi == 0:
            out.append(H[0, 0])
            break
        lo = hi
        while lo > 0:
            s = abs(H[lo - 1, lo - 1]) + abs(H[lo, lo])
            if abs(H[lo, lo - 1]) <= max(eps * s, floor):
                H[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            out.append(H[hi, hi])
            hi -= 1
            since = 0
            continue
        its += 1
        since += 1
        if its > cap:
            raise NumericalError(f"shifted QR did not converge after {its - 1} iterations", its - 1)
        if since % 11 == 10:
            mu = H[hi, hi] + 0.75 * abs(H[hi, hi - 1])
        else:
            mu = _wilkinson(H[hi - 1, hi - 1], H[hi - 1, hi], H[hi, hi - 1], H[hi, hi])
        # one explicit shifted QR step on the active block via Givens rotations
        B = H[lo:hi + 1, lo:hi + 1]
        k = B.shape[0]
        B -= mu * np.eye(k)
        rots = []
        for i in range(k - 1):
            x, y = B[i, i], B[i + 1, i]
            r = math.hypot(abs(x), abs(y))
            if r == 0.0:
                c, s = 1.0, 0.0
            else:
                c, s = x / r, y / r
            G = np.array([[np.conj(c), np.conj(s)], [-s, c]])
            B[i:i + 2, i:] = G @ B[i:i + 2, i:]
            rots.append(G)
        for i, G in enumerate(rots):
            B[:i + 2, i:i + 2] = B[:i + 2, i:i + 2] @ G.conj().T
        B += mu * np.eye(k)
        H[lo:hi + 1, lo:hi + 1] = B
    return np.ldexp(np.array(out[::-1]).real, -e) + 1j * np.ldexp(np.array(out[::-1]).imag, -e)


def max_real_eig(m):
    """Largest real part over the spectrum of a square matrix."""
    return float(np.max(eigenvalues(m).real))


def rk4_integrate(f, x0, t0, t1, h):
    """Classical RK4 from t0 to t1 with fixed step h.

    Returns (t, X) with one row per step; the final step is shortened so the
    grid ends exactly at t1.
    """
    if not h > 0 or not t1 > t0:
        raise ValueError("need h > 0 and t1 > t0")
    x = np.array(x0, dtype=float)
    nfull = int(math.floor((t1 - t0) / h + 1e-9))
    ts = [t0 + i * h for i in range(nfull + 1)]
    if t1 - ts[-1] > 1e-12 * max(1.0, abs(t1)):
        ts.append(t1)
    else:
        ts[-1] = t1
    X = np.empty((len(ts), x.size))
    X[0] = x
    for i in range(len(ts) - 1):
        t = ts[i]
        dt = ts[i + 1] - t
        k1 = f(t, x)
        k2 = f(t + dt / 2, x + dt / 2 * k1)
        k3 = f(t + dt / 2, x + dt / 2 * k2)
        k4 = f(t + dt, x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"state became non-finite at t={ts[i + 1]}", ts[i + 1])
        X[i + 1] = x
    return np.array(ts), X
