"""Compiled kernel against the pure-Python port: wall time and largest state deviation.

Usage: python3 benchmarks/bench_kernels.py [--horizon T] [--h H]
"""

import argparse
import time

import numpy as np

from eltrack import _core_py
from eltrack.controller import GainSet
from eltrack.models import make_pendulum, make_two_link
from eltrack.reference import make_sinusoid_ref, make_unforced_ref
from eltrack.simulate import ClosedLoop, initial_raw, kernel_args, sphere_directions

try:
    from eltrack import _core
except ImportError:
    _core = None


def cases():
    tl = make_two_link()
    yield "two_link rd2", ClosedLoop(tl, GainSet(50, 20, 30, 30),
                                     make_sinusoid_ref([2 ** -0.5, 0.0], [1.0, 1.0]))
    p = make_pendulum()
    ref = make_unforced_ref(p, [0.5], [0.0], 40.0)
    yield "pendulum cascade m=2", ClosedLoop(
        p, GainSet(4, 4, 4, 1, (0.5, 40), (30, 1.25), (50, 0.45), (0.2, 0.075)), ref, "cascade")


def timed(impl, args, s0, horizon, h):
    t = time.perf_counter()
    T, X, A, status, tf = impl.integrate(*args, s0, 0.0, horizon, h, 1, 1e9)
    return time.perf_counter() - t, X


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=float, default=2.0)
    ap.add_argument("--h", type=float, default=1e-3)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled kernel not built; nothing to compare")
        return 1
    print(f"{'case':24s} {'compiled s':>11s} {'python s':>10s} {'speedup':>8s} {'max dev':>10s}")
    for name, cl in cases():
        kargs = kernel_args(cl)
        s0 = np.ascontiguousarray(initial_raw(cl, 0.5 * sphere_directions(cl.err_dim, 1, 0)[0]))
        tc, Xc = timed(_core, kargs, s0, args.horizon, args.h)
        tp, Xp = timed(_core_py, kargs, s0, args.horizon, args.h)
        dev = float(np.max(np.abs(Xc - Xp)))
        print(f"{name:24s} {tc:11.4f} {tp:10.3f} {tp / tc:8.0f} {dev:10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
