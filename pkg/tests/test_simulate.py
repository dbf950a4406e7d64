import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eltrack import _core_py, kernels
from eltrack.certify import check_thm1
from eltrack.controller import ConfigurationError, GainSet
from eltrack.models import flexjoint_to_chain, make_flexjoint, make_pendulum, make_two_link
from eltrack.numerics import rk4_integrate
from eltrack.reference import make_sinusoid_ref, make_static_ref, make_unforced_ref
from eltrack.simulate import (ClosedLoop, check_vdot_bound, csv_columns, empirical_ugas,
                              envelope_check, fit_exponential, form_equivalence, initial_raw,
                              kernel_args, lyapunov_v1, passivity_balance, python_rhs,
                              run_closed_loop, simulate_flexjoint, sphere_directions, write_csv,
                              write_json)

TWO_LINK = make_two_link()
PEND = make_pendulum()
SIN2 = make_sinusoid_ref([2 ** -0.5, 0.0], [1.0, 1.0])
G_RIGID = GainSet(50, 20, 30, 30)
G_M1 = GainSet(4, 4, 4, 1, (10,), (10,), (10,), (1,))
G_M2 = GainSet(4, 4, 4, 1, (0.5, 40), (30, 1.25), (50, 0.45), (0.2, 0.075))


def loops():
    uref = make_unforced_ref(PEND, [0.5], [0.0], 12.0)
    return {
        "rd2": ClosedLoop(TWO_LINK, G_RIGID, SIN2),
        "rd2_ff": ClosedLoop(TWO_LINK.with_friction(2.0), G_RIGID, SIN2, "rd2_ff"),
        "cascade_m1": ClosedLoop(PEND, G_M1, uref, "cascade"),
        "cascade_m2": ClosedLoop(PEND, G_M2, uref, "cascade"),
    }


@pytest.mark.parametrize("name", ["rd2", "rd2_ff", "cascade_m1", "cascade_m2"])
def test_equilibrium_invariance(name):
    cl = loops()[name]
    tr = run_closed_loop(cl, np.zeros(cl.err_dim), 0.0, 10.0, 1e-3, record_every=10)
    assert not tr.diverged
    assert tr.norm_x().max() <= 1e-9
    if cl.controller != "cascade":
        m = cl.model
        ff = np.array([m.inertia(q) @ tr.aux[i, 3 * cl.n:4 * cl.n] + m.coriolis(q, vd) @ vd + m.gravity(q)
                       + (m.friction @ vd if m.friction is not None else 0)
                       for i, (q, vd) in enumerate(zip(tr.q, tr.vd))])
        assert np.allclose(tr.u, ff, atol=1e-9)


def test_initial_state_realizes_error_coordinates():
    for cl in loops().values():
        x0 = sphere_directions(cl.err_dim, 1, 5)[0]
        tr = run_closed_loop(cl, x0, 0.7, 0.01, 1e-3)
        assert np.allclose(tr.x[0], x0, atol=1e-12)


@pytest.mark.parametrize("name", ["rd2", "cascade_m2"])
def test_kernel_matches_generic_python(name):
    cl = loops()[name]
    x0 = 0.5 * sphere_directions(cl.err_dim, 1, 1)[0]
    a = run_closed_loop(cl, x0, 0.0, 1.0, 1e-3)
    b = run_closed_loop(cl, x0, 0.0, 1.0, 1e-3, backend="python")
    assert b.backend == "generic"
    assert np.abs(a.raw - b.raw).max() <= 1e-9 * (1 + np.abs(a.raw).max())
    assert np.abs(a.aux - b.aux).max() <= 1e-8 * (1 + np.abs(a.aux).max())


@pytest.mark.skipif(not kernels.COMPILED, reason="compiled kernel not built")
@pytest.mark.parametrize("name", ["rd2", "rd2_ff", "cascade_m1", "cascade_m2"])
def test_compiled_matches_pure_python_port(name):
    from eltrack import _core
    cl = loops()[name]
    args = kernel_args(cl)
    s0 = np.ascontiguousarray(initial_raw(cl, 0.5 * sphere_directions(cl.err_dim, 1, 2)[0]))
    out_c = _core.integrate(*args, s0, 0.0, 0.5, 1e-3, 1, 1e9)
    out_p = _core_py.integrate(*args, s0, 0.0, 0.5, 1e-3, 1, 1e9)
    assert np.abs(out_c[1] - out_p[1]).max() <= 1e-12 * (1 + np.abs(out_p[1]).max())
    assert out_c[3] == out_p[3]


def test_refinement_is_fourth_order():
    cl = loops()["rd2"]
    x0 = sphere_directions(cl.err_dim, 1, 0)[0]
    finals = [run_closed_loop(cl, x0, 0.0, 2.0, h).raw[-1] for h in (4e-3, 2e-3, 1e-3)]
    e1 = np.abs(finals[0] - finals[2]).max()
    e2 = np.abs(finals[1] - finals[2]).max()
    assert e2 < e1 / 8


def test_theta0_reconstruction():
    """qc0 + b0 q~ equals theta0 integrated from theta0' = -a0 theta0 + b0 q~'."""
    cl = ClosedLoop(TWO_LINK, GainSet(50, 20, 30, 7), SIN2)
    n = cl.n
    x0 = sphere_directions(cl.err_dim, 1, 3)[0]
    s0 = initial_raw(cl, x0)
    b0, a0 = 7.0, 30.0

    def f(t, y):
        ds = python_rhs(cl, t, y[:-n])[0]
        vd = cl.ref.eval(t)[1]
        return np.concatenate([ds, -a0 * y[-n:] + b0 * (y[n:2 * n] - vd)])

    t, Y = rk4_integrate(f, np.concatenate([s0, x0[2 * n:3 * n]]), 0.0, 2.0, 1e-3)
    qd = np.array([cl.ref.eval(tt)[0] for tt in t])
    recon = Y[:, 2 * n:3 * n] + b0 * (Y[:, :n] - qd)
    assert np.abs(recon - Y[:, -n:]).max() <= 1e-9


def test_divergence_marker():
    cl = ClosedLoop(TWO_LINK, G_RIGID, SIN2)
    tr = run_closed_loop(cl, 5 * np.ones(cl.err_dim), 0.0, 5.0, 1e-3, cap=1.0)
    assert tr.diverged and math.isfinite(tr.t_blowup) and tr.t_blowup < 5.0


def test_pendulum_tracking_converges():
    ref = make_sinusoid_ref([0.5], [1.0])
    g = GainSet(20, 10, 10, 10)
    assert check_thm1(g, PEND.bounds, ref.k_delta).overall
    cl = ClosedLoop(PEND, g, ref)
    tr = run_closed_loop(cl, sphere_directions(3, 1, 0)[0], 0.0, 10.0, 1e-3, record_every=10)
    assert tr.norm_x()[-1] < 1e-2


def test_two_link_large_spheres_converge_with_ordered_overshoot():
    cl = ClosedLoop(TWO_LINK, G_RIGID, SIN2)
    d = sphere_directions(cl.err_dim, 1, 4)[0]
    peaks = []
    for r in (10.0, 100.0):
        tr = run_closed_loop(cl, r * d, 0.0, 20.0, 1e-3, record_every=10)
        assert not tr.diverged and tr.norm_x()[-1] < 1e-3
        peaks.append(tr.norm_x().max())
    assert peaks[1] > peaks[0]


def test_friction_feedforward_converges_from_radius_10():
    cl = ClosedLoop(TWO_LINK.with_friction(2.0), G_RIGID, SIN2, "rd2_ff")
    tr = run_closed_loop(cl, 10 * sphere_directions(cl.err_dim, 1, 0)[0], 0.0, 20.0, 1e-3, record_every=10)
    assert tr.norm_x()[-1] < 1e-3


def test_v1_examples():
    cl = ClosedLoop(PEND, GainSet(10, 1, 1, 1), make_static_ref([0.0]))
    assert lyapunov_v1(cl, 0.0, initial_raw(cl, np.zeros(3))) == 0.0
    assert lyapunov_v1(cl, 0.0, initial_raw(cl, np.array([1.0, 0.0, 0.0]))) == pytest.approx(5.0)


@given(st.integers(0, 10 ** 6))
def test_v1_quadratic_bounds(seed):
    rng = np.random.default_rng(seed)
    g = GainSet(*(10 ** rng.uniform(-1, 2, 4)))
    cl = ClosedLoop(TWO_LINK, g, SIN2)
    b = TWO_LINK.bounds
    a1 = 0.5 * max(b.d_M, g.kp0, g.kd0 / g.b0)
    a2 = 0.5 * min(b.d_m, g.kp0, g.kd0 / g.b0)
    for _ in range(20):
        x = rng.normal(size=6) * 10 ** rng.uniform(-2, 2)
        t = rng.uniform(0, 10)
        V = lyapunov_v1(cl, t, initial_raw(cl, x, t))
        nx2 = x @ x
        assert a2 * nx2 * (1 - 1e-9) <= V <= a1 * nx2 * (1 + 1e-9)


def test_vdot_bound_pendulum_and_zero_state():
    ref = make_sinusoid_ref([0.5], [1.0])
    cl = ClosedLoop(PEND, GainSet(20, 10, 10, 10), ref)
    tr = run_closed_loop(cl, 2 * sphere_directions(3, 1, 0)[0], 0.0, 5.0, 1e-3)
    assert check_vdot_bound(tr).ok
    tr0 = run_closed_loop(cl, np.zeros(3), 0.0, 1.0, 1e-3)
    rep = check_vdot_bound(tr0)
    assert rep.ok and abs(rep.max_excess) <= 1e-12


def test_vdot_bound_two_link_batch():
    cl = ClosedLoop(TWO_LINK, G_RIGID, SIN2)
    for k, d in enumerate(sphere_directions(6, 20, 9)):
        tr = run_closed_loop(cl, (0.5 + k) * d, 0.3 * k, 3.0, 1e-3)
        assert check_vdot_bound(tr).ok


def test_envelope_holds():
    cl = ClosedLoop(TWO_LINK, G_RIGID, SIN2)
    for d in sphere_directions(6, 5, 2):
        ratio, c1, c2 = envelope_check(run_closed_loop(cl, 3 * d, 0.0, 5.0, 1e-3, record_every=10))
        assert ratio <= 1.0 and c1 >= 1.0 and c2 >= 0.0


def test_form_equivalence_m1_and_zero():
    uref = make_unforced_ref(PEND, [0.5], [0.0], 12.0)
    x0 = 0.5 * sphere_directions(5, 1, 3)[0]
    res = form_equivalence(G_M1, PEND, uref, x0, 10.0, 1e-3)
    assert not res["diverged"] and res["gap"] <= 1e-8
    assert form_equivalence(G_M1, PEND, uref, np.zeros(5), 2.0, 1e-3)["gap"] == 0.0


def test_passivity_static_reference():
    cl = ClosedLoop(TWO_LINK, G_RIGID, make_static_ref([0.4, -0.3]))
    tr = run_closed_loop(cl, sphere_directions(6, 1, 0)[0], 0.0, 3.0, 1e-3)
    assert passivity_balance(tr, n_points=300).max_residual <= 1e-5


def test_passivity_zero_trajectory():
    cl = ClosedLoop(TWO_LINK, G_RIGID, make_static_ref([0.0, 0.0]))
    from dataclasses import replace
    flat = replace(TWO_LINK, gravity=lambda q: np.zeros(2), gravity_jacobian=lambda q: np.zeros((2, 2)),
                   kind="custom")
    cl = ClosedLoop(flat, G_RIGID, make_static_ref([0.0, 0.0]))
    tr = run_closed_loop(cl, np.zeros(6), 0.0, 0.2, 1e-3)
    assert passivity_balance(tr).max_residual == 0.0


def test_passivity_friction_inequality():
    ref = make_sinusoid_ref([0.2, 0.1], [0.2, 0.3])
    cl = ClosedLoop(TWO_LINK.with_friction(2.0), G_RIGID, ref, "rd2_ff")
    tr = run_closed_loop(cl, 2 * sphere_directions(6, 1, 1)[0], 0.0, 5.0, 1e-3)
    rep = passivity_balance(tr, n_points=300)
    assert rep.friction.ok


def test_passivity_rejects_cascade():
    with pytest.raises(ConfigurationError):
        passivity_balance(run_closed_loop(loops()["cascade_m1"], np.zeros(5), 0.0, 0.1, 1e-3))


def test_ugas_pendulum_small_grid_and_zero_radius():
    cl = ClosedLoop(PEND, GainSet(20, 10, 10, 10), make_sinusoid_ref([0.5], [1.0]))
    rep = empirical_ugas(cl, radii=(0.0, 0.1, 1.0, 10.0), n_phases=4, n_dirs=4, horizon=20.0)
    assert rep.envelope[0] == [0.0] * 4 and rep.entry_time[0] == [0.0] * 4
    assert rep.all_attractive and rep.monotone
    assert rep.verdict == "consistent with UGAS on tested grid"


def test_ugas_negative_control_not_uniform():
    ref = make_sinusoid_ref([1.0, 1.0], [3.0, 3.0])
    g = GainSet(5, 0.5, 30, 1)
    assert not check_thm1(g, TWO_LINK.bounds, ref.k_delta).overall
    rep = empirical_ugas(ClosedLoop(TWO_LINK, g, ref), radii=(1.0, 10.0), n_phases=8, n_dirs=4,
                         horizon=20.0)
    assert max(rep.envelope_variation) > 0.1
    assert not rep.uniform and not rep.verdict.startswith("consistent")


def test_ugas_report_independent_of_workers():
    cl = ClosedLoop(PEND, GainSet(20, 10, 10, 10), make_sinusoid_ref([0.5], [1.0]))
    kw = dict(radii=(1.0,), n_phases=2, n_dirs=3, horizon=5.0)
    assert empirical_ugas(cl, workers=1, **kw).to_dict() == empirical_ugas(cl, workers=3, **kw).to_dict()


def test_fit_exponential_recovers_rate():
    t = np.linspace(0, 10, 1001)
    fit = fit_exponential(t, 3.0 * np.exp(-0.7 * t) * (1 + 0.1 * np.sin(5 * t) ** 2))
    assert fit["lam"] == pytest.approx(0.7, rel=0.05) and fit["r2"] > 0.99


def test_flexjoint_simulation_matches_chain():
    fj = make_flexjoint("pendulum", 5.0, 0.5)
    base = flexjoint_to_chain(fj)[0].base
    ref = make_unforced_ref(base, [0.5], [0.0], 6.0)
    g = GainSet(4, 4, 4, 1, (1.0, 2.0), (1.0, 1.0), (10.0, 100.0), (1.0, 1.0))
    x0 = 0.3 * sphere_directions(7, 1, 0)[0]
    T, q1, q2 = simulate_flexjoint(fj, g, ref, x0, 5.0, 1e-3)
    tr = run_closed_loop(ClosedLoop(base, g, ref, "cascade"), x0, 0.0, 5.0, 1e-3)
    assert np.abs(tr.q - q1).max() <= 1e-8
    assert np.abs(tr.raw[:, 3:4] / 5.0 - q2).max() <= 1e-8


def test_closed_loop_validation():
    with pytest.raises(ConfigurationError):
        ClosedLoop(PEND, GainSet(1, 1, 1, 1), make_sinusoid_ref([0.5], [1.0]), "cascade")
    with pytest.raises(ConfigurationError):
        ClosedLoop(PEND, G_M1, make_sinusoid_ref([0.5], [1.0]), "cascade")
    ClosedLoop(PEND, G_M1, make_sinusoid_ref([0.5], [1.0]), "cascade", allow_assumption_violation=True)
    with pytest.raises(ConfigurationError):
        ClosedLoop(PEND, GainSet(1, 1, 1, 1), make_sinusoid_ref([0.5], [1.0]), "rd2_ff")
    with pytest.raises(ConfigurationError):
        ClosedLoop(TWO_LINK, GainSet(1, 1, 1, 1), make_sinusoid_ref([0.5], [1.0]))


def test_csv_and_json_export(tmp_path):
    cl = loops()["cascade_m2"]
    tr = run_closed_loop(cl, 0.1 * np.ones(cl.err_dim), 0.0, 0.05, 1e-3)
    assert csv_columns(cl) == ["t", "qtilde_0", "dqtilde_0", "theta0_0", "xi_1_0", "xi_2_0",
                               "theta_1_0", "theta_2_0", "u_0", "V1", "V2", "V", "W"]
    p = tmp_path / "traj.csv"
    write_csv(tr, p)
    rows = p.read_text().splitlines()
    assert len(rows) == tr.t.size + 1
    assert float(rows[1].split(",")[1]) == tr.x[0, 0]
    write_json({"a": math.inf, "b": np.float64(1.5), "c": np.arange(2)}, tmp_path / "x.json")
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": "inf", "b": 1.5, "c": [0, 1]}
