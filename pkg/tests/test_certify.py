import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eltrack.certify import (DependencyError, EtaBounds, build_AB, check_corollary, check_prop1,
                             check_thm1, check_thm2, check_thm3, estimate_eta, gain_search,
                             recursion_constants, validate_eta)
from eltrack.controller import ConfigurationError, GainSet
from eltrack.models import ModelBounds, flexjoint_to_chain, make_flexjoint, make_pendulum
from eltrack.numerics import max_real_eig
from eltrack.reference import make_static_ref, make_unforced_ref
from oracles import expanded_m4, chain_AB_recursion, eta_symbolic_zero

pos = st.floats(0.05, 20)


def bounds_kc(kc):
    return ModelBounds(d_m=1.0, d_M=2.0, k_c=kc, k_v=1.0, lam=0.0)


ZERO_ETA = EtaBounds(0.0, 0.0, 0.0, "explicit")
RIGID_OK = (10.0, 200.0, 5.0, 0.5)   # passes the rigid-part conditions for k_c k_delta = 1, m <= 2


@given(pos, pos, pos, pos)
def test_thm1_pendulum_always_passes(kp, kd, a, b):
    rep = check_thm1(GainSet(kp, kd, a, b), make_pendulum().bounds, 3.0)
    assert rep.overall and rep["Eq.11"].margin == pytest.approx(kd * b / (2 * a))


def test_thm1_arithmetic():
    ok = check_thm1(GainSet(1, 3, 1, 1), bounds_kc(1.04), 1.0)["Eq.11"]
    assert ok.passed and ok.margin == pytest.approx(0.46)
    bad = check_thm1(GainSet(1, 1, 1, 1), bounds_kc(1.0), 1.0)["Eq.11"]
    assert not bad.passed and bad.margin == pytest.approx(-0.5)


def test_thm1_uses_worst_diagonal_entries():
    rep = check_thm1(GainSet(1, (3.0, 1.0), (1.0, 2.0), 1), bounds_kc(0.2), 1.0)
    assert rep["Eq.11"].lhs == pytest.approx(1.0 * 1.0 / (2 * 2.0))


def test_thm2_examples():
    g = GainSet(1, 1, 1, 1, (3.0,), (3.0,), (2.0,), (1.0,))
    assert check_thm2(g, ZERO_ETA, bounds_kc(1.0), 1.0)["Eq.632b"].margin == pytest.approx(1.0)
    g = GainSet(1, 10, 40, 1, (3.0,), (3.0,), (2.0,), (1.0,))
    e = check_thm2(g, ZERO_ETA, bounds_kc(1.0), 1.0)["Eq.632a"]
    assert e.lhs == pytest.approx(90.0) and e.rhs == pytest.approx(1.5 + 2.5 * 1600) and not e.passed
    c = check_thm2(g, EtaBounds(0, 1, 1), bounds_kc(1.0), 1.0)["Eq.632c"]
    assert c.passed and c.margin == pytest.approx(0.5)
    with pytest.raises(DependencyError):
        check_thm2(g, None, bounds_kc(1.0), 1.0)


def test_recursion_constants_examples():
    rc = recursion_constants(GainSet(1, 1, 1, 1, (2.0, 5.0), (2.0, 1.0), (10.0, 1.0), (1.0, 1.0)))
    assert rc.beta_(1) == 4.0
    assert rc.mu[(2, 1)] == 24.0
    assert rc.eta[(2, 1)] == 0.0


@pytest.mark.parametrize("m", [2, 3, 4])
def test_eta_zeroing_symbolic(m):
    assert eta_symbolic_zero(m)


@given(st.lists(st.floats(0.1, 10), min_size=8, max_size=8))
def test_eta_zeroing_exact_in_floats(vals):
    """kp1 = kd1 makes every k = 1 term exactly zero even in floating point."""
    kp1, a1, b1, kd2, a2, b2, kd3, a3 = vals
    from eltrack.certify import _kp_from_kd
    kp2 = _kp_from_kd(kp1, kd2)
    kp3 = _kp_from_kd(kp2, kd3)
    g = GainSet(1, 1, 1, 1, (kp1, kp2, kp3), (kp1, kd2, kd3), (a1, a2, a3), (b1, b2, 1.0))
    rc = recursion_constants(g)
    assert rc.eta[(2, 1)] == 0.0 and rc.eta[(3, 1)] == 0.0
    assert abs(rc.eta[(3, 2)]) <= 1e-12 * kp2 ** 2


def test_build_AB_m1_analytic_eigenvalues():
    kp, kd, a = 3.0, 2.0, 5.0
    A, B, *_ = build_AB(GainSet(1, 1, 1, 1, (kp,), (kd,), (a,), (0.7,)), n=2)
    assert np.allclose(A, np.kron([[-kp, kd], [-kd, -a]], np.eye(2)))
    assert np.allclose(B, np.kron([[-1.0], [0.7]], np.eye(2)))
    roots = np.roots([1, kp + a, kp * a + kd ** 2])
    assert max_real_eig(A) == pytest.approx(roots.real.max())


@given(st.lists(st.floats(-1, 1), min_size=16, max_size=16))
def test_build_AB_m4_matches_hand_expansion(logs):
    v = 10.0 ** np.array(logs)
    g = GainSet(1, 1, 1, 1, tuple(v[:4]), tuple(v[4:8]), tuple(v[8:12]), tuple(v[12:]))
    A, B, *_ = build_AB(g)
    A2, B2 = expanded_m4()(g)
    assert np.all(np.abs(A - A2) <= 1e-12 * np.maximum(np.abs(A2), 1e-300) + 1e-14)
    assert np.allclose(B.ravel(), np.asarray(B2).ravel(), rtol=1e-12)


@pytest.mark.parametrize("m", [1, 2, 3, 5])
def test_build_AB_matches_recursion_oracle(m):
    rng = np.random.default_rng(m)
    for _ in range(10):
        v = 10.0 ** rng.uniform(-1, 1, 4 * m)
        g = GainSet(1, 1, 1, 1, *(tuple(v[k * m:(k + 1) * m]) for k in range(4)))
        A, B, *_ = build_AB(g)
        A2, B2 = chain_AB_recursion(m)(g)
        scale = np.abs(A2).max()
        assert np.abs(A - A2).max() <= 1e-12 * scale
        assert np.abs(B.ravel() - np.asarray(B2).ravel()).max() <= 1e-12 * np.abs(B).max()


def test_thm3_examples():
    g = GainSet(*RIGID_OK, (2.0,), (2.0,), (10.0,), (1.0,))
    rep = check_thm3(g, ZERO_ETA, bounds_kc(1.0), 1.0)
    assert rep.overall, rep.to_json()
    lego = rep["Eq.lego"]
    a632 = check_thm2(g, ZERO_ETA, bounds_kc(1.0), 1.0)["Eq.632a"]
    assert lego.margin == a632.margin
    bad = GainSet(*RIGID_OK, (2.0,), (2.0,), (1e-3,), (1.0,))
    rep = check_thm3(bad, EtaBounds(0, 5, 5), bounds_kc(1.0), 1.0)
    assert not rep["Eq.786"].passed and rep["Eq.786"].margin < 0


def test_thm3_lyapunov_mode():
    g = GainSet(*RIGID_OK, (2.0,), (2.0,), (10.0,), (1.0,))
    rep = check_thm3(g, EtaBounds(0, 0.3, 0.3), bounds_kc(1.0), 1.0, mode="lyapunov")
    assert rep.overall


def test_corollary_examples():
    from eltrack.certify import _kp_from_kd
    kp2 = _kp_from_kd(2.0, 30.0)
    assert abs(kp2 ** 2 - 2.0 * kp2 - 30.0 ** 2) <= 1e-12 * kp2 ** 2
    g = GainSet(*RIGID_OK, (2.0, kp2), (2.0, 30.0), (10.0, 1e4), (1.0, 1.0))
    rep = check_corollary(g, bounds_kc(0.01), 1.0)
    mu = 2.0 * (2.0 + 10.0)
    assert mu == 24.0
    assert rep["Cor.psd2"].rhs == pytest.approx(4 * mu ** 2)
    assert rep.overall == (2 * (kp2 - 2) >= 2 and 10 * (kp2 - 2) >= 4 * mu ** 2
                           and 10 * 1e4 >= 2 * mu ** 2)
    with pytest.raises(ConfigurationError):
        check_corollary(GainSet(1, 1, 1, 1, (1.0,), (1.0,), (1.0,), (1.0,)), bounds_kc(0), 1)


def test_eta_analytic_pendulum_static():
    p = make_pendulum()
    g = GainSet(4.0, 3.0, 2.0, 1.5)
    e = estimate_eta(p, make_static_ref([0.0]), g, mode="analytic")
    assert e.eta1 == 0.0
    assert e.eta2 == pytest.approx(9.81 + 4.0 + 3.0 * 1.5)
    assert e.eta3 == pytest.approx(3.0 * 2.0)


def test_eta_sampled_validates_on_holdout():
    p = make_pendulum()
    ref = make_unforced_ref(p, [0.5], [0.0], 10.0)
    g = GainSet(25, 100, 2, 0.25)
    e = estimate_eta(p, ref, g, n_samples=5000, seed=1)
    bad, worst = validate_eta(e, p, ref, g, n_samples=100000, seed=7)
    assert bad == 0 and worst <= 1.0


def test_gain_search_pendulum_m1():
    p = make_pendulum()
    ref = make_unforced_ref(p, [0.5], [0.0], 10.0)
    g, rep = gain_search(p.bounds, ref.k_delta, 1, 400, rigid=(25, 100, 2, 0.25),
                         eta_fn=lambda rg: estimate_eta(p, ref, rg, n_samples=5000), target="thm2")
    assert rep.overall
    eta = estimate_eta(p, ref, g.stage(0), n_samples=5000)
    assert check_thm2(g, eta, p.bounds, ref.k_delta).overall


def test_gain_search_infeasible_reports_negative_margin():
    g, rep = gain_search(bounds_kc(1e3), 1e3, 0, 100, target="thm1", gain_cap=100.0)
    assert not rep.overall and rep["Eq.11"].margin < 0


def test_gain_search_flexjoint_corollary():
    fj = make_flexjoint("pendulum", 5.0, 0.5)
    base = flexjoint_to_chain(fj)[0].base
    ref = make_unforced_ref(base, [0.5], [0.0], 10.0)
    g, rep = gain_search(base.bounds, ref.k_delta, 2, 400, target="corollary")
    assert rep.overall
    for cid in ("Cor.psd1", "Cor.psd2", "Cor.psd3", "Eq.794a", "Eq.795a[2]"):
        assert rep[cid].passed


@given(st.integers(1, 3), st.floats(-3, -0.5), st.integers(0, 10 ** 6))
def test_prop1_implies_thm3(m, log_eta, seed):
    e = EtaBounds(*(10.0 ** (log_eta + np.random.default_rng(seed).uniform(-0.5, 0, 3))))
    g, rep = gain_search(make_pendulum().bounds, 0.5, m, 200, eta=e, target="prop1", seed=seed)
    if rep.overall:
        assert check_thm3(g, e, make_pendulum().bounds, 0.5).overall


def test_cert_report_serialization():
    rep = check_thm1(GainSet(1, 1, 1, 1), bounds_kc(1.0), 1.0)
    d = rep.to_dict()
    assert d["overall"] is False and d["entries"][0]["id"] == "Eq.11"
    assert math.isclose(d["entries"][0]["margin"], -0.5)
