import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eltrack.models import make_pendulum, make_two_link
from eltrack.reference import (ReferenceInvalidError, make_sinusoid_ref, make_static_ref,
                               make_unforced_ref)


def test_sinusoid_k_delta_examples():
    assert make_sinusoid_ref([0.0], [1.0]).k_delta == 0.0
    assert np.all(make_sinusoid_ref([0.0], [1.0]).eval(1.3)[0] == 0.0)
    assert make_sinusoid_ref([1.0], [1.0]).k_delta == pytest.approx(1.0)
    assert make_sinusoid_ref([1.0], [2.0]).k_delta == pytest.approx(4.0)


@given(st.floats(-2, 2), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0, 10))
def test_sinusoid_derivatives_consistent(A, w, phi, t):
    r = make_sinusoid_ref([A], [w], [phi])
    h = 1e-5
    for k in range(3):
        fd = (r.eval(t + h)[k] - r.eval(t - h)[k]) / (2 * h)
        assert fd == pytest.approx(r.eval(t)[k + 1], abs=1e-6 * (1 + abs(A) * w ** 3))


@given(st.floats(-2, 2), st.floats(0.1, 3), st.floats(0, 20))
def test_sinusoid_k_delta_dominates(A, w, t):
    r = make_sinusoid_ref([A, 0.5 * A], [w, 2 * w])
    qd, vd, ad, _ = r.eval(t)
    assert max(np.linalg.norm(qd), np.linalg.norm(vd), np.linalg.norm(ad)) <= r.k_delta * (1 + 1e-12)


def test_static_reference():
    r = make_static_ref([0.3, -0.2])
    qd, vd, ad, jd = r.eval(4.2)
    assert np.allclose(qd, [0.3, -0.2]) and not vd.any() and not ad.any() and not jd.any()


def test_sinusoid_rejects_nonfinite():
    with pytest.raises(ReferenceInvalidError):
        make_sinusoid_ref([np.nan], [1.0])


def test_unforced_pendulum_energy_and_residual():
    p = make_pendulum()
    r = make_unforced_ref(p, [0.5], [0.0], 10.0)
    ts = np.linspace(0, 10, 201)
    E = [p.energy(*r.eval(t)[:2]) for t in ts]
    assert max(E) - min(E) < 1e-6
    assert r.unforced_residual(p, ts) < 1e-9
    assert max(abs(r.eval(t)[0][0]) for t in ts) <= 0.5 + 1e-9


def test_unforced_equilibrium_reference():
    p = make_pendulum()
    r = make_unforced_ref(p, [0.0], [0.0], 5.0)
    for t in (0.0, 1.7, 5.0):
        assert all(np.all(x == 0) for x in r.eval(t))


def test_unforced_jerk_matches_finite_difference():
    m = make_two_link()
    r = make_unforced_ref(m, [0.2, -0.4], [0.5, 0.1], 5.0)
    t, h = 2.3, 1e-4
    fd = (r.eval(t + h)[2] - r.eval(t - h)[2]) / (2 * h)
    assert np.allclose(fd, r.eval(t)[3], atol=1e-6)


def test_unforced_spring_model_reference():
    """The flexible-joint reference uses the same generator with g + K q."""
    from eltrack.models import add_spring
    ps = add_spring(make_pendulum(), np.diag([5.0]))
    r = make_unforced_ref(ps, [0.5], [0.0], 5.0)
    assert r.unforced_residual(ps, np.linspace(0, 5, 51)) < 1e-9
    assert r.unforced_residual(make_pendulum(), np.linspace(0.5, 5, 10)) > 1e-3


def test_unforced_out_of_horizon():
    r = make_unforced_ref(make_pendulum(), [0.5], [0.0], 2.0)
    with pytest.raises(ReferenceInvalidError):
        r.eval(2.5)


def test_unforced_rejects_friction():
    with pytest.raises(ReferenceInvalidError):
        make_unforced_ref(make_pendulum(friction=1.0), [0.5], [0.0], 1.0)
