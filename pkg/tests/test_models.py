import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loopda import kernels
from loopda.errors import BlowUpError, DimensionError
from loopda.models import (
    EhrhardMullerParams,
    IntegratorConfig,
    Lorenz63Params,
    ThermosyphonConstants,
    advance,
    em_dimensionalize,
    em_nondimensionalize,
    em_rhs,
    h_friction,
    h_friction_prime,
    integrate,
    jacobian,
    lorenz63_rhs,
    propagate_tlm,
    rhs,
    tlm_forecast,
)

L63 = Lorenz63Params()
coords = st.floats(-30, 30, allow_nan=False)
state3 = st.tuples(coords, coords, coords).map(np.array)


def test_lorenz_rhs_examples():
    assert np.array_equal(lorenz63_rhs([0, 0, 0]), [0, 0, 0])
    np.testing.assert_allclose(lorenz63_rhs([1, 1, 1]), [0, 26, -5 / 3], rtol=0, atol=1e-14)
    r = math.sqrt(72)
    np.testing.assert_allclose(lorenz63_rhs([r, r, 27]), 0, atol=1e-12)


def test_lorenz_fixed_points_are_equilibria():
    for p in L63.fixed_points():
        np.testing.assert_allclose(lorenz63_rhs(p), 0, atol=1e-12)


def test_rhs_dimension_mismatch():
    with pytest.raises(DimensionError):
        lorenz63_rhs([1.0, 2.0])
    with pytest.raises(DimensionError):
        rhs([1.0, 2.0, 3.0, 4.0], L63)


@pytest.mark.parametrize("x, expected", [(0.0, 0.0), (1.0, 1.0), (8.0, 2.0)])
def test_h_friction_examples(x, expected):
    assert h_friction(x) == pytest.approx(expected, abs=1e-15)


def test_h_friction_continuous_at_one():
    poly_at_one = (44 - 55 + 20) / 9
    assert abs(poly_at_one - 1.0) < 1e-12
    assert abs(h_friction(1 - 1e-12) - h_friction(1.0)) < 1e-10


def test_h_friction_rejects_negative():
    with pytest.raises(ValueError):
        h_friction(-0.1)


def test_h_prime_matches_difference_quotient():
    for x in (0.0, 0.2, 0.5, 0.9, 1.0, 1.5, 8.0):
        eps = 1e-7
        lo = max(x - eps, 0.0)
        fd = (h_friction(x + eps) - h_friction(lo)) / (x + eps - lo)
        assert h_friction_prime(x) == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_em_rhs_examples():
    p = EhrhardMullerParams(alpha=1.0, beta_em=2.0, k_wall=1.0)
    assert np.array_equal(em_rhs([0, 0, 0], p), [0, 0, 0])
    np.testing.assert_allclose(em_rhs([1, 1, 1], p), [0, -1, -1], atol=1e-15)


@given(state3)
def test_em_reduces_to_lorenz(s):
    em = EhrhardMullerParams(alpha=10.0, beta_em=28.0, k_wall=0.0)
    lor = Lorenz63Params(sigma=10.0, rho=28.0, beta=1.0)
    assert np.array_equal(em_rhs(s, em), lorenz63_rhs(s, lor))
    assert np.array_equal(jacobian(s, em), jacobian(s, lor))
    assert em.lorenz_equivalent() == lor


def test_lorenz_jacobian_at_origin():
    np.testing.assert_allclose(
        jacobian([0, 0, 0], L63), [[-10, 10, 0], [28, -1, 0], [0, 0, -8 / 3]], atol=1e-15
    )


def _central_jacobian(f, x, eps):
    cols = []
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = eps
        cols.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.column_stack(cols)


@pytest.mark.parametrize(
    "params",
    [L63, EhrhardMullerParams(alpha=5.0, beta_em=30.0, k_wall=1.3)],
    ids=["lorenz63", "ehrhard_muller"],
)
def test_jacobian_vs_central_differences(params, rng):
    states = rng.uniform(-20, 20, size=(100, 3))
    # add states straddling the |x1| = 1 joint of h and x1 = 0
    states[:6, 0] = [0.0, 0.3, -0.7, 0.999, 1.001, -2.0]
    worst = 0.0
    for s in states:
        fd = _central_jacobian(lambda v: rhs(v, params), s, 1e-6)
        worst = max(worst, np.abs(fd - jacobian(s, params)).max())
    assert worst < 1e-5


def test_em_jacobian_continuous_at_zero_velocity():
    p = EhrhardMullerParams(alpha=5.0, beta_em=30.0, k_wall=2.0)
    a = jacobian([1e-9, 2.0, 3.0], p)
    b = jacobian([-1e-9, 2.0, 3.0], p)
    c = jacobian([0.0, 2.0, 3.0], p)
    np.testing.assert_allclose(a, c, atol=1e-7)
    np.testing.assert_allclose(b, c, atol=1e-7)


def test_integrate_zero_duration():
    traj = integrate([1.0, 2.0, 3.0], L63, 0.0)
    assert len(traj) == 1
    assert np.array_equal(traj.final, [1.0, 2.0, 3.0])


def test_integrate_step_count_rounds():
    cfg = IntegratorConfig(dt=0.01)
    assert len(integrate([1, 1, 1], L63, 0.2549, cfg)) == 26
    assert len(integrate([1, 1, 1], L63, 0.2551, cfg)) == 27


def test_fixed_point_stays_put():
    r = math.sqrt(72)
    traj = integrate([r, r, 27.0], L63, 5.0)
    assert np.abs(traj.states - [r, r, 27.0]).max() < 1e-9


def test_rk2_second_order_convergence():
    # at dt = 0.01 the chaotic flow is still pre-asymptotic (ratio ~5.9)
    x0 = np.array([1.0, 3.0, 15.0])
    dt = 0.001
    ref = integrate(x0, L63, 1.0, IntegratorConfig(dt=dt / 100)).final
    e1 = np.linalg.norm(integrate(x0, L63, 1.0, IntegratorConfig(dt=dt)).final - ref)
    e2 = np.linalg.norm(integrate(x0, L63, 1.0, IntegratorConfig(dt=dt / 2)).final - ref)
    assert 3.5 < e1 / e2 < 4.5


def test_euler_first_order_convergence():
    x0 = np.array([1.0, 3.0, 15.0])
    cfg = lambda dt: IntegratorConfig(scheme="euler", dt=dt)
    ref = integrate(x0, L63, 1.0, IntegratorConfig(dt=1e-4)).final
    e1 = np.linalg.norm(integrate(x0, L63, 1.0, cfg(0.002)).final - ref)
    e2 = np.linalg.norm(integrate(x0, L63, 1.0, cfg(0.001)).final - ref)
    assert 1.7 < e1 / e2 < 2.3


def test_integration_is_bitwise_deterministic():
    a = integrate([1.0, 2.0, 3.0], L63, 10.0)
    b = integrate([1.0, 2.0, 3.0], L63, 10.0)
    assert a.states.tobytes() == b.states.tobytes()


def test_blow_up_is_reported_with_step():
    cfg = IntegratorConfig(dt=0.5)
    with pytest.raises(BlowUpError) as err:
        integrate([1e3, 1e3, 1e3], L63, 50.0, cfg)
    assert err.value.step is not None and err.value.step > 0
    with pytest.raises(BlowUpError):
        advance(np.array([[1e3, 1e3, 1e3], [1.0, 1.0, 1.0]]), L63, 50.0, cfg)


def test_advance_matches_integrate():
    X = np.array([[1.0, 2.0, 3.0], [-4.0, 1.0, 20.0]])
    out = advance(X, L63, 0.37)
    for x, y in zip(X, out):
        np.testing.assert_array_equal(integrate(x, L63, 0.37).final, y)


def test_multi_site_states_are_independent():
    sites = [Lorenz63Params(), Lorenz63Params(rho=20.0)]
    x = np.array([1.0, 2.0, 3.0, -1.0, 0.5, 10.0])
    out = advance(x, sites, 0.5)
    np.testing.assert_array_equal(out[:3], advance(x[:3], sites[0], 0.5))
    np.testing.assert_array_equal(out[3:], advance(x[3:], sites[1], 0.5))
    L = propagate_tlm(x, sites, 0.2)
    assert np.all(L[:3, 3:] == 0) and np.all(L[3:, :3] == 0)


def test_tlm_identity_at_zero_duration():
    assert np.array_equal(propagate_tlm([1.0, 2.0, 3.0], L63, 0.0), np.eye(3))


def test_tlm_final_state_matches_integrator():
    x, _ = tlm_forecast([1.0, 2.0, 3.0], L63, 0.5)
    np.testing.assert_allclose(x, integrate([1.0, 2.0, 3.0], L63, 0.5).final, atol=1e-13)


@pytest.mark.parametrize("scheme", ["euler", "rk2"])
def test_tlm_is_derivative_of_discrete_map(scheme, attractor_states):
    cfg = IntegratorConfig(scheme=scheme)
    x = attractor_states[0]
    L = propagate_tlm(x, L63, 0.1, cfg)
    fd = _central_jacobian(lambda v: advance(v, L63, 0.1, cfg), x, 1e-6)
    assert np.abs(L - fd).max() < 1e-6 * max(1.0, np.abs(L).max())


def test_tlm_second_order_remainder(attractor_states):
    r = np.random.default_rng(3)
    ratios = []
    for x in attractor_states[:100]:
        d = r.normal(0, 0.1, 3)
        L = propagate_tlm(x, L63, 0.1)
        base = advance(x, L63, 0.1)
        e_full = np.linalg.norm(advance(x + d, L63, 0.1) - base - L @ d)
        e_half = np.linalg.norm(advance(x + d / 2, L63, 0.1) - base - L @ (d / 2))
        ratios.append((e_half, e_full))
    ratios = np.array(ratios)
    assert 0.2 <= ratios[:, 0].mean() / ratios[:, 1].mean() <= 0.3


def test_tlm_linearity():
    L = propagate_tlm([1.0, 2.0, 3.0], L63, 0.3)
    assert np.array_equal(L @ np.zeros(3), np.zeros(3))


def test_backends_agree(attractor_states):
    if len(kernels.available()) < 2:
        pytest.skip("compiled extension not built")
    py, cy = kernels.get("python"), kernels.get("cython")
    em = EhrhardMullerParams(alpha=4.0, beta_em=20.0, k_wall=1.0)
    for p in (L63, em):
        X = attractor_states[:5]
        P = np.tile(p.as_array(), (5, 1))
        a, _ = py.trajectory_batch(p.code, P, X, 0.01, 200, 1)
        b, _ = cy.trajectory_batch(p.code, P, X, 0.01, 200, 1)
        assert np.abs(a - b).max() < 1e-9
        xa, La, _ = py.tlm(p.code, p.as_array(), X[0], 0.01, 30, 1)
        xb, Lb, _ = cy.tlm(p.code, p.as_array(), X[0], 0.01, 30, 1)
        assert np.abs(xa - xb).max() < 1e-12
        assert np.abs(La - Lb).max() < 1e-10 * np.abs(La).max()


def test_python_backend_runs_full_api(backend, attractor_states):
    traj = integrate(attractor_states[0], L63, 0.5)
    assert traj.states.shape == (51, 3)
    L = propagate_tlm(attractor_states[0], L63, 0.1)
    assert L.shape == (3, 3)


def test_nondimensionalize_examples():
    c = ThermosyphonConstants(loop_radius=1.0, h_w0=1.0, f_w0=1.0)
    assert np.array_equal(em_nondimensionalize(0.0, 0.0, 0.0, c), [0, 0, 0])
    x = em_nondimensionalize(0.01, 0.0, 0.0, c)
    assert x[0] == pytest.approx(995.65 * 4187 * 0.01, rel=1e-15)


def test_nondimensionalize_round_trip():
    c = ThermosyphonConstants(loop_radius=0.38, h_w0=12.0, f_w0=0.07)
    phys = (0.013, 4.2, -1.7)
    back = em_dimensionalize(em_nondimensionalize(*phys, c), c)
    np.testing.assert_allclose(back, phys, rtol=1e-15)


def test_nondimensionalize_zero_denominator():
    with pytest.raises(ZeroDivisionError):
        em_nondimensionalize(1.0, 1.0, 1.0, ThermosyphonConstants(loop_radius=1.0, h_w0=0.0, f_w0=1.0))
