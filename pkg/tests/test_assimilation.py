import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopda.assimilation import (
    Ensemble,
    InflationConfig,
    ekf_analysis,
    ekf_forecast,
    enkf_analysis,
    ensemble_covariance,
    ensrf_analysis,
    etkf_analysis,
    hybrid_blend,
    inflate_additive_diag,
    inflate_additive_state,
    inflate_multiplicative,
    inflate_perturbations,
    is_psd,
    nmc_static_b,
    oi_analysis,
    oi_gain,
    scalar_analysis,
    var3d_analysis,
    var3d_cost,
    var3d_gradient,
)
from loopda.errors import DimensionError, SingularMatrixError
from loopda.models import IntegratorConfig, Lorenz63Params, advance, integrate, propagate_tlm

L63 = Lorenz63Params()


def random_spd(rng, n, floor=0.1):
    A = rng.normal(size=(n, n))
    return A @ A.T + floor * np.eye(n)


def random_system(rng, n=None, m=None):
    n = n or int(rng.integers(1, 7))
    m = m or int(rng.integers(1, n + 1))
    return dict(
        x_b=rng.normal(size=n),
        B=random_spd(rng, n),
        H=rng.normal(size=(m, n)),
        R=random_spd(rng, m),
        y_o=rng.normal(size=m),
    )


def kalman_oracle(P_f, H, R):
    """Gain and analysis covariance from the textbook formula, via explicit inverse."""
    K = P_f @ H.T @ np.linalg.inv(H @ P_f @ H.T + R)
    return K, (np.eye(P_f.shape[0]) - K @ H) @ P_f


# --- scalar -------------------------------------------------------------


def test_scalar_worked_example():
    u_a, var_a = scalar_analysis(0.0, 1.0, 2.0, 2.0)
    assert abs(u_a - 2 / 3) < 1e-12
    assert var_a == pytest.approx(2 / 3)


def test_scalar_limits():
    u_a, _ = scalar_analysis(0.3, 1.0, 5.0, 1e12)
    assert u_a == pytest.approx(0.3, abs=1e-10)
    assert scalar_analysis(0.0, 1.0, 2.0, 1.0) == (1.0, 0.5)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_scalar_precisions_add(vb, vo):
    _, va = scalar_analysis(0.0, vb, 1.0, vo)
    assert 1 / va == pytest.approx(1 / vb + 1 / vo, rel=1e-15)
    assert va <= min(vb, vo)


@pytest.mark.parametrize("vb,vo", [(0, 1), (1, 0), (-1, 1)])
def test_scalar_rejects_bad_variance(vb, vo):
    with pytest.raises(ValueError):
        scalar_analysis(0, vb, 0, vo)


# --- OI / 3D-Var / EKF --------------------------------------------------


def test_oi_gain_examples():
    np.testing.assert_allclose(oi_gain(np.eye(3), np.eye(3), np.eye(3)), 0.5 * np.eye(3))
    np.testing.assert_allclose(oi_gain(np.diag([1.0, 2.0]), [[1.0, 0.0]], [[1.0]]), [[0.5], [0.0]])
    W = oi_gain([[1.0]], [[1.0]], [[2.0]])
    assert W[0, 0] == pytest.approx(1 / 3)


def test_oi_singular_innovation():
    with pytest.raises(SingularMatrixError):
        oi_gain(np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)))


def test_oi_shape_mismatch():
    with pytest.raises(DimensionError):
        oi_gain(np.eye(3), np.eye(2), np.eye(2))


def test_oi_zero_innovation_and_perfect_obs(rng):
    s = random_system(rng, n=4, m=4)
    res = oi_analysis(s["x_b"], s["B"], s["H"], s["R"], s["H"] @ s["x_b"])
    np.testing.assert_array_equal(res.analysis_state, s["x_b"])
    assert res.increment_norm == 0.0
    y = rng.normal(size=4)
    res = oi_analysis(s["x_b"], s["B"], np.eye(4), 1e-12 * np.eye(4), y)
    np.testing.assert_allclose(res.analysis_state, y, atol=1e-9)
    assert np.abs(res.analysis_covariance).max() < 1e-9


def test_oi_trace_reduction(rng):
    for _ in range(50):
        n = int(rng.integers(1, 7))
        B = random_spd(rng, n)
        R = random_spd(rng, n, floor=1e-3)
        res = oi_analysis(np.zeros(n), B, np.eye(n), R, rng.normal(size=n))
        assert np.trace(res.analysis_covariance) <= np.trace(B) + 1e-12
        assert is_psd(res.analysis_covariance)


def test_oi_3dvar_ekf_agree(rng):
    for _ in range(100):
        s = random_system(rng)
        a = oi_analysis(**s).analysis_state
        b = var3d_analysis(**s).analysis_state
        c = ekf_analysis(s["x_b"], s["B"], s["H"], s["R"], s["y_o"]).analysis_state
        scale = np.linalg.norm(a)
        assert np.linalg.norm(a - b) <= 1e-8 * scale
        assert np.linalg.norm(a - c) <= 1e-8 * scale


def test_var3d_cost_examples(rng):
    s = random_system(rng, n=3, m=2)
    y = s["H"] @ s["x_b"]
    assert var3d_cost(s["x_b"], s["x_b"], s["B"], y, s["H"], s["R"]) == 0.0
    dx = rng.normal(size=3)
    H = s["H"]

    def jb(x):
        return var3d_cost(x, s["x_b"], s["B"], H @ x, H, s["R"])

    assert jb(s["x_b"] + 2 * dx) == pytest.approx(4 * jb(s["x_b"] + dx))


def test_var3d_gradient_finite_difference(rng):
    s = random_system(rng, n=4, m=3)
    x = rng.normal(size=4)
    g = var3d_gradient(x, s["x_b"], s["B"], s["y_o"], s["H"], s["R"])
    eps = 1e-6
    fd = np.array([
        (var3d_cost(x + eps * e, s["x_b"], s["B"], s["y_o"], s["H"], s["R"])
         - var3d_cost(x - eps * e, s["x_b"], s["B"], s["y_o"], s["H"], s["R"])) / (2 * eps)
        for e in np.eye(4)
    ])
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(g)


def test_var3d_nonlinear_operator_gradient(rng):
    B, R = random_spd(rng, 3), random_spd(rng, 2)
    x_b, y = rng.normal(size=3), rng.normal(size=2)

    def h(x):
        return np.array([x[0] ** 2, np.sin(x[1]) * x[2]])

    def hj(x):
        return np.array([[2 * x[0], 0, 0], [0, np.cos(x[1]) * x[2], np.sin(x[1])]])

    x = rng.normal(size=3)
    g = var3d_gradient(x, x_b, B, y, h, R, H_jacobian=hj)
    eps = 1e-6
    fd = np.array([(var3d_cost(x + eps * e, x_b, B, y, h, R)
                    - var3d_cost(x - eps * e, x_b, B, y, h, R)) / (2 * eps) for e in np.eye(3)])
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(g)
    with pytest.raises(ValueError):
        var3d_gradient(x, x_b, B, y, h, R)


def test_var3d_analysis_is_minimum(rng):
    for _ in range(20):
        s = random_system(rng)
        x_a = var3d_analysis(**s).analysis_state
        j0 = var3d_cost(x_a, s["x_b"], s["B"], s["y_o"], s["H"], s["R"])
        for _ in range(10):
            v = rng.normal(size=x_a.shape)
            j1 = var3d_cost(x_a + 1e-3 * v, s["x_b"], s["B"], s["y_o"], s["H"], s["R"])
            assert j1 >= j0 - 1e-12


def test_var3d_singular_b():
    with pytest.raises(SingularMatrixError):
        var3d_cost(np.ones(2), np.zeros(2), np.zeros((2, 2)), [0.0], [[1.0, 0.0]], [[1.0]])


def test_gain_invariant_under_common_scaling(rng):
    s = random_system(rng, n=5, m=3)
    a = var3d_analysis(**s).analysis_state
    b = var3d_analysis(s["x_b"], 7.5 * s["B"], s["H"], 7.5 * s["R"], s["y_o"]).analysis_state
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_ekf_analysis_limits(rng):
    x_f, y = rng.normal(size=3), rng.normal(size=3)
    res = ekf_analysis(x_f, np.zeros((3, 3)), np.eye(3), np.eye(3), y)
    np.testing.assert_array_equal(res.analysis_state, x_f)
    res = ekf_analysis(x_f, np.eye(3), np.eye(3), 1e-12 * np.eye(3), y)
    np.testing.assert_allclose(res.analysis_state, y, atol=1e-9)


# --- EKF forecast / NMC -------------------------------------------------


def test_ekf_forecast_trivial(attractor_states):
    x = attractor_states[0]
    P = np.diag([1.0, 2.0, 3.0])
    Q = 0.1 * np.eye(3)
    x_f, P_f = ekf_forecast(x, P, L63, 0.0, Q)
    np.testing.assert_array_equal(x_f, x)
    np.testing.assert_allclose(P_f, P + Q)
    fc = ekf_forecast(x, np.zeros((3, 3)), L63, 0.2)
    np.testing.assert_array_equal(fc.covariance, 0)
    assert fc.diagnostics["psd"]


def test_ekf_forecast_monte_carlo(attractor_states, rng):
    # small isotropic uncertainty propagated by a large ensemble
    x = attractor_states[3]
    eps = 1e-3
    P_a = eps ** 2 * np.eye(3)
    _, P_f = ekf_forecast(x, P_a, L63, 0.1)
    members = x + eps * rng.standard_normal((10_000, 3))
    fc = advance(members, L63, 0.1)
    P_mc = np.cov(fc.T)
    assert np.linalg.norm(P_mc - P_f) <= 0.1 * np.linalg.norm(P_f)


def test_ekf_forecast_uses_tlm(attractor_states):
    x = attractor_states[5]
    L = propagate_tlm(x, L63, 0.3)
    P = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]])
    x_f, P_f = ekf_forecast(x, P, L63, 0.3)
    np.testing.assert_allclose(P_f, L @ P @ L.T, rtol=1e-12)
    np.testing.assert_array_equal(P_f, P_f.T)
    np.testing.assert_array_equal(x_f, integrate(x, L63, 0.3).final)


def test_nmc_duplicates_give_single_outer_product(attractor_states):
    x = attractor_states[0]
    B = nmc_static_b(L63, [x, x, x], 0.48, 0.24)
    cfg = IntegratorConfig()
    traj = integrate(x, L63, 0.48, cfg)
    d = traj.final - traj.at(0.24)
    np.testing.assert_allclose(B, np.outer(d, d), rtol=1e-12, atol=1e-12)
    assert np.linalg.matrix_rank(B, tol=1e-8 * np.abs(B).max()) == 1


def test_nmc_lorenz_scale(attractor_states):
    B = nmc_static_b(L63, attractor_states[:50], 0.48, 0.24)
    assert is_psd(B)
    np.testing.assert_array_equal(B, B.T)
    # climatological variance oracle from a long free run
    clim = integrate(attractor_states[0], L63, 200.0).states.var(axis=0)
    ratio = np.diag(B) / clim
    assert np.all(ratio > 0.01) and np.all(ratio < 10)


def test_nmc_bad_leads(attractor_states):
    with pytest.raises(ValueError):
        nmc_static_b(L63, attractor_states[:3], 0.1, 0.2)


# --- ensemble covariance ------------------------------------------------


def test_ensemble_covariance_examples(rng):
    ens = Ensemble(np.ones((5, 3)))
    for mode in ("standard", "leave_one_out"):
        np.testing.assert_array_equal(ensemble_covariance(ens, mode), 0)
    assert ensemble_covariance(Ensemble([[0.0], [2.0]]), "standard")[0, 0] == 2.0
    for k in (3, 4, 10, 50):
        e = Ensemble(rng.normal(size=(k, 1)))
        std = ensemble_covariance(e, "standard")
        loo = ensemble_covariance(e, "leave_one_out")
        factor = (k / (k - 1)) ** 2 * (k - 1) / (k - 2)
        assert loo[0, 0] == pytest.approx(factor * std[0, 0], rel=1e-12)


def test_ensemble_covariance_loo_matches_definition(rng):
    X = rng.normal(size=(6, 4))
    expected = np.zeros((4, 4))
    for i in range(6):
        e = X[i] - np.delete(X, i, axis=0).mean(axis=0)
        expected += np.outer(e, e)
    expected /= 4
    np.testing.assert_allclose(ensemble_covariance(Ensemble(X)), expected, rtol=1e-12)


def test_ensemble_size_checks():
    with pytest.raises(ValueError):
        Ensemble([[1.0, 2.0]])
    with pytest.raises(ValueError):
        ensemble_covariance(Ensemble([[0.0], [1.0]]))
    with pytest.raises(ValueError):
        ensemble_covariance(Ensemble([[0.0], [1.0], [2.0]]), "bogus")


# --- EnKF ---------------------------------------------------------------


def test_enkf_trivial_limits(rng):
    ens = Ensemble(rng.normal(size=(8, 3)))
    y = rng.normal(size=3)
    res = enkf_analysis(ens, np.eye(3), 1e-14 * np.eye(3), y, perturb=False)
    np.testing.assert_allclose(res.analysis_ensemble.members, np.tile(y, (8, 1)), atol=1e-8)
    # zero innovation for every member: ensemble collapsed onto the obs already
    same = Ensemble(np.tile(y, (4, 1)))
    res = enkf_analysis(same, np.eye(3), np.eye(3), y, perturb=False)
    np.testing.assert_array_equal(res.analysis_ensemble.members, same.members)
    assert res.diagnostics["zero_spread"]


def test_enkf_zero_innovation_keeps_mean(rng):
    ens = Ensemble(rng.normal(size=(6, 3)))
    H = np.array([[1.0, 0.0, 0.0]])
    res = enkf_analysis(ens, H, [[0.5]], H @ ens.mean(), perturb=False)
    np.testing.assert_allclose(res.analysis_state, ens.mean(), atol=1e-14)


def standardized(rng, k, mean, var):
    z = rng.standard_normal(k)
    z = (z - z.mean()) / z.std(ddof=1)
    return (mean + np.sqrt(var) * z)[:, None]


def test_enkf_matches_scalar_kalman(rng):
    k = 10_000
    var_b = 1.0 / ((k / (k - 1)) ** 2 * (k - 1) / (k - 2))  # so the leave-one-out estimate is exactly 1
    ens = Ensemble(standardized(rng, k, 0.0, var_b))
    res = enkf_analysis(ens, [[1.0]], [[2.0]], [2.0], rng=rng)
    u_a, var_a = scalar_analysis(0.0, 1.0, 2.0, 2.0)
    members = res.analysis_ensemble.members[:, 0]
    assert members.mean() == pytest.approx(u_a, rel=0.02)
    assert members.var(ddof=1) == pytest.approx(var_a, rel=0.02)


def test_enkf_converges_to_ekf(rng):
    n, k = 3, 10_000
    P = random_spd(rng, n)
    x_b = rng.normal(size=n)
    H = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R = np.diag([0.3, 0.5])
    y = rng.normal(size=2)
    members = x_b + rng.multivariate_normal(np.zeros(n), P, size=k)
    ens = Ensemble(members)
    res = enkf_analysis(ens, H, R, y, rng=np.random.default_rng(1), covariance_mode="standard")
    ref = ekf_analysis(ens.mean(), ensemble_covariance(ens, "standard"), H, R, y)
    err = np.linalg.norm(res.analysis_state - ref.analysis_state) / np.linalg.norm(ref.analysis_state)
    assert err < 0.05


def test_enkf_deterministic_given_seed(rng):
    ens = Ensemble(rng.normal(size=(10, 3)))
    args = (ens, np.eye(3), np.eye(3), np.zeros(3), InflationConfig(0.1, 0.2))
    a = enkf_analysis(*args, rng=np.random.default_rng(5))
    b = enkf_analysis(*args, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a.analysis_ensemble.members, b.analysis_ensemble.members)


# --- square-root filters ------------------------------------------------


@pytest.mark.parametrize("filt", ["ensrf", "etkf"])
def test_square_root_covariance_contract(filt, rng):
    for _ in range(40):
        n = int(rng.integers(1, 7))
        k = int(rng.integers(2, 9))
        m = int(rng.integers(1, n + 1))
        ens = Ensemble(rng.normal(size=(k, n)) * 2)
        H, R, y = rng.normal(size=(m, n)), random_spd(rng, m), rng.normal(size=m)
        P_f = ensemble_covariance(ens, "standard")
        K, P_a = kalman_oracle(P_f, H, R)
        fn = ensrf_analysis if filt == "ensrf" else etkf_analysis
        res = fn(ens, H, R, y)
        A = res.analysis_ensemble
        assert np.linalg.norm(ensemble_covariance(A, "standard") - P_a) < 1e-8
        np.testing.assert_allclose(A.mean(), res.analysis_state, atol=1e-10)
        np.testing.assert_allclose(res.analysis_state, ens.mean() + K @ (y - H @ ens.mean()),
                                   atol=1e-8 * max(1, np.abs(res.analysis_state).max()))


def test_ensrf_symmetric_zero_innovation():
    ens = Ensemble([[1.0, 2.0], [-1.0, -2.0], [0.5, 0.0], [-0.5, 0.0]])
    res = ensrf_analysis(ens, np.eye(2), np.eye(2), ens.mean())
    np.testing.assert_allclose(res.analysis_state, ens.mean(), atol=1e-15)


def test_ensrf_perfect_obs_collapse(rng):
    ens = Ensemble(rng.normal(size=(6, 3)))
    res = ensrf_analysis(ens, np.eye(3), 1e-12 * np.eye(3), np.zeros(3))
    assert np.abs(res.analysis_ensemble.perturbations()).max() < 1e-4


def test_etkf_no_observations(rng):
    ens = Ensemble(rng.normal(size=(5, 3)))
    res = etkf_analysis(ens, np.zeros((0, 3)), np.zeros((0, 0)), [])
    np.testing.assert_array_equal(res.analysis_ensemble.members, ens.members)


def test_etkf_zero_mean_perturbations(rng):
    for rho in (1.0, 1.3):
        ens = Ensemble(rng.normal(size=(7, 4)))
        res = etkf_analysis(ens, rng.normal(size=(2, 4)), np.eye(2), rng.normal(size=2), rho=rho)
        X = res.analysis_ensemble.members - res.analysis_state
        assert np.abs(X.sum(axis=0)).max() < 1e-10


def test_etkf_scalar_oracle(rng):
    k = 2000
    ens = Ensemble(standardized(rng, k, 0.0, 1.0))
    res = etkf_analysis(ens, [[1.0]], [[2.0]], [2.0])
    u_a, var_a = scalar_analysis(0.0, 1.0, 2.0, 2.0)
    assert res.analysis_state[0] == pytest.approx(u_a, rel=1e-10)
    assert res.analysis_ensemble.members.var(ddof=1) == pytest.approx(var_a, rel=1e-10)


def test_etkf_rho_is_multiplicative_inflation(rng):
    ens = Ensemble(rng.normal(size=(6, 3)))
    H, R, y = rng.normal(size=(2, 3)), np.eye(2), rng.normal(size=2)
    a = etkf_analysis(ens, H, R, y, rho=1.5)
    b = etkf_analysis(inflate_perturbations(ens, 0.5), H, R, y)
    np.testing.assert_allclose(a.analysis_ensemble.members, b.analysis_ensemble.members, atol=1e-10)
    with pytest.raises(ValueError):
        etkf_analysis(ens, H, R, y, rho=0.9)


# --- inflation / blend --------------------------------------------------


def test_inflate_multiplicative():
    C = np.diag([2.0, 4.0])
    np.testing.assert_array_equal(inflate_multiplicative(C, 0.0), C)
    np.testing.assert_array_equal(inflate_multiplicative(C, 1.0), 2 * C)
    np.testing.assert_array_equal(inflate_multiplicative(C, 0.5), np.diag([3.0, 6.0]))
    with pytest.raises(ValueError):
        inflate_multiplicative(C, -0.1)


def test_inflate_additive_diag(rng):
    C = random_spd(rng, 4)
    np.testing.assert_array_equal(inflate_additive_diag(C, 0.0, rng), C)
    out = inflate_additive_diag(C, 0.3, rng)
    assert np.all(np.diag(out) >= np.diag(C))
    off = ~np.eye(4, dtype=bool)
    np.testing.assert_array_equal(out[off], C[off])
    incs = np.array([np.diag(inflate_additive_diag(C, 0.3, rng) - C) for _ in range(20_000)])
    np.testing.assert_allclose(incs.mean(axis=0), 0.15, atol=0.005)


def test_inflate_additive_state(rng):
    ens = Ensemble(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(inflate_additive_state(ens, 0.0, rng).members, ens.members)
    out = inflate_additive_state(ens, 0.4, rng)
    assert np.all(np.linalg.norm(out.members - ens.members, axis=1) <= 0.4 * np.sqrt(3))
    shifts = np.array([inflate_additive_state(ens, 0.4, rng).mean() - ens.mean() for _ in range(5000)])
    np.testing.assert_allclose(shifts.mean(axis=0), 0.2, atol=0.005)


def test_inflation_config_validation():
    with pytest.raises(ValueError):
        InflationConfig(delta=-1)
    with pytest.raises(ValueError):
        InflationConfig(mu=float("nan"))


def test_hybrid_blend():
    B, P = np.eye(2), 3 * np.eye(2)
    np.testing.assert_array_equal(hybrid_blend(B, P, 0.0), B)
    np.testing.assert_array_equal(hybrid_blend(B, P, 1.0), P)
    np.testing.assert_array_equal(hybrid_blend(B, P, 0.5), 2 * np.eye(2))
    with pytest.raises(DimensionError):
        hybrid_blend(np.eye(2), np.eye(3), 0.5)
    with pytest.raises(ValueError):
        hybrid_blend(B, P, 1.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_innovation_every_filter(seed):
    r = np.random.default_rng(seed)
    n = 3
    ens = Ensemble(r.normal(size=(6, n)))
    H = r.normal(size=(2, n))
    R = random_spd(r, 2)
    y = H @ ens.mean()
    B = random_spd(r, n)
    x = ens.mean()
    for res in (
        oi_analysis(x, B, H, R, y),
        var3d_analysis(x, B, H, R, y),
        ekf_analysis(x, B, H, R, y),
        ensrf_analysis(ens, H, R, y),
        etkf_analysis(ens, H, R, y),
    ):
        np.testing.assert_allclose(res.analysis_state, x, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_analysis_covariances_psd(seed):
    r = np.random.default_rng(seed)
    s = random_system(r)
    P_a = oi_analysis(**s).analysis_covariance
    assert is_psd(P_a)
    np.testing.assert_array_equal(P_a, P_a.T)
