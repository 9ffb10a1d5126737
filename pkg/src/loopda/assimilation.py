"""Global (non-localized) analysis schemes, inflation and static covariances.

Conventions
-----------
* States are 1-d arrays of length ``n``; observation vectors have length ``m``.
* ``H`` is an ``m x n`` matrix. Only :func:`var3d_cost` accepts a callable.
* Ensembles store members as rows: ``members.shape == (k, n)``. The
  perturbation matrix returned by :meth:`Ensemble.perturbations` is ``n x k``
  (members as columns), matching the usual ``X_b``.
* Linear systems are solved, never inverted explicitly, and are rejected as
  singular when the smallest singular value falls below ``1e-12`` times the
  largest.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, SingularMatrixError
from .models import DEFAULT_CONFIG, IntegratorConfig, advance, tlm_forecast

log = logging.getLogger(__name__)

SINGULAR_RTOL = 1e-12
PSD_RTOL = 1e-10


# --------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Ensemble:
    members: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.members, dtype=float)
        if X.ndim != 2:
            raise DimensionError("ensemble members must be a (k, n) array")
        if X.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 members")
        object.__setattr__(self, "members", X)

    @property
    def k(self):
        return self.members.shape[0]

    @property
    def n(self):
        return self.members.shape[1]

    def mean(self):
        return self.members.mean(axis=0)

    def perturbations(self):
        """``n x k`` matrix whose columns are member minus mean."""
        return (self.members - self.mean()).T

    def spread(self):
        return float(np.sqrt((self.perturbations() ** 2).sum() / (self.k - 1)))


@dataclass(frozen=True)
class InflationConfig:
    """Multiplicative factor ``delta`` and additive bound ``mu``."""

    delta: float = 0.0
    mu: float = 0.0
    rng_seed: Optional[int] = None

    def __post_init__(self):
        for name in ("delta", "mu"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")


@dataclass
class AnalysisResult:
    analysis_state: np.ndarray
    innovation: np.ndarray
    increment_norm: float
    analysis_covariance: Optional[np.ndarray] = None
    analysis_ensemble: Optional[Ensemble] = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class Forecast:
    state: np.ndarray
    covariance: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``x_f, P_f = ekf_forecast(...)``
        return iter((self.state, self.covariance))


def _result(x_b, x_a, d, **kw):
    return AnalysisResult(
        analysis_state=x_a,
        innovation=d,
        increment_norm=float(np.linalg.norm(x_a - x_b)),
        **kw,
    )


# --------------------------------------------------------------------------
# linear algebra helpers


def symmetrize(P):
    P = np.asarray(P, dtype=float)
    return 0.5 * (P + P.T)


def is_psd(P, rtol=PSD_RTOL):
    P = np.asarray(P, dtype=float)
    if P.size == 0:
        return True
    scale = max(abs(np.trace(P)), np.abs(P).max(), np.finfo(float).tiny)
    return bool(np.linalg.eigvalsh(symmetrize(P)).min() >= -rtol * scale)


def check_covariance(C, n=None, name="covariance"):
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DimensionError(f"{name} must be square, got {C.shape}")
    if n is not None and C.shape[0] != n:
        raise DimensionError(f"{name} is {C.shape[0]}x{C.shape[0]}, expected {n}x{n}")
    if not np.isfinite(C).all():
        raise ValueError(f"{name} has non-finite entries")
    scale = max(np.abs(C).max(), np.finfo(float).tiny)
    if np.abs(C - C.T).max() > PSD_RTOL * scale:
        raise ValueError(f"{name} is not symmetric")
    if not is_psd(C):
        raise ValueError(f"{name} is not positive semidefinite")
    return C


def _check_singular(A, what):
    s = np.linalg.svd(A, compute_uv=False)
    if s.size and (s[-1] <= SINGULAR_RTOL * s[0] or s[0] == 0):
        raise SingularMatrixError(f"{what} is singular (condition {s[0] / max(s[-1], 1e-300):.3g})")


def solve(A, b, what="matrix"):
    A = np.asarray(A, dtype=float)
    _check_singular(A, what)
    return np.linalg.solve(A, b)


def sqrt_psd(A):
    """Symmetric positive semidefinite square root."""
    w, V = np.linalg.eigh(symmetrize(A))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def _obs_shapes(H, R, y_o, n):
    H = np.atleast_2d(np.asarray(H, dtype=float))
    y_o = np.atleast_1d(np.asarray(y_o, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    m = y_o.shape[0]
    if H.shape != (m, n):
        raise DimensionError(f"H is {H.shape}, expected {(m, n)}")
    if R.shape != (m, m):
        raise DimensionError(f"R is {R.shape}, expected {(m, m)}")
    return H, R, y_o


# --------------------------------------------------------------------------
# scalar, OI, 3D-Var


def scalar_analysis(u_b, var_b, u_o, var_o):
    """Combine a scalar background and observation.

    Returns the analysis value and variance; the analysis precision is the
    sum of the two input precisions.
    """
    if not (var_b > 0 and var_o > 0):
        raise ValueError("variances must be positive")
    w = var_b / (var_b + var_o)
    u_a = u_b + w * (u_o - u_b)
    var_a = 1.0 / (1.0 / var_b + 1.0 / var_o)
    return u_a, var_a


def oi_gain(B, H, R):
    """Optimal-interpolation weight ``B H^T (R + H B H^T)^-1``."""
    B = np.asarray(B, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if H.shape[1] != B.shape[0] or R.shape[0] != H.shape[0]:
        raise DimensionError(f"shapes B{B.shape}, H{H.shape}, R{R.shape} do not conform")
    S = R + H @ B @ H.T
    # S is symmetric, so (S^-1 H B)^T = B H^T S^-1
    return solve(S, H @ B, "innovation covariance R + H B H^T").T


def oi_analysis(x_b, B, H, R, y_o):
    x_b = np.asarray(x_b, dtype=float)
    H, R, y_o = _obs_shapes(H, R, y_o, x_b.shape[0])
    W = oi_gain(B, H, R)
    d = y_o - H @ x_b
    x_a = x_b + W @ d
    P_a = symmetrize((np.eye(x_b.shape[0]) - W @ H) @ B)
    return _result(x_b, x_a, d, analysis_covariance=P_a)


def var3d_cost(x, x_b, B, y_o, H, R):
    """Quadratic 3D-Var cost; ``H`` may be a matrix or a callable operator."""
    x = np.asarray(x, dtype=float)
    dx = x - np.asarray(x_b, dtype=float)
    hx = H(x) if callable(H) else np.atleast_2d(H) @ x
    r = np.atleast_1d(y_o) - hx
    jb = dx @ solve(B, dx, "B")
    jo = r @ solve(np.atleast_2d(R), r, "R")
    return float(jb + jo)


def var3d_gradient(x, x_b, B, y_o, H, R, H_jacobian=None):
    """Gradient of :func:`var3d_cost`. Callable ``H`` needs ``H_jacobian(x)``."""
    x = np.asarray(x, dtype=float)
    if callable(H):
        if H_jacobian is None:
            raise ValueError("a nonlinear H requires H_jacobian")
        hx, Hj = H(x), np.atleast_2d(H_jacobian(x))
    else:
        Hj = np.atleast_2d(H)
        hx = Hj @ x
    r = np.atleast_1d(y_o) - hx
    return 2.0 * solve(B, x - x_b, "B") - 2.0 * Hj.T @ solve(np.atleast_2d(R), r, "R")


def var3d_analysis(x_b, B, H, R, y_o):
    """Closed-form minimizer of the 3D-Var cost for a linear operator."""
    x_b = np.asarray(x_b, dtype=float)
    n = x_b.shape[0]
    H, R, y_o = _obs_shapes(H, R, y_o, n)
    B_inv = solve(B, np.eye(n), "B")
    RinvH = solve(R, H, "R")
    A = B_inv + H.T @ RinvH
    d = y_o - H @ x_b
    x_a = x_b + solve(A, H.T @ solve(R, d, "R"), "B^-1 + H^T R^-1 H")
    return _result(x_b, x_a, d)


def nmc_static_b(params, ic_set, lead_long, lead_short,
                 config: IntegratorConfig = DEFAULT_CONFIG, scale=1.0):
    """Static background covariance from differences of long and short forecasts."""
    if not lead_long > lead_short > 0:
        raise ValueError("need lead_long > lead_short > 0")
    X0 = np.atleast_2d(np.asarray(ic_set, dtype=float))
    if X0.shape[0] < 2:
        raise ValueError("the NMC estimate needs at least 2 initial conditions")
    n_short = config.steps(lead_short)
    n_long = config.steps(lead_long)
    short = advance(X0, params, n_short * config.dt, config)
    long = advance(short, params, (n_long - n_short) * config.dt, config)
    D = long - short
    return symmetrize(scale * (D.T @ D) / D.shape[0])


# --------------------------------------------------------------------------
# extended Kalman filter


def ekf_forecast(x_a, P_a, params, window, Q=None, config: IntegratorConfig = DEFAULT_CONFIG):
    """Propagate the analysis state nonlinearly and its covariance with the TLM."""
    x_a = np.asarray(x_a, dtype=float)
    P_a = np.asarray(P_a, dtype=float)
    x_f, L = tlm_forecast(x_a, params, window, config)
    P_f = L @ P_a @ L.T
    if Q is not None:
        P_f = P_f + Q
    P_f = symmetrize(P_f)
    diagnostics = {"psd": is_psd(P_f)}
    if not diagnostics["psd"]:
        log.warning("EKF forecast covariance is not PSD within tolerance")
    return Forecast(x_f, P_f, diagnostics)


def ekf_analysis(x_f, P_f, H, R, y_o):
    x_f = np.asarray(x_f, dtype=float)
    n = x_f.shape[0]
    H, R, y_o = _obs_shapes(H, R, y_o, n)
    P_f = np.asarray(P_f, dtype=float)
    PHt = P_f @ H.T
    S = R + H @ PHt
    K = solve(S, PHt.T, "innovation covariance R + H P_f H^T").T
    d = y_o - H @ x_f
    x_a = x_f + K @ d
    P_a = symmetrize((np.eye(n) - K @ H) @ P_f)
    return _result(x_f, x_a, d, analysis_covariance=P_a, diagnostics={"gain": K})


# --------------------------------------------------------------------------
# ensemble filters


def ensemble_covariance(ens: Ensemble, mode="leave_one_out"):
    """Forecast covariance estimated from an ensemble.

    ``leave_one_out`` measures each member against the mean of the *other*
    members and normalizes by ``k - 2``; ``standard`` is the usual unbiased
    sample covariance.
    """
    X = ens.members
    k = ens.k
    if mode == "standard":
        A = X - X.mean(axis=0)
        return symmetrize(A.T @ A / (k - 1))
    if mode != "leave_one_out":
        raise ValueError(f"unknown covariance mode {mode!r}")
    if k < 3:
        raise ValueError("leave-one-out covariance needs at least 3 members")
    total = X.sum(axis=0)
    P = np.zeros((ens.n, ens.n))
    for i in range(k):
        others = (total - X[i]) / (k - 1)
        e = X[i] - others
        P += np.outer(e, e)
    return symmetrize(P / (k - 2))


def _obs_noise(R, k, rng):
    """``k`` draws from N(0, R) as rows."""
    Z = rng.standard_normal((k, R.shape[0]))
    return Z @ sqrt_psd(R)


def enkf_analysis(ens: Ensemble, H, R, y_o, inflation: InflationConfig = InflationConfig(),
                  rng=None, perturb=True, covariance_mode="leave_one_out"):
    """Perturbed-observation EnKF.

    Every member is updated against its own noisy copy of the observations.
    Multiplicative inflation scales the forecast covariance; additive
    inflation is applied to the analysis members afterwards.
    """
    if rng is None:
        rng = np.random.default_rng(inflation.rng_seed)
    H, R, y_o = _obs_shapes(H, R, y_o, ens.n)
    x_b = ens.mean()
    P_f = inflate_multiplicative(ensemble_covariance(ens, covariance_mode), inflation.delta)
    PHt = P_f @ H.T
    K = solve(R + H @ PHt, PHt.T, "innovation covariance R + H P_f H^T").T
    eta = _obs_noise(R, ens.k, rng) if perturb else np.zeros((ens.k, len(y_o)))
    innov = (y_o + eta) - ens.members @ H.T
    analysis = Ensemble(ens.members + innov @ K.T)
    if inflation.mu > 0:
        analysis = inflate_additive_state(analysis, inflation.mu, rng)
    diagnostics = {"gain": K, "zero_spread": bool(np.allclose(ens.perturbations(), 0))}
    return _result(x_b, analysis.mean(), y_o - H @ x_b, analysis_ensemble=analysis,
                   diagnostics=diagnostics)


def ensrf_analysis(ens: Ensemble, H, R, y_o):
    """Deterministic square-root update (Potter form).

    The mean gets the standard Kalman gain; the perturbations are
    post-multiplied by the symmetric root of ``I - V D^-1 V^T``.
    """
    H, R, y_o = _obs_shapes(H, R, y_o, ens.n)
    k = ens.k
    x_b = ens.mean()
    d = y_o - H @ x_b
    Zf = ens.perturbations() / np.sqrt(k - 1)
    V = (H @ Zf).T
    D = V.T @ V + R
    DinvVt = solve(D, V.T, "D = V^T V + R")
    K = Zf @ DinvVt.T
    T = sqrt_psd(np.eye(k) - V @ DinvVt)
    Za = Zf @ T
    x_a = x_b + K @ d
    members = x_a + np.sqrt(k - 1) * Za.T
    return _result(x_b, x_a, d, analysis_ensemble=Ensemble(members),
                   diagnostics={"gain": K})


def _inv_obs_error(R):
    """Apply ``R^-1`` to a matrix; ``R`` may be a full matrix or a diagonal vector."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        if np.any(R <= 0):
            raise SingularMatrixError("observation error variances must be positive")
        return lambda A: A / (R[:, None] if A.ndim == 2 else R)
    _check_singular(R, "R")
    return lambda A: np.linalg.solve(R, A)


def transform_weights(Yb, R, d, rho=1.0):
    """Ensemble-space analysis weights shared by the ETKF and LETKF.

    Parameters
    ----------
    Yb : (m, k) array
        Background perturbations in observation space.
    R : (m, m) or (m,) array
        Observation error covariance, or its diagonal.
    d : (m,) array
        ``y_o - mean(y_b)``.
    rho : float
        Multiplicative inflation, ``rho >= 1``.

    Returns
    -------
    w_mean : (k,) array
        Mean weight vector.
    W_a : (k, k) array
        Symmetric square root of ``(k - 1) * P_tilde``; its columns are the
        per-member perturbation weights.
    P_tilde : (k, k) array
        Analysis covariance in ensemble space.
    """
    if rho < 1:
        raise ValueError("inflation factor rho must be >= 1")
    m, k = Yb.shape
    Rinv = _inv_obs_error(R)
    C = Rinv(Yb).T  # k x m, (Y_b)^T R^-1
    S = symmetrize(C @ Yb)
    try:
        lam, Q = np.linalg.eigh(S)
    except np.linalg.LinAlgError as err:
        raise SingularMatrixError(f"eigendecomposition failed: {err}") from err
    lam = np.clip(lam, 0.0, None)
    denom = (k - 1) / rho + lam
    P_tilde = (Q / denom) @ Q.T
    W_a = (Q * np.sqrt((k - 1) / denom)) @ Q.T
    w_mean = P_tilde @ (C @ d)
    return w_mean, W_a, P_tilde


def etkf_analysis(ens: Ensemble, H, R, y_o, rho=1.0):
    """Ensemble transform Kalman filter with symmetric square root."""
    if rho < 1:
        raise ValueError("inflation factor rho must be >= 1")
    y_o = np.atleast_1d(np.asarray(y_o, dtype=float))
    x_b = ens.mean()
    Xb = ens.perturbations()
    if y_o.size == 0:
        members = ens.members.copy() if rho == 1 else x_b + (Xb * np.sqrt(rho)).T
        return _result(x_b, x_b.copy(), y_o, analysis_ensemble=Ensemble(members))
    H, R, y_o = _obs_shapes(H, R, y_o, ens.n)
    Yb_members = ens.members @ H.T
    y_mean = Yb_members.mean(axis=0)
    Yb = (Yb_members - y_mean).T
    w_mean, W_a, P_tilde = transform_weights(Yb, R, y_o - y_mean, rho)
    W = W_a + w_mean[:, None]
    members = (x_b[:, None] + Xb @ W).T
    x_a = x_b + Xb @ w_mean
    return _result(x_b, x_a, y_o - H @ x_b, analysis_ensemble=Ensemble(members),
                   diagnostics={"P_tilde": P_tilde})


# --------------------------------------------------------------------------
# inflation and blending


def inflate_multiplicative(C, delta):
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return (1.0 + delta) * np.asarray(C, dtype=float)


def inflate_additive_diag(C, mu, rng):
    """Add ``mu * nu`` to the diagonal, ``nu ~ U[0, 1]^n``."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    C = np.array(C, dtype=float, copy=True)
    nu = rng.uniform(0.0, 1.0, C.shape[0])
    C[np.diag_indices_from(C)] += mu * nu
    return C


def inflate_additive_state(ens: Ensemble, mu, rng):
    """Add an independent ``U[0, mu]^n`` draw to every member."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    nu = rng.uniform(0.0, 1.0, ens.members.shape) * mu
    return Ensemble(ens.members + nu)


def inflate_perturbations(ens: Ensemble, delta):
    """Scale perturbations about the mean so the sample covariance grows by ``1 + delta``."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    x = ens.mean()
    return Ensemble(x + np.sqrt(1.0 + delta) * (ens.members - x))


def hybrid_blend(B_static, P_f, alpha):
    """Weighted combination ``alpha * P_f + (1 - alpha) * B_static``."""
    B_static = np.asarray(B_static, dtype=float)
    P_f = np.asarray(P_f, dtype=float)
    if B_static.shape != P_f.shape:
        raise DimensionError(f"shape mismatch {B_static.shape} vs {P_f.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * P_f + (1.0 - alpha) * B_static
