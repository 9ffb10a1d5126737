"""Forecast models: Lorenz 63 and the Ehrhard-Muller thermosyphon equations.

States are plain 1-d float arrays. A state of length ``3 * n`` is treated as
``n`` independent three-variable sites (used by the ring test model); pass a
sequence of per-site parameter objects in that case.

All integration goes through :mod:`loopda.kernels`, which picks the compiled
extension when it is available.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar, Union

import numpy as np

from . import kernels
from ._pykernels import h_friction_prime as _h_prime_array
from ._pykernels import jacobian_one as _jacobian_one
from ._pykernels import rhs_batch as _rhs_batch
from .errors import BlowUpError, DimensionError


@dataclass(frozen=True)
class Lorenz63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    code: ClassVar[int] = kernels.LORENZ63
    name: ClassVar[str] = "lorenz63"

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.sigma, self.rho, self.beta)):
            raise ValueError("Lorenz 63 parameters must be finite")

    def as_array(self):
        return np.array([self.sigma, self.rho, self.beta])

    def fixed_points(self):
        """Equilibria of the system (origin first)."""
        pts = [np.zeros(3)]
        if self.beta * (self.rho - 1.0) > 0:
            r = math.sqrt(self.beta * (self.rho - 1.0))
            pts.append(np.array([r, r, self.rho - 1.0]))
            pts.append(np.array([-r, -r, self.rho - 1.0]))
        return pts


@dataclass(frozen=True)
class EhrhardMullerParams:
    """Nondimensional thermosyphon parameters.

    ``beta_em`` is the forcing parameter (not Lorenz's geometric beta) and
    ``k_wall`` the friction coefficient multiplying h(|x1|).
    """

    alpha: float
    beta_em: float
    k_wall: float = 0.0

    code: ClassVar[int] = kernels.EHRHARD_MULLER
    name: ClassVar[str] = "ehrhard_muller"

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.beta_em, self.k_wall)):
            raise ValueError("Ehrhard-Muller parameters must be finite")
        if self.k_wall < 0:
            raise ValueError("k_wall must be nonnegative")

    def as_array(self):
        return np.array([self.alpha, self.beta_em, self.k_wall])

    def lorenz_equivalent(self):
        """Lorenz 63 parameters giving identical dynamics (requires K = 0)."""
        if self.k_wall != 0:
            raise ValueError("only the K = 0 system reduces to Lorenz 63")
        return Lorenz63Params(sigma=self.alpha, rho=self.beta_em, beta=1.0)


Params = Union[Lorenz63Params, EhrhardMullerParams]


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "rk2"
    dt: float = 0.01
    time_scale_seconds: float = 1500.0

    def __post_init__(self):
        if self.scheme not in kernels.SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.time_scale_seconds > 0:
            raise ValueError("time_scale_seconds must be positive")

    def steps(self, duration):
        if duration < 0:
            raise ValueError("duration must be nonnegative")
        return int(math.floor(duration / self.dt + 0.5))

    def seconds_to_model(self, seconds):
        return seconds / self.time_scale_seconds

    def model_to_seconds(self, t):
        return t * self.time_scale_seconds


DEFAULT_CONFIG = IntegratorConfig()


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")

    def __len__(self):
        return len(self.times)

    @property
    def final(self):
        return self.states[-1]

    def index_at(self, t, tol=None):
        """Index of the stamp nearest ``t``; ``tol`` defaults to half a step."""
        i = int(np.argmin(np.abs(self.times - t)))
        if tol is None:
            tol = 0.5 * (self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0
        if abs(self.times[i] - t) > tol * (1 + 1e-9) + 1e-12:
            raise ValueError(f"time {t} is not on the trajectory (nearest {self.times[i]})")
        return i

    def at(self, t, tol=None):
        return self.states[self.index_at(t, tol)]


def _as_state(state, n=None):
    x = np.asarray(state, dtype=float)
    if x.ndim != 1:
        raise DimensionError(f"state must be 1-d, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise DimensionError(f"state has dimension {x.shape[0]}, expected {n}")
    return x


def _site_params(params, n):
    """Model code and (sites, 3) parameter matrix for a state of length n."""
    if n % 3:
        raise DimensionError(f"state dimension {n} is not a multiple of 3")
    sites = n // 3
    if isinstance(params, (Lorenz63Params, EhrhardMullerParams)):
        return params.code, np.tile(params.as_array(), (sites, 1))
    params = list(params)
    if len(params) != sites:
        raise DimensionError(f"{len(params)} site parameter sets for {sites} sites")
    codes = {p.code for p in params}
    if len(codes) != 1:
        raise ValueError("all sites must use the same model")
    return codes.pop(), np.array([p.as_array() for p in params])


def h_friction(x):
    """Wall-friction factor: cube root above 1, a quartic joined smoothly below."""
    if x < 0:
        raise ValueError("h_friction is defined for x >= 0")
    if x >= 1.0:
        return x ** (1.0 / 3.0)
    return (44.0 * x**2 - 55.0 * x**3 + 20.0 * x**4) / 9.0


def h_friction_prime(x):
    if x < 0:
        raise ValueError("h_friction_prime is defined for x >= 0")
    return float(_h_prime_array(x))


def lorenz63_rhs(state, params: Lorenz63Params = Lorenz63Params()):
    x = _as_state(state, 3)
    return _rhs_batch(kernels.LORENZ63, params.as_array()[None, :], x[None, :])[0]


def em_rhs(state, params: EhrhardMullerParams):
    x = _as_state(state, 3)
    return _rhs_batch(kernels.EHRHARD_MULLER, params.as_array()[None, :], x[None, :])[0]


def rhs(state, params):
    x = _as_state(state)
    code, P = _site_params(params, x.shape[0])
    return _rhs_batch(code, P, x.reshape(-1, 3)).ravel()


def jacobian(state, params):
    """Analytic Jacobian of the right-hand side; block diagonal for multi-site states."""
    x = _as_state(state)
    code, P = _site_params(params, x.shape[0])
    sites = x.reshape(-1, 3)
    if len(sites) == 1:
        return _jacobian_one(code, P[0], sites[0])
    J = np.zeros((x.shape[0], x.shape[0]))
    for i, (p, s) in enumerate(zip(P, sites)):
        J[3 * i:3 * i + 3, 3 * i:3 * i + 3] = _jacobian_one(code, p, s)
    return J


def _check(bad, what, dt):
    if bad >= 0:
        raise BlowUpError(
            f"{what}: non-finite state at step {bad} (t = {bad * dt:g})", step=bad
        )


def integrate(state, params, duration, config: IntegratorConfig = DEFAULT_CONFIG, t0=0.0):
    """Integrate a state forward; returns every step as a :class:`Trajectory`."""
    x = _as_state(state)
    if not np.isfinite(x).all():
        raise BlowUpError("initial state is not finite", step=0)
    code, P = _site_params(params, x.shape[0])
    nsteps = config.steps(duration)
    states, bad = kernels.get().trajectory_batch(
        code, P, x.reshape(-1, 3), config.dt, nsteps, kernels.SCHEMES[config.scheme]
    )
    _check(bad, "integrate", config.dt)
    times = t0 + config.dt * np.arange(nsteps + 1)
    return Trajectory(times, states.reshape(nsteps + 1, -1))


def advance(states, params, duration, config: IntegratorConfig = DEFAULT_CONFIG):
    """End states only. ``states`` is a single state or a (k, n) stack of members."""
    X = np.asarray(states, dtype=float)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    k, n = X2.shape
    code, P = _site_params(params, n)
    nsteps = config.steps(duration)
    out, bad = kernels.get().advance_batch(
        code, np.tile(P, (k, 1)), X2.reshape(-1, 3), config.dt, nsteps,
        kernels.SCHEMES[config.scheme],
    )
    _check(bad, "advance", config.dt)
    out = out.reshape(k, n)
    return out[0] if single else out


def tlm_forecast(state, params, duration, config: IntegratorConfig = DEFAULT_CONFIG):
    """Final state and tangent linear operator of the discrete model map.

    The operator is the exact derivative of the time-stepping scheme, carried
    alongside the nonlinear state step by step.
    """
    x = _as_state(state)
    code, P = _site_params(params, x.shape[0])
    nsteps = config.steps(duration)
    scheme = kernels.SCHEMES[config.scheme]
    impl = kernels.get()
    sites = x.reshape(-1, 3)
    xf = np.empty_like(sites)
    L = np.zeros((x.shape[0], x.shape[0]))
    for i, (p, s) in enumerate(zip(P, sites)):
        xi, Li, bad = impl.tlm(code, p, s, config.dt, nsteps, scheme)
        _check(bad, "propagate_tlm", config.dt)
        xf[i] = xi
        L[3 * i:3 * i + 3, 3 * i:3 * i + 3] = Li
    return xf.ravel(), L


def propagate_tlm(state, params, duration, config: IntegratorConfig = DEFAULT_CONFIG):
    return tlm_forecast(state, params, duration, config)[1]


@dataclass(frozen=True)
class ThermosyphonConstants:
    """Fluid and loop constants for the nondimensional change of variables (SI).

    Water properties default to 300 K values. ``loop_radius``, ``h_w0`` and
    ``f_w0`` describe a particular loop and have no defaults. The forcing
    group gamma = (2/pi) rho c_p beta g dT_w / (R h_w0 f_w0) is exposed by
    :meth:`gamma` but does not enter the three ODEs.
    """

    loop_radius: float
    h_w0: float
    f_w0: float
    rho_ref: float = 995.65
    c_p: float = 4187.0
    beta_thermal: float = 0.303e-3
    g: float = 9.8

    def _require_nonzero(self):
        for name in ("loop_radius", "h_w0", "f_w0", "rho_ref", "c_p"):
            if getattr(self, name) == 0:
                raise ZeroDivisionError(f"{name} must be nonzero")

    @property
    def velocity_scale(self):
        self._require_nonzero()
        return self.rho_ref * self.c_p / (self.loop_radius * self.h_w0)

    @property
    def temperature_scale(self):
        self._require_nonzero()
        return 0.5 * self.rho_ref * self.c_p * self.beta_thermal * self.g / (
            self.loop_radius * self.h_w0 * self.f_w0
        )

    @property
    def seconds_per_model_time(self):
        self._require_nonzero()
        return self.rho_ref * self.c_p / self.h_w0

    def alpha(self):
        self._require_nonzero()
        return 0.5 * self.loop_radius * self.c_p * self.f_w0 / self.h_w0

    def gamma(self, dT_wall):
        return 4.0 / math.pi * self.temperature_scale * dT_wall


def profile_deviation(dT_wall, dT_6_12):
    """Deviation of the vertical temperature profile from the conductive state."""
    return 4.0 / math.pi * dT_wall - dT_6_12


def em_nondimensionalize(u, dT_3_9, deviation, constants: ThermosyphonConstants):
    """Physical (velocity m/s, temperature differences K) to (x1, x2, x3)."""
    return np.array([
        constants.velocity_scale * u,
        constants.temperature_scale * dT_3_9,
        constants.temperature_scale * deviation,
    ])


def em_dimensionalize(state, constants: ThermosyphonConstants):
    """Inverse of :func:`em_nondimensionalize`: returns (u, dT_3_9, deviation)."""
    x = _as_state(state, 3)
    ts = constants.temperature_scale
    return x[0] / constants.velocity_scale, x[1] / ts, x[2] / ts
