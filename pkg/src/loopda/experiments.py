"""Twin experiments, skill metrics and the sweep protocols.

A twin experiment runs the model from a random attractor state to make a
truth, observes it with noise at the end of every window and cycles a filter
against those observations. Scores are forecast minus truth at window ends,
in the scored variable, over the windows after spin-up.

Random streams come from one ``numpy.random.SeedSequence(seed)`` spawned
into truth, observation, initial-condition and filter streams. Truth and
observations depend on the seed only, so every filter run with the same
seed sees the same truth.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import assimilation as da
from .assimilation import Ensemble, InflationConfig
from .errors import BlowUpError, ConfigError
from .localization import LocalityScheme, RingTestModel, letkf_analysis
from .models import (
    EhrhardMullerParams,
    IntegratorConfig,
    Lorenz63Params,
    advance,
    integrate,
)
from .observations import ObservationSet, generate_synthetic_obs

log = logging.getLogger(__name__)

FILTERS = ("none", "oi", "3dvar", "ekf", "enkf", "ensrf", "etkf", "letkf")
ENSEMBLE_FILTERS = ("enkf", "ensrf", "etkf", "letkf")
MODELS = ("lorenz63", "ehrhard_muller", "ring")


@dataclass(frozen=True)
class TwinExperimentConfig:
    model: str = "lorenz63"
    params: Optional[dict] = None
    n_sites: int = 4  # ring model only
    filter: str = "etkf"
    window: float = 0.25  # model time units
    n_windows: int = 600
    spin_up_windows: int = 100
    ensemble_size: int = 10
    delta: float = 0.0
    mu: float = 0.0
    observed: tuple = (0,)
    obs_variance: float = 0.05
    init_error_variance: float = 0.01
    scored_variable: int = 0
    seed: int = 0
    dt: float = 0.01
    scheme: str = "rk2"
    time_scale_seconds: float = 1500.0
    truth_spin_up: float = 10.0
    covariance_mode: str = "leave_one_out"
    locality_radius: Optional[float] = None  # letkf, meters on the ring
    store_ensembles: bool = False

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.filter not in FILTERS:
            raise ConfigError(f"unknown filter {self.filter!r}; choose from {', '.join(FILTERS)}")
        if not self.n_windows > self.spin_up_windows >= 0:
            raise ConfigError("need n_windows > spin_up_windows >= 0")
        if not self.window > 0:
            raise ConfigError("window must be positive")
        if self.filter in ENSEMBLE_FILTERS:
            low = 3 if (self.filter == "enkf" and self.covariance_mode == "leave_one_out") else 2
            if self.ensemble_size < low:
                raise ConfigError(f"{self.filter} needs at least {low} members")
        if self.filter == "letkf" and self.model != "ring":
            raise ConfigError("letkf runs on the ring model")
        if self.obs_variance < 0 or self.init_error_variance < 0:
            raise ConfigError("variances must be nonnegative")
        object.__setattr__(self, "observed", tuple(int(i) for i in self.observed))
        InflationConfig(self.delta, self.mu)  # validates
        if not 0 <= self.scored_variable < self.dim:
            raise ConfigError("scored variable outside the state")
        if any(not 0 <= i < self.dim for i in self.observed):
            raise ConfigError("observed index outside the state")
        try:
            self.model_params()
            self.integrator
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @property
    def dim(self):
        return 3 * self.n_sites if self.model == "ring" else 3

    @property
    def integrator(self):
        return IntegratorConfig(self.scheme, self.dt, self.time_scale_seconds)

    @property
    def window_seconds(self):
        return self.window * self.time_scale_seconds

    def model_params(self):
        p = dict(self.params or {})
        try:
            if self.model == "lorenz63":
                return Lorenz63Params(**p)
            if self.model == "ehrhard_muller":
                return EhrhardMullerParams(**p)
        except TypeError as err:
            raise ConfigError(f"bad params for {self.model}: {err}") from None
        return self.ring().params

    def ring(self):
        return RingTestModel(self.n_sites, (Lorenz63Params(**dict(self.params or {})),) * self.n_sites)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["observed"] = list(self.observed)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "observed" in d:
            d["observed"] = tuple(d["observed"])
        return cls(**d)


@dataclass
class RunResult:
    config: TwinExperimentConfig
    times: np.ndarray
    truth: np.ndarray  # (n_windows, n) at window ends
    forecast: np.ndarray
    analysis: np.ndarray
    increment_norm: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    spread: Optional[np.ndarray] = None  # (n_windows, k): member minus analysis, scored variable

    @property
    def scored(self):
        return slice(self.config.spin_up_windows, None)

    @property
    def forecast_error(self):
        v = self.config.scored_variable
        return self.forecast[:, v] - self.truth[:, v]

    @property
    def analysis_error(self):
        v = self.config.scored_variable
        return self.analysis[:, v] - self.truth[:, v]

    @property
    def summary_rmse(self):
        v = self.config.scored_variable
        return rmse(self.forecast[self.scored, v], self.truth[self.scored, v])

    @property
    def analysis_rmse(self):
        v = self.config.scored_variable
        return rmse(self.analysis[self.scored, v], self.truth[self.scored, v])

    def rows(self):
        """One record per window, for delimited output."""
        fe, ae = self.forecast_error, self.analysis_error
        v = self.config.scored_variable
        for i in range(len(self.times)):
            yield {
                "window": i + 1,
                "time": self.times[i],
                "truth": self.truth[i, v],
                "forecast": self.forecast[i, v],
                "analysis": self.analysis[i, v],
                "forecast_error": fe[i],
                "analysis_error": ae[i],
                "increment_norm": self.increment_norm[i],
                "scored": int(i >= self.config.spin_up_windows),
            }


def rmse(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"series differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("rmse of an empty series")
    return float(np.sqrt(np.mean((a - b) ** 2)))


# --------------------------------------------------------------------------
# twin experiment


def _streams(seed):
    truth, obs, init, filt = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.Generator(np.random.PCG64(s)) for s in (truth, obs, init, filt))


def _random_state(cfg, rng):
    base = np.tile([0.0, 0.0, 25.0], cfg.dim // 3) if cfg.model != "ehrhard_muller" else np.zeros(3)
    return base + rng.normal(0.0, 1.0, cfg.dim) * (5.0 if cfg.model != "ehrhard_muller" else 1.0)


def make_truth(cfg: TwinExperimentConfig):
    """Truth trajectory over all windows, started from a spun-up random state."""
    rng = _streams(cfg.seed)[0]
    params = cfg.model_params()
    x0 = advance(_random_state(cfg, rng), params, cfg.truth_spin_up, cfg.integrator)
    return integrate(x0, params, cfg.n_windows * cfg.window, cfg.integrator)


def _observation_matrix(cfg):
    return np.eye(cfg.dim)[list(cfg.observed)]


def make_observations(cfg, truth):
    rng = _streams(cfg.seed)[1]
    H = _observation_matrix(cfg)
    if H.shape[0] == 0:
        return None
    locs = None
    if cfg.model == "ring":
        geom = cfg.ring().geometry()
        locs = geom.cell_centers[[i // 3 for i in cfg.observed]]
    obs = generate_synthetic_obs(truth, H, cfg.obs_variance, cfg.window, rng)
    if locs is not None:
        obs.locations = np.tile(locs, (len(obs) // len(locs), 1))
    return obs


def _static_b(cfg, params, rng):
    ics = advance(np.array([_random_state(cfg, rng) for _ in range(50)]), params,
                  cfg.truth_spin_up, cfg.integrator)
    return da.nmc_static_b(params, ics, 2 * cfg.window, cfg.window, cfg.integrator)


def _centered_additive(ens, mu, rng):
    """Uniform ``[0, mu]`` draws with their ensemble mean removed."""
    if mu == 0:
        return ens
    nu = rng.uniform(0.0, mu, ens.members.shape)
    return Ensemble(ens.members + nu - nu.mean(axis=0))


class _Window:
    """Per-window observation slice with the operator and R in matrix form."""

    def __init__(self, obs: Optional[ObservationSet], t):
        if obs is None:
            self.y = np.zeros(0)
            return
        sub = obs.at_time(t, tol=1e-9 * max(1.0, abs(t)))
        self.obs = sub
        self.y = sub.values
        self.H = sub.H
        self.R = sub.R


def run_twin_experiment(cfg: TwinExperimentConfig, truth=None, obs=None) -> RunResult:
    params = cfg.model_params()
    icfg = cfg.integrator
    if truth is None:
        truth = make_truth(cfg)
    if obs is None:
        obs = make_observations(cfg, truth)
    _, _, rng_init, rng_f = _streams(cfg.seed)
    n, N = cfg.dim, cfg.n_windows
    steps = icfg.steps(cfg.window)
    truth_end = truth.states[steps::steps][:N]
    times = truth.times[steps::steps][:N]
    sd0 = math.sqrt(cfg.init_error_variance)
    x_a = truth.states[0] + sd0 * rng_init.standard_normal(n)
    inflation = InflationConfig(cfg.delta, cfg.mu)

    ens = P_a = B = geom = scheme = None
    k = cfg.ensemble_size
    if cfg.filter in ENSEMBLE_FILTERS:
        ens = Ensemble(x_a + sd0 * rng_init.standard_normal((k, n)))
    elif cfg.filter == "ekf":
        P_a = cfg.init_error_variance * np.eye(n)
    elif cfg.filter in ("oi", "3dvar"):
        B = _static_b(cfg, params, rng_init)
    if cfg.filter == "letkf":
        ring = cfg.ring()
        geom = ring.geometry()
        r = cfg.locality_radius if cfg.locality_radius is not None else 1.5 * ring.spacing
        scheme = LocalityScheme.radius(r)

    forecast = np.empty((N, n))
    analysis = np.empty((N, n))
    incr = np.empty(N)
    spread = np.empty((N, k)) if (ens is not None and cfg.store_ensembles) else None
    zero_spread = 0
    psd_fail = 0
    v = cfg.scored_variable
    for w in range(N):
        win = _Window(obs, times[w])
        try:
            if ens is not None:
                ens = Ensemble(advance(ens.members, params, cfg.window, icfg))
                x_f = ens.mean()
            elif P_a is not None:
                fc = da.ekf_forecast(x_a, P_a, params, cfg.window, None, icfg)
                x_f, P_f = fc.state, fc.covariance
                psd_fail += not fc.diagnostics["psd"]
            else:
                x_f = advance(x_a, params, cfg.window, icfg)
        except BlowUpError as err:
            raise BlowUpError(f"model blew up in window {w + 1}: {err}", step=err.step, window=w + 1) from err
        forecast[w] = x_f
        if spread is not None:
            spread[w] = ens.members[:, v] - x_f[v]
        if win.y.size == 0 or cfg.filter == "none":
            x_a = x_f
            if P_a is not None:
                P_a = P_f
        elif cfg.filter == "ekf":
            P_f = da.inflate_multiplicative(P_f, cfg.delta)
            if cfg.mu > 0:
                P_f = da.inflate_additive_diag(P_f, cfg.mu, rng_f)
            res = da.ekf_analysis(x_f, P_f, win.H, win.R, win.y)
            x_a, P_a = res.analysis_state, res.analysis_covariance
        elif cfg.filter == "oi":
            x_a = da.oi_analysis(x_f, B, win.H, win.R, win.y).analysis_state
        elif cfg.filter == "3dvar":
            x_a = da.var3d_analysis(x_f, B, win.H, win.R, win.y).analysis_state
        elif cfg.filter == "enkf":
            res = da.enkf_analysis(ens, win.H, win.R, win.y, inflation, rng_f,
                                   covariance_mode=cfg.covariance_mode)
            zero_spread += res.diagnostics["zero_spread"]
            ens = res.analysis_ensemble
        elif cfg.filter == "ensrf":
            res = da.ensrf_analysis(da.inflate_perturbations(ens, cfg.delta), win.H, win.R, win.y)
            ens = _centered_additive(res.analysis_ensemble, cfg.mu, rng_f)
        elif cfg.filter == "etkf":
            res = da.etkf_analysis(ens, win.H, win.R, win.y, rho=1.0 + cfg.delta)
            ens = _centered_additive(res.analysis_ensemble, cfg.mu, rng_f)
        elif cfg.filter == "letkf":
            res = letkf_analysis(ens, win.obs, geom, scheme, rho=1.0 + cfg.delta)
            ens = _centered_additive(res.analysis_ensemble, cfg.mu, rng_f)
        if ens is not None:
            x_a = ens.mean()
        analysis[w] = x_a
        incr[w] = float(np.linalg.norm(x_a - x_f))

    diagnostics = {"zero_spread_windows": zero_spread, "non_psd_forecasts": psd_fail}
    return RunResult(cfg, times, truth_end, forecast, analysis, incr, diagnostics, spread)


# --------------------------------------------------------------------------
# climatology and usefulness


@dataclass(frozen=True)
class ClimatologyStats:
    mean: np.ndarray
    variance: np.ndarray
    duration: float

    def sd(self, variable=0):
        return float(np.sqrt(self.variance[variable]))


def climatology(params, config: IntegratorConfig = IntegratorConfig(), duration=1000.0,
                spin_up=10.0, x0=None, seed=0):
    """Per-variable mean and variance of a long free run."""
    if x0 is None:
        rng = np.random.default_rng(seed)
        x0 = np.array([0.0, 0.0, 25.0]) + rng.normal(0.0, 5.0, 3)
        if isinstance(params, EhrhardMullerParams):
            x0 = rng.normal(0.0, 1.0, 3)
    x0 = np.asarray(x0, dtype=float)
    if spin_up > 0:
        x0 = advance(x0, params, spin_up, config)
    states = integrate(x0, params, duration, config).states
    return ClimatologyStats(states.mean(axis=0), states.var(axis=0), float(duration))


def forecast_useless(rmse_value, clim: ClimatologyStats, variable=0):
    """True when the error exceeds 70% of the climatological standard deviation."""
    var = float(clim.variance[variable])
    if not var > 0:
        raise ValueError("climatological variance is zero")
    return bool(rmse_value > 0.7 * math.sqrt(var))


# --------------------------------------------------------------------------
# sweeps


def _cell_rmse(cfg):
    try:
        return run_twin_experiment(cfg).summary_rmse
    except BlowUpError as err:
        log.warning("cell %s blew up: %s", cfg.seed, err)
        return math.nan


def iter_cells(configs: Sequence[TwinExperimentConfig], workers=1):
    """Yield summary RMSE per config as results arrive, in input order."""
    configs = list(configs)
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(configs) <= 1:
        for c in configs:
            yield _cell_rmse(c)
        return
    with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
        yield from pool.map(_cell_rmse, configs)


def run_cells(configs: Sequence[TwinExperimentConfig], workers=1):
    """Summary RMSE per config, in input order regardless of ``workers``."""
    return list(iter_cells(configs, workers))


@dataclass
class SweepResult:
    """Per-cell records plus the seed-averaged table."""

    keys: tuple
    cells: list  # dicts with the keys, "seed" and "rmse"

    def table(self):
        groups = {}
        for c in self.cells:
            groups.setdefault(tuple(c[k] for k in self.keys), []).append(c["rmse"])
        rows = []
        for key, vals in groups.items():
            vals = np.asarray(vals)
            ok = vals[np.isfinite(vals)]
            row = dict(zip(self.keys, key))
            row["mean_rmse"] = float(ok.mean()) if ok.size else math.nan
            row["n_seeds"] = int(vals.size)
            row["blowups"] = int(vals.size - ok.size)
            rows.append(row)
        return rows

    def value(self, **where):
        for row in self.table():
            if all(row[k] == v for k, v in where.items()):
                return row["mean_rmse"]
        raise KeyError(where)


def _sweep(base, keyed_overrides, seeds, workers, keys, done=None, on_cell=None):
    """Run every (overrides, seed) pair not already in ``done``."""
    done = dict(done or {})
    jobs, labels = [], []
    for label, over in keyed_overrides:
        for s in seeds:
            ident = (*label, s)
            if ident in done:
                continue
            jobs.append(base.replace(seed=s, **over))
            labels.append(ident)
    for ident, val in zip(labels, iter_cells(jobs, workers)):
        done[ident] = val
        if on_cell is not None:
            on_cell(ident, val)
    cells = []
    for label, _ in keyed_overrides:
        for s in seeds:
            rec = dict(zip(keys, label))
            rec["seed"] = s
            rec["rmse"] = done[(*label, s)]
            cells.append(rec)
    return SweepResult(tuple(keys), cells)


def _seeds(base, seeds):
    if seeds is None:
        return [base.seed]
    if isinstance(seeds, int):
        return list(range(base.seed, base.seed + seeds))
    return list(seeds)


def window_sweep(base: TwinExperimentConfig, windows, filters=None, seeds=None, workers=1,
                 inflation=None, **kw):
    """Summary RMSE per (filter, window).

    ``inflation`` may map filter names to ``(delta, mu)`` or be a callable
    ``(filter, window) -> (delta, mu)``; by default the base values are used.
    """
    filters = list(filters or [base.filter])
    if any(not w > 0 for w in windows):
        raise ConfigError("windows must be positive")
    over = []
    for f in filters:
        for w in windows:
            o = {"filter": f, "window": float(w)}
            if callable(inflation):
                o["delta"], o["mu"] = inflation(f, w)
            elif inflation and f in inflation:
                o["delta"], o["mu"] = inflation[f]
            over.append(((f, float(w)), o))
    return _sweep(base, over, _seeds(base, seeds), workers, ("filter", "window"), **kw)


def inflation_sweep(base: TwinExperimentConfig, deltas, mus, seeds=None, workers=1, **kw):
    over = [((float(d), float(m)), {"delta": float(d), "mu": float(m)}) for d in deltas for m in mus]
    return _sweep(base, over, _seeds(base, seeds), workers, ("delta", "mu"), **kw)


def inflation_matrix(result: SweepResult, deltas, mus):
    M = np.empty((len(deltas), len(mus)))
    for i, d in enumerate(deltas):
        for j, m in enumerate(mus):
            M[i, j] = result.value(delta=float(d), mu=float(m))
    return M


def density_layout(base: TwinExperimentConfig, count):
    """Observed indices for ``count`` sensors.

    On the 3-variable models the first ``count`` variables are observed. On
    the ring, ``count`` sites spread evenly around it observe their x1.
    """
    if count < 0:
        raise ConfigError("sensor count must be nonnegative")
    if base.model != "ring":
        if count > 3:
            raise ConfigError("a 3-variable model has at most 3 observable variables")
        return tuple(range(count))
    if count > base.n_sites:
        raise ConfigError(f"{count} sensors exceed {base.n_sites} ring sites")
    return tuple(3 * ((j * base.n_sites) // count) for j in range(count))


def observation_density_sweep(base: TwinExperimentConfig, sensor_counts, seeds=None, workers=1, **kw):
    over = [((int(c),), {"observed": density_layout(base, int(c))}) for c in sensor_counts]
    return _sweep(base, over, _seeds(base, seeds), workers, ("sensors",), **kw)


# --------------------------------------------------------------------------
# ensemble spread


def ensemble_spread_diagnostics(run: RunResult, bins=41):
    """Histogram and normality summary of member-minus-analysis values."""
    if run.spread is None:
        raise ValueError("run has no stored ensemble spread (ensemble filter with store_ensembles=True)")
    x = run.spread[run.scored].ravel()
    if np.all(x == 0):
        edges = np.array([-0.5, 0.5])
        return {"counts": np.array([x.size]), "edges": edges, "skewness": 0.0,
                "excess_kurtosis": 0.0, "n": int(x.size), "sd": 0.0}
    counts, edges = np.histogram(x, bins=bins)
    return {
        "counts": counts,
        "edges": edges,
        "skewness": float(stats.skew(x)),
        "excess_kurtosis": float(stats.kurtosis(x)),
        "n": int(x.size),
        "sd": float(x.std()),
    }


def is_unimodal(counts, tol=0.1):
    """True if the histogram rises then falls, ignoring dips under ``tol`` of the peak."""
    c = np.asarray(counts, dtype=float)
    peak = int(np.argmax(c))
    slack = tol * c[peak]
    left = np.maximum.accumulate(c[: peak + 1])
    right = np.maximum.accumulate(c[peak:][::-1])[::-1]
    return bool(np.all(left - c[: peak + 1] <= slack) and np.all(right - c[peak:] <= slack))
