"""Loop geometry, locality rules and the local ensemble transform filters.

The state of an extended model is stored cell-major: cell ``c`` owns state
indices ``c * vpc ... c * vpc + vpc - 1`` where ``vpc`` is the number of
variables per cell (``n // n_cells``).
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assimilation import AnalysisResult, Ensemble, transform_weights
from .errors import DimensionError
from .models import Lorenz63Params

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class LoopGeometry:
    cell_centers: np.ndarray  # (n_cells, 2 or 3), meters
    slice_index: np.ndarray  # (n_cells,)
    n_slices: int
    loop_radius: float

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.cell_centers, dtype=float))
        s = np.asarray(self.slice_index, dtype=int)
        if c.shape[1] not in (2, 3):
            raise DimensionError("cell centers must be 2-D or 3-D coordinates")
        if s.shape != (c.shape[0],):
            raise DimensionError("one slice index per cell required")
        if self.n_slices < 1 or s.min() < 0 or s.max() >= self.n_slices:
            raise ValueError("slice indices must lie in [0, n_slices)")
        if len(np.unique(s)) != self.n_slices:
            raise ValueError("every slice needs at least one cell")
        if not self.loop_radius > 0:
            raise ValueError("loop radius must be positive")
        c.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "cell_centers", c)
        object.__setattr__(self, "slice_index", s)

    @classmethod
    def ring(cls, n_slices, cells_per_slice=1, loop_radius=0.38, pipe_radius=0.015):
        """Cells laid out around a circle, ``cells_per_slice`` across the pipe.

        Slice ``j`` sits at angle ``2 pi j / n_slices``; inside a slice, cells
        are spread radially from the inner to the outer wall.
        """
        if cells_per_slice < 1:
            raise ValueError("cells_per_slice must be >= 1")
        if cells_per_slice == 1:
            offsets = np.zeros(1)
        else:
            offsets = np.linspace(-pipe_radius, pipe_radius, cells_per_slice + 2)[1:-1]
        centers, slices = [], []
        for j in range(n_slices):
            th = 2 * math.pi * j / n_slices
            for off in offsets:
                r = loop_radius + off
                centers.append((r * math.cos(th), r * math.sin(th)))
                slices.append(j)
        return cls(np.array(centers), np.array(slices), n_slices, loop_radius)

    @property
    def n_cells(self):
        return self.cell_centers.shape[0]

    def cells_in_slice(self, j):
        return np.flatnonzero(self.slice_index == j)

    def slice_center(self, j):
        return self.cell_centers[self.cells_in_slice(j)].mean(axis=0)

    def slice_angle(self, j):
        c = self.slice_center(j)
        return math.atan2(c[1], c[0]) % (2 * math.pi)

    def nearest_cell(self, point):
        p = np.asarray(point, dtype=float)
        return int(np.argmin(np.linalg.norm(self.cell_centers - p, axis=1)))

    def variables_per_cell(self, n):
        if n % self.n_cells:
            raise DimensionError(f"state dimension {n} is not a multiple of {self.n_cells} cells")
        return n // self.n_cells

    def slice_distance(self, a, b):
        d = abs(int(a) - int(b)) % self.n_slices
        return min(d, self.n_slices - d)

    # text table: cell_id x y [z] slice
    def to_table(self):
        dim = self.cell_centers.shape[1]
        cols = ["cell_id", "x", "y"] + (["z"] if dim == 3 else []) + ["slice"]
        out = io.StringIO()
        out.write(f"# loop_radius={self.loop_radius!r} n_slices={self.n_slices}\n")
        out.write(" ".join(cols) + "\n")
        for i, (c, s) in enumerate(zip(self.cell_centers, self.slice_index)):
            out.write(" ".join([str(i), *(repr(float(v)) for v in c), str(int(s))]) + "\n")
        return out.getvalue()

    @classmethod
    def from_table(cls, text):
        meta, rows = {}, []
        header = None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
                continue
            if header is None:
                header = line.split()
                continue
            parts = line.split()
            if len(parts) != len(header):
                raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(parts)}")
            rows.append(parts)
        if header is None or not rows:
            raise ValueError("geometry table has no cells")
        ids = [int(r[0]) for r in rows]
        if ids != list(range(len(rows))):
            raise ValueError("cell ids must be 0..n-1 in order")
        centers = np.array([[float(v) for v in r[1:-1]] for r in rows])
        slices = np.array([int(r[-1]) for r in rows])
        n_slices = int(meta.get("n_slices", slices.max() + 1))
        radius = float(meta["loop_radius"]) if "loop_radius" in meta else float(
            np.linalg.norm(centers, axis=1).mean())
        return cls(centers, slices, n_slices, radius)

    def write(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_table())

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_table(fh.read())


@dataclass(frozen=True)
class LocalityScheme:
    kind: str = "radius"
    r_slice: int = 0
    r_meters: Optional[float] = None

    def __post_init__(self):
        if self.kind == "slice":
            if int(self.r_slice) != self.r_slice or self.r_slice < 0:
                raise ValueError("r_slice must be a nonnegative integer")
        elif self.kind == "radius":
            if self.r_meters is None or not self.r_meters > 0:
                raise ValueError("radius locality needs r_meters > 0")
        else:
            raise ValueError(f"unknown locality kind {self.kind!r}")

    @classmethod
    def slices(cls, r):
        return cls("slice", r_slice=r)

    @classmethod
    def radius(cls, r):
        return cls("radius", r_meters=r)


@dataclass(frozen=True)
class LocalRegion:
    center_cell: int
    member_cells: frozenset
    obs_indices: tuple


def slice_neighbors(geom: LoopGeometry, slice_i, r_slice):
    """Cells whose slice is within ``r_slice`` of ``slice_i`` around the closed loop."""
    if not 0 <= slice_i < geom.n_slices:
        raise ValueError(f"slice {slice_i} out of range")
    if r_slice < 0:
        raise ValueError("r_slice must be nonnegative")
    if 2 * r_slice >= geom.n_slices:
        log.info("slice radius %d covers the whole loop of %d slices", r_slice, geom.n_slices)
    d = np.abs(geom.slice_index - slice_i) % geom.n_slices
    d = np.minimum(d, geom.n_slices - d)
    return frozenset(np.flatnonzero(d <= r_slice).tolist())


def radius_neighbors(geom: LoopGeometry, cell, r_meters):
    """Cells whose center is strictly closer than ``r_meters``."""
    if not r_meters > 0:
        raise ValueError("r_meters must be positive")
    d = np.linalg.norm(geom.cell_centers - geom.cell_centers[cell], axis=1)
    return frozenset(np.flatnonzero(d < r_meters).tolist())


def neighbors(geom: LoopGeometry, cell, scheme: LocalityScheme):
    if scheme.kind == "slice":
        return slice_neighbors(geom, int(geom.slice_index[cell]), scheme.r_slice)
    return radius_neighbors(geom, cell, scheme.r_meters)


def local_obs_mask(geom: LoopGeometry, scheme: LocalityScheme, obs_locations):
    """Boolean ``(n_cells, m)`` matrix: observation ``j`` is local to cell ``i``.

    An observation is placed with the same predicate as cells: in slice mode
    it belongs to the slice of its nearest cell, in radius mode its own
    coordinates are measured against the cell center.
    """
    locs = np.atleast_2d(np.asarray(obs_locations, dtype=float))
    m = locs.shape[0] if np.size(obs_locations) else 0
    if m == 0:
        return np.zeros((geom.n_cells, 0), dtype=bool)
    if locs.shape[1] != geom.cell_centers.shape[1]:
        raise DimensionError("observation locations and cell centers differ in dimension")
    if scheme.kind == "radius":
        d = np.linalg.norm(geom.cell_centers[:, None, :] - locs[None, :, :], axis=2)
        return d < scheme.r_meters
    obs_slice = np.array([geom.slice_index[geom.nearest_cell(p)] for p in locs])
    d = np.abs(geom.slice_index[:, None] - obs_slice[None, :]) % geom.n_slices
    d = np.minimum(d, geom.n_slices - d)
    return d <= scheme.r_slice


def local_regions(geom, scheme, obs_locations):
    mask = local_obs_mask(geom, scheme, obs_locations)
    return [
        LocalRegion(c, neighbors(geom, c, scheme), tuple(np.flatnonzero(mask[c]).tolist()))
        for c in range(geom.n_cells)
    ]


# --------------------------------------------------------------------------
# LETKF


def _diag_variances(R, m):
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        var = R
    else:
        R = np.atleast_2d(R)
        if R.shape != (m, m):
            raise DimensionError(f"R is {R.shape}, expected {(m, m)}")
        off = R - np.diag(np.diag(R))
        if np.any(off != 0):
            raise ValueError("localized analysis requires a diagonal R")
        var = np.diag(R)
    if var.shape != (m,):
        raise DimensionError("one error variance per observation required")
    return var


def _local_transform(members_b, x_mean, Xb, Yb, d, r_var, mask, vpc, rho):
    """Steps 3-9: per-cell weights, local members, global assembly."""
    n_cells = mask.shape[0]
    k = Xb.shape[1]
    out = np.empty((k, x_mean.shape[0]))
    cache = {}
    empty = []
    for c in range(n_cells):
        sl = slice(c * vpc, (c + 1) * vpc)
        idx = np.flatnonzero(mask[c])
        if idx.size == 0:
            empty.append(c)
            W = np.sqrt(rho) * np.eye(k) if rho != 1 else None
        else:
            key = idx.tobytes()
            if key not in cache:
                w_mean, W_a, _ = transform_weights(Yb[idx], r_var[idx], d[idx], rho)
                cache[key] = W_a + w_mean[:, None]
            W = cache[key]
        if W is None:
            out[:, sl] = members_b[:, sl]
        else:
            out[:, sl] = (x_mean[sl, None] + Xb[sl] @ W).T
    return out, {"cells_without_obs": empty, "distinct_local_sets": len(cache)}


def letkf_analysis(ens: Ensemble, obs, geom: LoopGeometry, scheme: LocalityScheme, rho=1.0):
    """Local ensemble transform Kalman filter.

    ``obs`` needs ``values``, ``H`` (``m x n``), ``variances`` (or ``R``) and
    ``locations``. Each cell is analysed with the observations local to it;
    a cell without local observations keeps its background.
    """
    if rho < 1:
        raise ValueError("inflation factor rho must be >= 1")
    n = ens.n
    vpc = geom.variables_per_cell(n)
    y = np.atleast_1d(np.asarray(obs.values, dtype=float))
    m = y.shape[0]
    x_mean = ens.mean()
    Xb = ens.perturbations()
    if m == 0:
        members = ens.members.copy() if rho == 1 else x_mean + np.sqrt(rho) * Xb.T
        return AnalysisResult(x_mean.copy(), y, 0.0, analysis_ensemble=Ensemble(members),
                              diagnostics={"cells_without_obs": list(range(geom.n_cells))})
    H = np.atleast_2d(np.asarray(obs.H, dtype=float))
    if H.shape != (m, n):
        raise DimensionError(f"H is {H.shape}, expected {(m, n)}")
    r_var = _diag_variances(_obs_error(obs), m)
    # steps 1-2: members in observation space, global perturbations
    Yb_members = ens.members @ H.T
    y_mean = Yb_members.mean(axis=0)
    Yb = (Yb_members - y_mean).T
    mask = local_obs_mask(geom, scheme, obs.locations)
    members, diag = _local_transform(ens.members, x_mean, Xb, Yb, y - y_mean, r_var, mask, vpc, rho)
    x_a = members.mean(axis=0)
    return AnalysisResult(x_a, y - H @ x_mean, float(np.linalg.norm(x_a - x_mean)),
                          analysis_ensemble=Ensemble(members), diagnostics=diag)


def _obs_error(obs):
    v = getattr(obs, "variances", None)
    return v if v is not None else obs.R


def _trajectory_stack(ens_trajectories):
    """Return ``(times, states)`` with ``states`` of shape ``(T, k, n)``."""
    if isinstance(ens_trajectories, tuple) and len(ens_trajectories) == 2:
        times, states = ens_trajectories
        return np.asarray(times, dtype=float), np.asarray(states, dtype=float)
    trajs = list(ens_trajectories)
    times = np.asarray(trajs[0].times, dtype=float)
    for t in trajs[1:]:
        if len(t.times) != len(times) or np.any(t.times != times):
            raise ValueError("member trajectories must share time stamps")
    return times, np.stack([t.states for t in trajs], axis=1)


def letkf4d_analysis(ens_trajectories, timed_obs, geom: LoopGeometry, scheme: LocalityScheme,
                     rho=1.0, analysis_time="start"):
    """4D-LETKF: observations spread over the window, stacked into one local update.

    ``ens_trajectories`` is a sequence of per-member :class:`Trajectory`
    objects or a ``(times, states[T, k, n])`` pair. Each observation is
    matched to the nearest stamp within half a step. The weights are applied
    to the ensemble at the window start (default) or end.
    """
    if rho < 1:
        raise ValueError("inflation factor rho must be >= 1")
    times, states = _trajectory_stack(ens_trajectories)
    T, k, n = states.shape
    if k < 2:
        raise ValueError("an ensemble needs at least 2 members")
    ia = {"start": 0, "end": T - 1}.get(analysis_time, analysis_time)
    ens = Ensemble(states[ia])
    y = np.atleast_1d(np.asarray(timed_obs.values, dtype=float))
    m = y.shape[0]
    if m == 0:
        return letkf_analysis(ens, timed_obs, geom, scheme, rho)
    H = np.atleast_2d(np.asarray(timed_obs.H, dtype=float))
    if H.shape != (m, n):
        raise DimensionError(f"H is {H.shape}, expected {(m, n)}")
    r_var = _diag_variances(_obs_error(timed_obs), m)
    half = 0.5 * (times[1] - times[0]) if T > 1 else 0.0
    obs_t = np.asarray(timed_obs.times, dtype=float)
    if np.any(obs_t < times[0] - half) or np.any(obs_t > times[-1] + half):
        raise ValueError("observation time outside the assimilation window")
    stamp = np.array([int(np.argmin(np.abs(times - t))) for t in obs_t])
    # (y_b)_tau for every stacked row: row j uses member states at its own stamp
    Yb_members = np.einsum("jn,jkn->kj", H, states[stamp])
    y_mean = Yb_members.mean(axis=0)
    Yb = (Yb_members - y_mean).T
    x_mean = ens.mean()
    Xb = ens.perturbations()
    mask = local_obs_mask(geom, scheme, timed_obs.locations)
    vpc = geom.variables_per_cell(n)
    members, diag = _local_transform(ens.members, x_mean, Xb, Yb, y - y_mean, r_var, mask, vpc, rho)
    diag["analysis_index"] = ia
    x_a = members.mean(axis=0)
    return AnalysisResult(x_a, y - y_mean, float(np.linalg.norm(x_a - x_mean)),
                          analysis_ensemble=Ensemble(members), diagnostics=diag)


# --------------------------------------------------------------------------
# ring test model


@dataclass(frozen=True)
class RingTestModel:
    """Independent Lorenz 63 sites on a circle, one cell per site."""

    n_sites: int
    site_params: Sequence[Lorenz63Params] = field(default=())
    ring_radius: float = 1.0

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be positive")
        params = tuple(self.site_params) or (Lorenz63Params(),) * self.n_sites
        if len(params) != self.n_sites:
            raise ValueError("one parameter set per site required")
        object.__setattr__(self, "site_params", params)

    @property
    def dim(self):
        return 3 * self.n_sites

    @property
    def params(self):
        return list(self.site_params)

    @property
    def spacing(self):
        return 2 * self.ring_radius * math.sin(math.pi / self.n_sites) if self.n_sites > 1 else math.inf

    def geometry(self):
        return LoopGeometry.ring(self.n_sites, 1, loop_radius=self.ring_radius)

    def site_slice(self, i):
        return slice(3 * i, 3 * i + 3)
