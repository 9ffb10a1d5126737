"""Observation operators, sensor placement, synthetic data and variable scaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError
from .localization import LoopGeometry
from .models import Trajectory

PLACEMENTS = ("evenly_spaced", "slice_centered", "staggered")


@dataclass(frozen=True)
class ObservationOperatorSpec:
    """Linear map from model space to sensor readings.

    ``select_indices`` picks state entries directly. ``neighborhood_average``
    averages ``variable`` over all cells strictly within ``radius`` of each
    location, which needs a geometry.
    """

    kind: str = "select_indices"
    indices: tuple = ()
    locations: Optional[np.ndarray] = None
    radius: Optional[float] = None
    variable: int = 0
    variables_per_cell: int = 1

    def __post_init__(self):
        if self.kind not in ("select_indices", "neighborhood_average"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.locations is not None:
            object.__setattr__(self, "locations", np.atleast_2d(np.asarray(self.locations, dtype=float)))
        if self.kind == "neighborhood_average":
            if self.locations is None:
                raise ValueError("neighborhood_average needs locations")
            if self.radius is None or not self.radius > 0:
                raise ValueError("neighborhood_average needs radius > 0")
        if not 0 <= self.variable < self.variables_per_cell:
            raise ValueError("variable index outside the per-cell layout")

    @property
    def n_sensors(self):
        return len(self.indices) if self.kind == "select_indices" else len(self.locations)

    def materialize(self, geom_or_n):
        return materialize_operator(self, geom_or_n)

    def sensor_locations(self, geom: Optional[LoopGeometry] = None):
        if self.locations is not None:
            return self.locations
        if geom is None:
            return None
        cells = [i // self.variables_per_cell for i in self.indices]
        return geom.cell_centers[cells]


def materialize_operator(spec: ObservationOperatorSpec, geom_or_n):
    """``m x n`` matrix for ``spec``; pass a geometry or a state dimension."""
    if isinstance(geom_or_n, LoopGeometry):
        geom = geom_or_n
        n = geom.n_cells * spec.variables_per_cell
    else:
        geom, n = None, int(geom_or_n)
    if spec.kind == "select_indices":
        H = np.zeros((len(spec.indices), n))
        for row, i in enumerate(spec.indices):
            if not 0 <= i < n:
                raise DimensionError(f"observed index {i} outside state of size {n}")
            H[row, i] = 1.0
        return H
    if geom is None:
        raise ValueError("neighborhood_average needs a geometry")
    H = np.zeros((len(spec.locations), n))
    for row, p in enumerate(spec.locations):
        d = np.linalg.norm(geom.cell_centers - p, axis=1)
        cells = np.flatnonzero(d < spec.radius)
        if cells.size == 0:
            raise ValueError(f"no cells within {spec.radius} m of sensor {row}")
        H[row, cells * spec.variables_per_cell + spec.variable] = 1.0 / cells.size
    return H


@dataclass(frozen=True)
class SensorNetwork:
    n_sensors: int
    placement: str = "evenly_spaced"
    averaging_radius: Optional[float] = 0.005
    variable: int = 0

    def __post_init__(self):
        if self.n_sensors < 1:
            raise ValueError("a network needs at least one sensor")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")

    def operator(self, geom: LoopGeometry, variables_per_cell=1):
        return place_sensors(geom, self.n_sensors, self.placement, self.averaging_radius,
                             self.variable, variables_per_cell)


def _spread_slices(n_slices, n_sensors):
    return [(j * n_slices) // n_sensors for j in range(n_sensors)]


def _radial_order(geom, cells):
    r = np.linalg.norm(geom.cell_centers[cells], axis=1)
    return cells[np.argsort(r, kind="stable")]


def place_sensors(geom: LoopGeometry, n_sensors, placement="evenly_spaced", averaging_radius=None,
                  variable=0, variables_per_cell=1):
    """Deterministic sensor layout on a loop.

    ``evenly_spaced`` puts sensor ``j`` at angle ``2 pi j / n`` and snaps it
    to the nearest slice center. ``slice_centered`` uses the middle cell of
    maximally separated slices. ``staggered`` uses the same slices but
    alternates between the innermost and outermost cell.

    With ``averaging_radius`` the operator averages around each sensor;
    otherwise it reads the chosen cell directly.
    """
    if n_sensors < 1:
        raise ValueError("n_sensors must be >= 1")
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}")
    if n_sensors > geom.n_slices:
        raise ValueError(f"{n_sensors} sensors exceed {geom.n_slices} slices")
    if placement == "evenly_spaced":
        angles = np.array([geom.slice_angle(j) for j in range(geom.n_slices)])
        cells, locs = [], []
        for j in range(n_sensors):
            th = 2 * math.pi * j / n_sensors
            gap = np.abs((angles - th + math.pi) % (2 * math.pi) - math.pi)
            s = int(np.argmin(gap))
            members = _radial_order(geom, geom.cells_in_slice(s))
            cells.append(int(members[len(members) // 2]))
            locs.append(geom.slice_center(s))
    else:
        cells, locs = [], []
        for j, s in enumerate(_spread_slices(geom.n_slices, n_sensors)):
            members = _radial_order(geom, geom.cells_in_slice(s))
            if placement == "slice_centered":
                c = members[len(members) // 2]
            else:
                c = members[0] if j % 2 == 0 else members[-1]
            cells.append(int(c))
            locs.append(geom.cell_centers[c] if placement == "staggered" else geom.slice_center(s))
    locs = np.array(locs)
    if averaging_radius:
        return ObservationOperatorSpec("neighborhood_average", locations=locs, radius=averaging_radius,
                                       variable=variable, variables_per_cell=variables_per_cell)
    return ObservationOperatorSpec("select_indices",
                                   indices=[c * variables_per_cell + variable for c in cells],
                                   locations=locs, variable=variable,
                                   variables_per_cell=variables_per_cell)


@dataclass
class ObservationSet:
    """Observed values with their times, error variances and sensor rows.

    ``operator`` has one row per sensor; the row used for value ``j`` is
    ``operator[sensor_ids[j]]``, exposed as :attr:`H`.
    """

    values: np.ndarray
    times: np.ndarray
    variances: np.ndarray
    sensor_ids: np.ndarray
    operator: Optional[np.ndarray] = None
    locations: Optional[np.ndarray] = None
    spec: Optional[ObservationOperatorSpec] = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        m = self.values.shape[0]
        self.times = np.broadcast_to(np.asarray(self.times, dtype=float), (m,)).copy()
        self.variances = np.broadcast_to(np.asarray(self.variances, dtype=float), (m,)).copy()
        self.sensor_ids = np.broadcast_to(np.asarray(self.sensor_ids, dtype=int), (m,)).copy()
        # zero is allowed so that noise-free synthetic sets record R exactly;
        # the filters reject a singular R themselves
        if np.any(self.variances < 0) or not np.all(np.isfinite(self.variances)):
            raise ValueError("observation error variances must be finite and nonnegative")
        if self.locations is not None:
            locs = np.asarray(self.locations, dtype=float)
            self.locations = locs.reshape(m, locs.shape[-1] if locs.ndim == 2 else -1)
        if self.operator is not None:
            self.operator = np.atleast_2d(np.asarray(self.operator, dtype=float))
            if m and self.sensor_ids.max() >= self.operator.shape[0]:
                raise DimensionError("sensor id outside the operator rows")

    def __len__(self):
        return self.values.shape[0]

    @property
    def R(self):
        return np.diag(self.variances)

    @property
    def H(self):
        if self.operator is None:
            raise ValueError("observation set has no operator")
        return self.operator[self.sensor_ids]

    def subset(self, mask):
        mask = np.asarray(mask)
        return ObservationSet(self.values[mask], self.times[mask], self.variances[mask],
                              self.sensor_ids[mask], self.operator,
                              None if self.locations is None else self.locations[mask], self.spec)

    def at_time(self, t, tol=1e-9):
        return self.subset(np.abs(self.times - t) <= tol)

    def between(self, t0, t1, tol=1e-9):
        """Observations with ``t0 < time <= t1``."""
        return self.subset((self.times > t0 + tol) & (self.times <= t1 + tol))

    def unique_times(self):
        return np.unique(self.times)

    # delimited text: time, sensor_id, value, variance, x, y(, z)
    def to_csv(self, path):
        dim = 0 if self.locations is None else self.locations.shape[1]
        header = ["time", "sensor_id", "value", "variance"] + ["x", "y", "z"][:dim]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for j in range(len(self)):
                row = [repr(float(self.times[j])), int(self.sensor_ids[j]),
                       repr(float(self.values[j])), repr(float(self.variances[j]))]
                if dim:
                    row += [repr(float(v)) for v in self.locations[j]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, operator=None, spec=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:4] != ["time", "sensor_id", "value", "variance"]:
            raise ValueError(f"{path}: not an observation table")
        body = rows[1:]
        dim = len(rows[0]) - 4
        for lineno, r in enumerate(body, 2):
            if len(r) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} fields")
        col = list(zip(*body)) if body else [()] * len(rows[0])
        locs = np.array([[float(v) for v in r[4:]] for r in body]) if dim else None
        return cls(
            values=np.array(col[2], dtype=float),
            times=np.array(col[0], dtype=float),
            variances=np.array(col[3], dtype=float),
            sensor_ids=np.array(col[1], dtype=int),
            operator=operator,
            locations=locs,
            spec=spec,
        )


def _stamp_indices(stamps, times):
    """Nearest stamp for each time, rejecting matches further than half a step."""
    stamps = np.asarray(stamps, dtype=float)
    i = np.clip(np.searchsorted(stamps, times), 1, len(stamps) - 1)
    left = stamps[i - 1]
    i = np.where(np.abs(times - left) <= np.abs(stamps[i] - times), i - 1, i)
    half = 0.5 * (stamps[1] - stamps[0])
    if np.any(np.abs(stamps[i] - times) > half * (1 + 1e-9) + 1e-12):
        raise ValueError("sample time does not fall on the trajectory")
    return i


def generate_synthetic_obs(truth: Trajectory, operator, noise_variance, window, rng,
                           geom: Optional[LoopGeometry] = None):
    """Sample ``truth`` at every window end, apply the operator and add noise.

    ``operator`` may be an :class:`ObservationOperatorSpec`, a
    :class:`SensorNetwork` (needs ``geom``) or a plain ``m x n`` matrix.
    The noise is independent ``N(0, noise_variance)`` per value.
    """
    if noise_variance < 0:
        raise ValueError("noise variance must be nonnegative")
    if not window > 0:
        raise ValueError("window must be positive")
    t0, t_end = float(truth.times[0]), float(truth.times[-1])
    n_win = int(math.floor((t_end - t0) / window + 1e-9))
    if n_win < 1:
        raise ValueError(f"window {window} exceeds the trajectory span {t_end - t0}")
    n = truth.states.shape[1]
    spec = None
    if isinstance(operator, SensorNetwork):
        if geom is None:
            raise ValueError("a sensor network needs a geometry")
        operator = operator.operator(geom, geom.variables_per_cell(n))
    if isinstance(operator, ObservationOperatorSpec):
        spec = operator
        H = materialize_operator(spec, geom if geom is not None else n)
        sensor_locs = spec.sensor_locations(geom)
    else:
        H = np.atleast_2d(np.asarray(operator, dtype=float))
        sensor_locs = None
    if H.shape[1] != n:
        raise DimensionError(f"operator has {H.shape[1]} columns, state has {n}")
    p = H.shape[0]
    times = t0 + window * np.arange(1, n_win + 1)
    idx = _stamp_indices(truth.times, times)
    clean = truth.states[idx] @ H.T  # (n_win, p)
    sd = math.sqrt(noise_variance)
    noise = sd * rng.standard_normal(clean.shape) if sd > 0 else np.zeros_like(clean)
    locs = None if sensor_locs is None else np.tile(sensor_locs, (n_win, 1))
    return ObservationSet(
        values=(clean + noise).ravel(),
        times=np.repeat(times, p),
        variances=np.full(n_win * p, float(noise_variance)),
        sensor_ids=np.tile(np.arange(p), n_win),
        operator=H,
        locations=locs,
        spec=spec,
    )


@dataclass(frozen=True)
class ScalingSpec:
    """Per-variable climatological divisors, tiled over cells."""

    divisors: tuple

    def __post_init__(self):
        d = tuple(float(v) for v in np.atleast_1d(self.divisors))
        if not d or any(v == 0 or not math.isfinite(v) for v in d):
            raise ValueError("divisors must be finite and nonzero")
        object.__setattr__(self, "divisors", d)

    def vector(self, n):
        d = np.asarray(self.divisors)
        if n % d.size:
            raise DimensionError(f"{d.size} divisors do not tile a state of size {n}")
        return np.tile(d, n // d.size)


def scale_state(state, spec: ScalingSpec):
    x = np.asarray(state, dtype=float)
    return x / spec.vector(x.shape[-1])


def unscale_state(state, spec: ScalingSpec):
    x = np.asarray(state, dtype=float)
    return x * spec.vector(x.shape[-1])
