"""Reference parameter tables shipped as fixtures.

Inflation tables map window length in seconds to ``(additive mu,
multiplicative delta)`` found best by earlier tuning runs on Lorenz 63.
They document where those runs landed; nothing here is asserted against.
"""
from __future__ import annotations

from .models import Lorenz63Params

WINDOWS_SECONDS = tuple(range(30, 601, 30))


def _table(pairs):
    return dict(zip(WINDOWS_SECONDS, pairs))


INFLATION = {
    "enkf": _table([
        (0.10, 0.00), (0.20, 0.00), (0.40, 0.00), (0.30, 0.00), (0.70, 0.00),
        (0.70, 0.00), (1.00, 0.00), (1.00, 0.00), (0.90, 0.00), (1.00, 0.00),
        (1.00, 0.00), (0.80, 0.00), (0.30, 0.00), (0.40, 0.00), (1.40, 0.10),
        (1.10, 0.00), (0.70, 0.10), (1.50, 1.40), (1.40, 1.20), (1.50, 0.70),
    ]),
    "ekf": _table([
        (0.10, 0.00), (0.00, 1.50), (0.00, 1.50), (0.00, 1.50), (0.00, 1.50),
        (0.20, 1.50), (0.60, 1.50), (0.80, 1.50), (0.90, 1.50), (1.30, 0.60),
        (0.50, 0.70), (0.50, 0.90), (0.90, 0.40), (0.60, 0.30), (0.80, 0.10),
        (0.60, 0.40), (0.20, 0.30), (0.00, 0.40), (0.00, 0.30), (1.20, 0.20),
    ]),
    "ensrf": _table([
        (0.00, 0.00), (1.50, 0.80), (1.40, 0.40), (1.50, 0.90), (0.10, 1.30),
        (0.00, 0.80), (0.10, 1.30), (0.00, 1.50), (0.00, 1.40), (0.80, 1.50),
        (1.20, 0.50), (1.40, 1.00), (1.40, 1.30), (1.50, 1.30), (1.50, 1.40),
        (1.50, 0.30), (0.00, 1.40), (0.00, 1.40), (0.00, 1.00), (0.00, 0.80),
    ]),
    "etkf": _table([
        (0.10, 0.00), (0.20, 0.00), (0.30, 0.00), (0.30, 0.00), (0.20, 0.00),
        (0.20, 0.00), (0.50, 0.00), (0.50, 0.00), (0.50, 0.00), (0.20, 0.00),
        (0.40, 0.10), (0.20, 0.10), (0.20, 0.10), (0.60, 0.10), (1.50, 0.20),
        (1.20, 0.40), (0.30, 0.10), (0.90, 0.50), (1.50, 0.40), (1.50, 0.30),
    ]),
}

# water at 300 K
WATER = {
    "rayleigh_range": (1.5e6, 4e7),
    "reynolds": 416.0,
    "g": 9.8,
    "c_p": 4187.0,  # J/(kg K)
    "beta_thermal": 0.303e-3,  # 1/K
    "rho_ref": 995.65,  # kg/m^3
    "kinematic_viscosity": 0.801e-6,  # m^2/s
    "dynamic_viscosity": 0.798,
    "prandtl": 5.43,
    "boussinesq_condition": 7.6e-6,
}

LORENZ63 = Lorenz63Params(sigma=10.0, rho=28.0, beta=8.0 / 3.0)

# the thermosyphon experiment's sensor counts and averaging radius (m)
SENSOR_COUNTS = (2, 4, 8, 16, 32)
SENSOR_RADIUS = 0.005


def tuned_inflation(filter_name, window_seconds):
    """``(mu, delta)`` for the tabulated window nearest ``window_seconds``."""
    table = INFLATION[filter_name]
    key = min(table, key=lambda w: (abs(w - window_seconds), w))
    return table[key]
