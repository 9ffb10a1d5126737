"""Twin-experiment data assimilation on Lorenz 63 and thermosyphon loop models."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .assimilation import (
    Ensemble,
    InflationConfig,
    enkf_analysis,
    ekf_analysis,
    ensrf_analysis,
    etkf_analysis,
    oi_analysis,
    scalar_analysis,
    var3d_analysis,
)
from .errors import BlowUpError, ConfigError, DimensionError, LoopDAError, SingularMatrixError
from .experiments import TwinExperimentConfig, climatology, forecast_useless, rmse, run_twin_experiment
from .localization import LocalityScheme, LoopGeometry, letkf4d_analysis, letkf_analysis
from .models import (
    EhrhardMullerParams,
    IntegratorConfig,
    Lorenz63Params,
    advance,
    integrate,
    propagate_tlm,
)
from .observations import ObservationSet, generate_synthetic_obs

__all__ = [
    "__version__",
    "Ensemble",
    "InflationConfig",
    "enkf_analysis",
    "ekf_analysis",
    "ensrf_analysis",
    "etkf_analysis",
    "oi_analysis",
    "scalar_analysis",
    "var3d_analysis",
    "EhrhardMullerParams",
    "IntegratorConfig",
    "Lorenz63Params",
    "advance",
    "integrate",
    "propagate_tlm",
    "BlowUpError",
    "ConfigError",
    "DimensionError",
    "LoopDAError",
    "SingularMatrixError",
    "TwinExperimentConfig",
    "climatology",
    "forecast_useless",
    "rmse",
    "run_twin_experiment",
    "LocalityScheme",
    "LoopGeometry",
    "letkf4d_analysis",
    "letkf_analysis",
    "ObservationSet",
    "generate_synthetic_obs",
]
