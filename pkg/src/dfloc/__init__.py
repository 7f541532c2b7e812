"""Device-free localization from RSS traces of a static RF mesh.

A person inside a mesh of RF nodes perturbs the received signal strength
of the links crossing their position. This package estimates where they
are from those perturbations: a per-link mixture model with
distance-decaying affected probabilities drives a per-frame maximum
likelihood estimator and a forward-filtered HMM variant, trained without
labeled data and recalibrated continuously while running. Imaging and
fingerprint baselines, a generative trace simulator, and an evaluation
harness round out the toolkit.
"""

__version__ = "0.1.0"

from .config import ScenarioConfig, SiteConfig, SiteRuntime, Tunables
from .errors import (
    ConfigError,
    DflocError,
    InputError,
    InsufficientDataError,
    InvariantError,
    NotCalibratedError,
    PathError,
)

__all__ = [
    "ScenarioConfig",
    "SiteConfig",
    "SiteRuntime",
    "Tunables",
    "ConfigError",
    "DflocError",
    "InputError",
    "InsufficientDataError",
    "InvariantError",
    "NotCalibratedError",
    "PathError",
    "__version__",
]
