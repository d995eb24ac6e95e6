"""streakfix: adversarial sparse-view CT artifact reduction.

Simulation of paired sparse/dense reconstructions, five GAN training
variants with focus-weighted losses and a feature-pyramid discriminator,
and held-out evaluation with reports.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    InputError,
    NumericsError,
    StartupError,
    StreakfixError,
)

__all__ = [
    "ConfigError",
    "InputError",
    "NumericsError",
    "StartupError",
    "StreakfixError",
    "__version__",
]
