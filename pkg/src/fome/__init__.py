"""Desk-scale EEG foundation model with temporal-lateral attention scaling.

Submodules are loaded lazily so the CLI can pin thread-count environment
variables before numpy initializes its BLAS backend.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "errors",
    "model",
    "numerics",
    "preprocess",
    "rng",
    "signal_store",
    "spectral",
    "trainer",
)


def __getattr__(name: str):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
