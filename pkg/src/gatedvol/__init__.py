"""Arbitrage-aware neural implied-volatility surfaces.

Submodules: ``bs_engine``, ``surface_models``, ``constraints``, ``losses``,
``training``, ``ssvi``, ``data_pipeline``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArbitrageViolationError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    FormatError,
    GatedVolError,
    InsufficientDataError,
    ParseError,
)

__all__ = [
    "ArbitrageViolationError", "ConvergenceError", "DivergenceError", "DomainError", "FormatError",
    "GatedVolError", "InsufficientDataError", "ParseError", "__version__",
]
