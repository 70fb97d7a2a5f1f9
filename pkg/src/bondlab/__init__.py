"""bondlab: a numerical laboratory for bond-market curve dynamics.

Discount curves live in a Sobolev-type state space on the maturity
half-line; the simulator evolves whole-curve ensembles in the moving frame,
and the higher layers replicate claims (hedging), build utility-optimal
portfolios (optimizer), and cross-check against a reduced dynamic-
programming PDE (hjb). See README for the module map and the CLI.
"""

from . import (
    curve_space,
    dynamics,
    errors,
    hedging,
    hjb,
    kernels,
    market_model,
    optimizer,
    portfolio,
    utility,
)

__version__ = "0.1.0"

__all__ = [
    "curve_space",
    "market_model",
    "dynamics",
    "portfolio",
    "hedging",
    "utility",
    "optimizer",
    "hjb",
    "kernels",
    "errors",
    "__version__",
]
