"""bayesrom: probabilistic operator inference for quadratic reduced models.

Learn reduced-order models from snapshot data by Bayesian linear regression,
select the Tikhonov penalties by evidence maximization or an error/stability
search, and propagate operator uncertainty into trajectory credible bands by
Monte Carlo sampling.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    errors,
    euler,
    gpclosure,
    pod,
    regression,
    regselect,
    rom,
    tensorops,
)
