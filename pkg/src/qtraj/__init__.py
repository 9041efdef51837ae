"""qtraj: continuous measurement, quantum trajectories and feedback control.

Subpackages:

* hilbert   -- states, operators, tensor-product spaces
* sme       -- stochastic master equation integrators and ensembles
* models    -- circuit-QED system builders (dispersive readout, JPA, ...)
* feedback  -- feedback laws, protocol runners
* analysis  -- Bloch vectors, Wigner functions, fidelities, fits
* cli       -- the qtraj command-line entry point
"""

__version__ = "0.1.0"

from . import analysis, cli, errors, feedback, hilbert, models, sme

__all__ = ["analysis", "cli", "errors", "feedback", "hilbert", "models",
           "sme", "__version__"]
