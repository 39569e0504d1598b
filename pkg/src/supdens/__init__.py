"""Joint density of a drifted unit diffusion and the running supremum of its
first coordinate: closed-form Brownian baselines, a parametrix Volterra
solver, a bridge-corrected Monte Carlo oracle and weak-PDE verification."""

__version__ = "0.1.0"
