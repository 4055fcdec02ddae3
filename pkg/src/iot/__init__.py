"""Learning conditional distributions from a mix of paired and unpaired
samples by inverse entropic optimal transport.

Two solvers share one likelihood objective: a closed-form Gaussian-mixture
parametrization with exact normalization, sampling and gradients, and a
fully neural energy-based variant trained with Langevin dynamics.
"""

__version__ = "0.1.0"
