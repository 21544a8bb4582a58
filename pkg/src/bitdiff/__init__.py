"""Discrete diffusion samplers for Boltzmann distributions over binary states.

Subpackages cover energy models with exact enumeration oracles, random graph
generation, the Bernoulli diffusion process, policy networks with built-in
reverse-mode differentiation, three training objectives, unbiased estimators
(importance sampling and neural MCMC), and conditional-expectation decoding.
"""

__version__ = "0.1.0"
