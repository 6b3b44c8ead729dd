"""polycause: polynomial latent causal models across environments.

Synthetic multi-environment data from polynomial structural equations with
exponential-family noise, a variational estimator for recovering the
latents and their graph, and the metrics used to score both.
"""

__version__ = "0.1.0"
