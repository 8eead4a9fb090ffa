"""Multi-chart degenerate normalizing flows with Riemannian geometry tooling."""

__version__ = "0.1.0"
