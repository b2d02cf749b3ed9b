"""Differentiable, provably monotone bias adjustment for gridded daily
precipitation, with quantile-mapping baselines and an extremes/spatial/trend
evaluation suite."""

__version__ = "0.1.0"
