"""Multiple imputation for clustered mixed-type data with a Gaussian copula."""

__version__ = "0.1.0"
