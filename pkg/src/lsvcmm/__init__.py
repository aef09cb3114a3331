"""Sparse time-varying coefficients for longitudinal data with a working covariance."""
