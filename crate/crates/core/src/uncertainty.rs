//! Uncertainty estimation.
