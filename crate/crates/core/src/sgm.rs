//! Semantic Gaussian Map construction.
