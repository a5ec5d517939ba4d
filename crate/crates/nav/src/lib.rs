//! Navigation harness.
