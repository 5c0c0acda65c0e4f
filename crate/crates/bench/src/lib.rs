//! Shared fixtures for the benchmark suite live in the bench targets.
