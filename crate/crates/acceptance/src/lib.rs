//! Acceptance gate; the checks live in `tests/acceptance.rs`.
