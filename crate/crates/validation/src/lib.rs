//! Holds the end-to-end acceptance suite (`tests/acceptance.rs`); there is no library code.
