//! Experiment harness around `blockbp-core`: JSON-configured drivers
//! producing deterministic CSV/JSON reports, plus plain-text formats for
//! graphs and label partitions.
//!
//! Reports are byte-for-byte reproducible from the `(config, seed)` pair.
//! Every asserted row carries its target and the target's provenance; a
//! run passes when no asserted row fails.

pub mod config;
pub mod experiments;
pub mod graph_io;
pub mod report;
