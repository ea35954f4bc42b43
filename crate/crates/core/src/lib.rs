//! A transactional package upgrade engine.
//!
//! Dependency resolution is complete (SAT based) and can be steered by
//! lexicographic preferences. Deployment runs inside a copy-before-write
//! journaled transaction over a sandbox root, maintainer scripts are written
//! in a small language whose every step can be compensated, and
//! configuration files are tracked against pristine copies and merged.

pub mod universe;
pub mod resolver;
pub mod preferences;
pub mod txn;
pub mod mscript;
pub mod confmerge;
pub mod planner;
pub mod cli;
