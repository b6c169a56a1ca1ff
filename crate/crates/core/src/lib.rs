//! Insight-discovery agent environment over a synthetic retail warehouse.

pub mod catalog;
pub mod cli;
pub mod dsl;
pub mod episode;
pub mod eval;
pub mod numerals;
pub mod reward;
pub mod rl;
pub mod state;
pub mod step;
pub mod warehouse;
