//! Answer projection, commitment trajectories and readout analysis for
//! reasoning traces.

pub mod backend;
pub mod conditions;
pub mod generate;
pub mod parser;
pub mod projection;
pub mod scheme;
pub mod stats;
pub mod synthetic;
pub mod toy;
pub mod trace;
pub mod trace_io;
pub mod sanity;
pub mod bootstrap;
pub mod commitment;
pub mod online;
pub mod summary;
pub mod readout;
pub mod report;
pub mod factor;
