//! Multi-turn response selection with utterance-to-utterance interactive
//! matching.

mod error;

pub mod aggregator;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod export;
pub mod layout;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod run;
pub mod synthetic;
pub mod train;
pub mod wordrep;

pub use error::{Error, Result};
