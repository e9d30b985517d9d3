//! HDGL: hierarchical dynamic graph representation learning.
//!
//! The pipeline runs in two levels. Level one turns each subject's ROI time
//! series into a sequence of windowed brain graphs ([`dynfc`]), attaches
//! GRU-derived node features ([`features`]) and learns a spatial/temporal
//! embedding per subject ([`encoder`]). Level two connects subjects in a
//! population graph weighted by phenotype and embedding similarity
//! ([`popgraph`]) and classifies its nodes with a graph transformer
//! ([`classifier`]). Four training regimes tie the levels together
//! ([`training`]), and [`metrics`] covers evaluation and biomarker tallies.

pub mod classifier;
pub mod data;
pub mod dynfc;
pub mod encoder;
pub mod error;
pub mod features;
pub mod metrics;
pub mod popgraph;
pub mod training;

pub use error::{Error, Result};
