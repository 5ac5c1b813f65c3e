//! Radar point cloud domain translation with pillar-based generation.
//!
//! A source radar cloud is binned into a pillar grid, encoded into a BEV
//! pseudo-image and passed through a convolutional backbone. An occupancy
//! head predicts which pillars should hold points, their mean attributes and
//! how many points each emits; a generation head then places that many
//! attributed points per pillar. Training, metrics, a synthetic paired-scene
//! generator and file formats are included.

pub mod backbone;
pub mod config;
pub mod error;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod opp;
pub mod parallel;
pub mod plot;
pub mod ppg;
pub mod rng;
pub mod synth;
pub mod train;
pub mod types;

pub use config::{Config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use grid::{GridConfig, PillarIndex};
pub use metrics::{AttributedPoint2D, MetricReport};
pub use model::PillarGen;
pub use synth::SceneSpec;
pub use train::Phase;
pub use types::{GeneratedPoint, PointCloud, RadarPoint, SceneGeneration, ScenePair};
