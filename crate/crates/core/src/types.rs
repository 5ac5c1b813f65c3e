//! Point and scene containers.
//!
//! Units are meters for positions, dBsm for radar cross-section and m/s for
//! the Doppler velocity components. Generated points carry no `z`.

use serde::{Deserialize, Serialize};

/// One measured radar return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rcs: f64,
    pub vx: f64,
    pub vy: f64,
}

impl RadarPoint {
    pub fn new(x: f64, y: f64, z: f64, rcs: f64, vx: f64, vy: f64) -> Self {
        Self {
            x,
            y,
            z,
            rcs,
            vx,
            vy,
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.rcs, self.vx, self.vy]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<RadarPoint>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<RadarPoint>) -> Self {
        Self {
            points,
            frame_id: String::new(),
        }
    }

    pub fn with_frame(points: Vec<RadarPoint>, frame_id: impl Into<String>) -> Self {
        Self {
            points,
            frame_id: frame_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One synthesized point: planar position, radar attributes and a
/// confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPoint {
    pub x: f64,
    pub y: f64,
    pub rcs: f64,
    pub vx: f64,
    pub vy: f64,
    pub score: f64,
}

impl GeneratedPoint {
    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            rcs: a[2],
            vx: a[3],
            vy: a[4],
            score: a[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.rcs, self.vx, self.vy, self.score]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && (0.0..=1.0).contains(&self.score)
    }
}

/// Source (short-range) and target (long-range) clouds of the same scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub source: PointCloud,
    pub target: PointCloud,
}

impl ScenePair {
    /// Builds a pair whose clouds carry `"{scene_id}/source"` and
    /// `"{scene_id}/target"` frame ids, the convention the readers use.
    pub fn new(scene_id: impl Into<String>, source: Vec<RadarPoint>, target: Vec<RadarPoint>) -> Self {
        let scene_id = scene_id.into();
        Self {
            source: PointCloud::with_frame(source, format!("{scene_id}/source")),
            target: PointCloud::with_frame(target, format!("{scene_id}/target")),
            scene_id,
        }
    }
}

/// Generated points of one scene, as written by inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeneration {
    pub scene_id: String,
    pub points: Vec<GeneratedPoint>,
}
