//! Pillar grid: point binning, point decoration, the learned pillar encoder
//! and the ground-truth target pillar image.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::types::{PointCloud, RadarPoint};

/// Number of per-point features produced by [`decorate_points`].
pub const DECORATED_FEATURES: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub pillar_dx: f64,
    pub pillar_dy: f64,
    /// Pillar feature width `C` of the pseudo-image.
    pub channels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 80.0,
            y_min: -40.0,
            y_max: 40.0,
            pillar_dx: 2.5,
            pillar_dy: 2.5,
            channels: 32,
        }
    }
}

fn cells_along(lo: f64, hi: f64, step: f64, axis: &str) -> Result<usize> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("pillar size along {axis} must be > 0, got {step}")));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("empty {axis} range [{lo}, {hi})")));
    }
    let n = (hi - lo) / step;
    let r = n.round();
    if (n - r).abs() > 1e-9 || r < 1.0 {
        return Err(Error::Config(format!(
            "{axis} extent {} is not a multiple of the pillar size {step}",
            hi - lo
        )));
    }
    Ok(r as usize)
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims().map(|_| ())?;
        if self.channels == 0 {
            return Err(Error::Config("feature channels must be positive".into()));
        }
        Ok(())
    }

    /// `(H, W)`: rows along y, columns along x.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let w = cells_along(self.x_min, self.x_max, self.pillar_dx, "x")?;
        let h = cells_along(self.y_min, self.y_max, self.pillar_dy, "y")?;
        Ok((h, w))
    }

    pub fn height(&self) -> usize {
        self.dims().expect("validated grid").0
    }

    pub fn width(&self) -> usize {
        self.dims().expect("validated grid").1
    }

    pub fn num_cells(&self) -> usize {
        let (h, w) = self.dims().expect("validated grid");
        h * w
    }

    /// Pillar containing `(x, y)` under half-open cells `[lo, hi)`, or
    /// `None` outside the grid.
    pub fn locate(&self, x: f64, y: f64) -> Option<PillarIndex> {
        let (h, w) = self.dims().ok()?;
        let col = ((x - self.x_min) / self.pillar_dx).floor();
        let row = ((y - self.y_min) / self.pillar_dy).floor();
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 || col.is_nan() || row.is_nan() {
            return None;
        }
        Some(PillarIndex {
            row: row as usize,
            col: col as usize,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.locate(x, y).is_some()
    }

    pub fn center(&self, idx: PillarIndex) -> (f64, f64) {
        (
            self.x_min + (idx.col as f64 + 0.5) * self.pillar_dx,
            self.y_min + (idx.row as f64 + 0.5) * self.pillar_dy,
        )
    }

    /// Metric position to continuous `(col, row)` map coordinates where
    /// integer values fall on pillar centers.
    pub fn to_map_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_min) / self.pillar_dx - 0.5,
            (y - self.y_min) / self.pillar_dy - 0.5,
        )
    }

    pub fn index_of_flat(&self, flat: usize) -> PillarIndex {
        let w = self.width();
        PillarIndex {
            row: flat / w,
            col: flat % w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PillarIndex {
    pub row: usize,
    pub col: usize,
}

impl PillarIndex {
    pub fn flat(&self, width: usize) -> usize {
        self.row * width + self.col
    }
}

/// Non-empty pillars and their points, ordered by `(row, col)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PillarBuckets {
    pub buckets: BTreeMap<PillarIndex, Vec<RadarPoint>>,
    /// Points that fell outside the grid.
    pub dropped: usize,
}

impl PillarBuckets {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }
}

pub fn assign_points(cloud: &PointCloud, grid: &GridConfig) -> PillarBuckets {
    let mut out = PillarBuckets::default();
    for p in &cloud.points {
        match grid.locate(p.x, p.y) {
            Some(idx) => out.buckets.entry(idx).or_default().push(*p),
            None => out.dropped += 1,
        }
    }
    out
}

/// Per-point rows `(x, y, z, rcs, vx, vy, x-x̄, y-ȳ, z-z̄, x-x_p, y-y_p)` where
/// the bar denotes the bucket mean and `(x_p, y_p)` is the pillar center.
///
/// Panics on an empty bucket.
pub fn decorate_points(bucket: &[RadarPoint], index: PillarIndex, grid: &GridConfig) -> Vec<[f64; DECORATED_FEATURES]> {
    assert!(!bucket.is_empty(), "decorate_points on an empty bucket");
    let n = bucket.len() as f64;
    let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
    for p in bucket {
        mx += p.x;
        my += p.y;
        mz += p.z;
    }
    let (mx, my, mz) = (mx / n, my / n, mz / n);
    let (cx, cy) = grid.center(index);
    bucket
        .iter()
        .map(|p| [p.x, p.y, p.z, p.rcs, p.vx, p.vy, p.x - mx, p.y - my, p.z - mz, p.x - cx, p.y - cy])
        .collect()
}

/// Fixed per-feature divisors applied before the encoder's linear layer so
/// that inputs enter at unit scale.
fn feature_scale(grid: &GridConfig) -> [f64; DECORATED_FEATURES] {
    let span_x = 0.5 * (grid.x_max - grid.x_min);
    let span_y = 0.5 * (grid.y_max - grid.y_min);
    let (dx, dy) = (grid.pillar_dx, grid.pillar_dy);
    [span_x, span_y, 2.0, 10.0, 10.0, 10.0, dx, dy, 2.0, dx, dy]
}

pub const ENCODER_WEIGHT: &str = "encoder.weight";
pub const ENCODER_BIAS: &str = "encoder.bias";

/// Registers the `11 -> C` encoder layer.
pub fn init_encoder(store: &mut ParamStore, grid: &GridConfig, seed: u64) -> Result<()> {
    let c = grid.channels;
    store.insert(
        ENCODER_WEIGHT,
        crate::nn::kaiming_uniform(&[c, DECORATED_FEATURES], DECORATED_FEATURES, seed, ENCODER_WEIGHT),
    )?;
    store.insert(ENCODER_BIAS, Tensor::zeros(&[c]))
}

/// Pillar features scattered into a `[C, H, W]` pseudo-image: per point a
/// linear layer and ReLU, then an element-wise max over each bucket.
pub fn encode_pillars(g: &mut Graph, buckets: &PillarBuckets, store: &ParamStore, grid: &GridConfig) -> Result<Var> {
    let (h, w) = grid.dims()?;
    let weight = g.param(store, ENCODER_WEIGHT)?;
    let bias = g.param(store, ENCODER_BIAS)?;
    let ws = g.shape(weight).to_vec();
    if ws != [grid.channels, DECORATED_FEATURES] {
        return Err(Error::shape("encode_pillars", format!("encoder weight {ws:?}, C = {}", grid.channels)));
    }
    let c = grid.channels;
    if buckets.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[c, h, w])));
    }
    let scale = feature_scale(grid);
    let mut rows = Vec::with_capacity(buckets.num_points() * DECORATED_FEATURES);
    let mut segments: Vec<Range<usize>> = Vec::with_capacity(buckets.len());
    let mut cells = Vec::with_capacity(buckets.len());
    for (idx, pts) in &buckets.buckets {
        let start = segments.last().map_or(0, |s| s.end);
        for row in decorate_points(pts, *idx, grid) {
            rows.extend(row.iter().zip(&scale).map(|(v, s)| v / s));
        }
        segments.push(start..start + pts.len());
        cells.push(idx.flat(w));
    }
    let n = segments.last().unwrap().end;
    let x = g.constant(Tensor::from_parts(vec![n, DECORATED_FEATURES], rows));
    let y = g.linear(x, weight, Some(bias))?;
    let y = g.relu(y);
    let pooled = g.segment_max(y, &segments)?;
    g.scatter_cells(pooled, &cells, h, w)
}

/// Ground-truth summary of a target cloud: per pillar the mean of
/// `(x, y, rcs, vx, vy)` and the point count `K`, shape `(6, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPillarImage {
    pub data: Tensor,
    /// Row-major `(H, W)` occupancy, true exactly where `K >= 1`.
    pub occupancy: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl TargetPillarImage {
    pub fn count(&self, flat: usize) -> usize {
        self.data.data()[5 * self.height * self.width + flat] as usize
    }

    /// Mean attributes `(x_c, y_c, rcs_c, vx_c, vy_c)` at a cell.
    pub fn means(&self, flat: usize) -> [f64; 5] {
        let hw = self.height * self.width;
        let d = self.data.data();
        [d[flat], d[hw + flat], d[2 * hw + flat], d[3 * hw + flat], d[4 * hw + flat]]
    }

    pub fn occupied_cells(&self) -> Vec<usize> {
        self.occupancy
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| o.then_some(i))
            .collect()
    }
}

pub fn build_target_image(target: &PointCloud, grid: &GridConfig) -> Result<TargetPillarImage> {
    let (h, w) = grid.dims()?;
    let hw = h * w;
    let buckets = assign_points(target, grid);
    let mut data = vec![0.0; 6 * hw];
    let mut occupancy = vec![false; hw];
    for (idx, pts) in &buckets.buckets {
        let flat = idx.flat(w);
        let n = pts.len() as f64;
        let mut sums = [0.0; 5];
        for p in pts {
            for (s, v) in sums.iter_mut().zip([p.x, p.y, p.rcs, p.vx, p.vy]) {
                *s += v;
            }
        }
        for (ch, s) in sums.iter().enumerate() {
            data[ch * hw + flat] = s / n;
        }
        data[5 * hw + flat] = n;
        occupancy[flat] = true;
    }
    Ok(TargetPillarImage {
        data: Tensor::from_parts(vec![6, h, w], data),
        occupancy,
        height: h,
        width: w,
    })
}
