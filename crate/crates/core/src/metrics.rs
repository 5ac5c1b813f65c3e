//! Radar Chamfer and Hausdorff distances.
//!
//! Planar distances are squared Euclidean. The 5D variants add the L1
//! difference of `(rcs, vx, vy)` between a point and its planar nearest
//! neighbour; the neighbour itself is always chosen in 2D.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{GeneratedPoint, RadarPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributedPoint2D {
    pub x: f64,
    pub y: f64,
    pub rcs: f64,
    pub vx: f64,
    pub vy: f64,
}

impl AttributedPoint2D {
    pub fn new(x: f64, y: f64, rcs: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, rcs, vx, vy }
    }

    pub fn at(x: f64, y: f64) -> Self {
        Self::new(x, y, 0.0, 0.0, 0.0)
    }

    #[inline]
    pub fn dist_2d(&self, o: &Self) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn dist_attr(&self, o: &Self) -> f64 {
        (self.rcs - o.rcs).abs() + (self.vx - o.vx).abs() + (self.vy - o.vy).abs()
    }
}

impl From<&RadarPoint> for AttributedPoint2D {
    fn from(p: &RadarPoint) -> Self {
        Self::new(p.x, p.y, p.rcs, p.vx, p.vy)
    }
}

impl From<&GeneratedPoint> for AttributedPoint2D {
    fn from(p: &GeneratedPoint) -> Self {
        Self::new(p.x, p.y, p.rcs, p.vx, p.vy)
    }
}

/// Default hash cell edge, one pillar.
pub const DEFAULT_CELL: f64 = 2.5;
const MAX_CELLS_PER_AXIS: usize = 1024;

/// Uniform spatial hash over a fixed point set for exact nearest-neighbour
/// queries.
#[derive(Debug, Clone)]
pub struct NnIndex<'a> {
    points: &'a [AttributedPoint2D],
    x0: f64,
    y0: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    /// CSR layout: indices of the points in cell `c` are
    /// `order[starts[c]..starts[c + 1]]`, ascending.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NnIndex<'a> {
    pub fn new(points: &'a [AttributedPoint2D], cell: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("nearest-neighbour query against an empty set".into()));
        }
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::Invalid(format!("hash cell must be positive, got {cell}")));
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::Invalid("non-finite point coordinate".into()));
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        let span = (x1 - x0).max(y1 - y0);
        let cell = cell.max(span / MAX_CELLS_PER_AXIS as f64);
        let nx = (((x1 - x0) / cell).floor() as usize + 1).min(MAX_CELLS_PER_AXIS + 1);
        let ny = (((y1 - y0) / cell).floor() as usize + 1).min(MAX_CELLS_PER_AXIS + 1);
        let mut idx = Self {
            points,
            x0,
            y0,
            cell,
            nx,
            ny,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let (cx, cy) = idx.cell_of(p.x, p.y);
                cy.clamp(0, ny as i64 - 1) as usize * nx + cx.clamp(0, nx as i64 - 1) as usize
            })
            .collect();
        let mut starts = vec![0; nx * ny + 1];
        for &c in &cells {
            starts[c + 1] += 1;
        }
        for c in 0..nx * ny {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        idx.starts = starts;
        idx.order = order;
        Ok(idx)
    }

    fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        (((x - self.x0) / self.cell).floor() as i64, ((y - self.y0) / self.cell).floor() as i64)
    }

    fn scan_cell(&self, cx: i64, cy: i64, q: &AttributedPoint2D, tie: &impl Fn(usize) -> f64, best: &mut (usize, f64, f64)) {
        if cx < 0 || cy < 0 || cx >= self.nx as i64 || cy >= self.ny as i64 {
            return;
        }
        let c = cy as usize * self.nx + cx as usize;
        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
            let d = q.dist_2d(&self.points[i]);
            if d > best.1 {
                continue;
            }
            let t = tie(i);
            if d < best.1 || t < best.2 || (t == best.2 && i < best.0) {
                *best = (i, d, t);
            }
        }
    }

    /// Index and squared distance of the nearest point; ties go to the lowest
    /// index.
    pub fn nearest(&self, q: &AttributedPoint2D) -> (usize, f64) {
        let (i, d, _) = self.nearest_by(q, |_| 0.0);
        (i, d)
    }

    /// Nearest point in 2D with exact distance ties broken by the smallest
    /// `tie(index)`, then the lowest index. Returns `(index, d², tie)`.
    pub fn nearest_by(&self, q: &AttributedPoint2D, tie: impl Fn(usize) -> f64) -> (usize, f64, f64) {
        let (cx, cy) = self.cell_of(q.x, q.y);
        let mut best = (usize::MAX, f64::INFINITY, f64::INFINITY);
        // rings needed to cover the whole grid from the query cell
        let reach = [cx, self.nx as i64 - 1 - cx, cy, self.ny as i64 - 1 - cy]
            .iter()
            .map(|d| d.unsigned_abs())
            .max()
            .unwrap_or(0) as i64
            + 1;
        // Chebyshev ring distance from the query cell to the grid rectangle
        let gap = |c: i64, n: usize| if c < 0 { -c } else { (c - n as i64 + 1).max(0) };
        let first = gap(cx, self.nx).max(gap(cy, self.ny));
        let clip = |c: i64, n: usize, r: i64| ((-r).max(-c), r.min(n as i64 - 1 - c));
        for r in first..=reach {
            if r == 0 {
                self.scan_cell(cx, cy, q, &tie, &mut best);
            } else {
                let (lo, hi) = clip(cx, self.nx, r);
                for dx in lo..=hi {
                    self.scan_cell(cx + dx, cy - r, q, &tie, &mut best);
                    self.scan_cell(cx + dx, cy + r, q, &tie, &mut best);
                }
                let (lo, hi) = clip(cy, self.ny, r - 1);
                for dy in lo..=hi {
                    self.scan_cell(cx - r, cy + dy, q, &tie, &mut best);
                    self.scan_cell(cx + r, cy + dy, q, &tie, &mut best);
                }
            }
            // Anything outside the scanned block is more than r cells away.
            let bound = r as f64 * self.cell;
            if best.0 != usize::MAX && best.1 < bound * bound * (1.0 - 1e-9) {
                break;
            }
        }
        best
    }
}

/// For every point of `p`, the nearest point of `q` in 2D as
/// `(index, squared distance)`.
pub fn nn_2d(p: &[AttributedPoint2D], q: &[AttributedPoint2D]) -> Result<Vec<(usize, f64)>> {
    let index = NnIndex::new(q, DEFAULT_CELL)?;
    Ok(p.iter().map(|a| index.nearest(a)).collect())
}

/// Quadratic reference for [`nn_2d`].
pub fn nn_2d_brute(p: &[AttributedPoint2D], q: &[AttributedPoint2D]) -> Result<Vec<(usize, f64)>> {
    if q.is_empty() {
        return Err(Error::Invalid("nearest-neighbour query against an empty set".into()));
    }
    Ok(p.iter()
        .map(|a| {
            let mut best = (0, a.dist_2d(&q[0]));
            for (j, b) in q.iter().enumerate().skip(1) {
                let d = a.dist_2d(b);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect())
}

fn check_sets(p: &[AttributedPoint2D], q: &[AttributedPoint2D]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Invalid("distance between point sets needs both sets non-empty".into()));
    }
    Ok(())
}

/// Per-point nearest summands in each direction. With `attrs` the summand
/// adds the attribute L1 distance; among exactly tied 2D neighbours the one
/// with the smallest attribute distance counts.
fn directed(p: &[AttributedPoint2D], q: &[AttributedPoint2D], attrs: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sets(p, q)?;
    let side = |a: &[AttributedPoint2D], b: &[AttributedPoint2D]| -> Result<Vec<f64>> {
        let index = NnIndex::new(b, DEFAULT_CELL)?;
        Ok(a.iter()
            .map(|pt| {
                if attrs {
                    let (_, d, t) = index.nearest_by(pt, |j| pt.dist_attr(&b[j]));
                    d + t
                } else {
                    index.nearest(pt).1
                }
            })
            .collect())
    };
    Ok((side(p, q)?, side(q, p)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

pub fn rcd_2d(p: &[AttributedPoint2D], q: &[AttributedPoint2D]) -> Result<f64> {
    let (a, b) = directed(p, q, false)?;
    Ok(mean(&a) + mean(&b))
}

pub fn rhd_2d(p: &[AttributedPoint2D], q: &[AttributedPoint2D]) -> Result<f64> {
    let (a, b) = directed(p, q, false)?;
    Ok(max(&a).max(max(&b)))
}

pub fn rcd_5d(p: &[AttributedPoint2D], q: &[AttributedPoint2D]) -> Result<f64> {
    let (a, b) = directed(p, q, true)?;
    Ok(mean(&a) + mean(&b))
}

pub fn rhd_5d(p: &[AttributedPoint2D], q: &[AttributedPoint2D]) -> Result<f64> {
    let (a, b) = directed(p, q, true)?;
    Ok(max(&a).max(max(&b)))
}

/// All four distances for one pair of sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub rcd_2d: f64,
    pub rhd_2d: f64,
    pub rcd_5d: f64,
    pub rhd_5d: f64,
    pub n_generated: usize,
    pub n_target: usize,
}

pub fn scene_metrics(generated: &[AttributedPoint2D], target: &[AttributedPoint2D]) -> Result<SceneMetrics> {
    let (a2, b2) = directed(generated, target, false)?;
    let (a5, b5) = directed(generated, target, true)?;
    Ok(SceneMetrics {
        rcd_2d: mean(&a2) + mean(&b2),
        rhd_2d: max(&a2).max(max(&b2)),
        rcd_5d: mean(&a5) + mean(&b5),
        rhd_5d: max(&a5).max(max(&b5)),
        n_generated: generated.len(),
        n_target: target.len(),
    })
}

/// Dataset-level report. `scenes` counts every input scene, `skipped` those
/// left out of the averages because one side was empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenes: usize,
    pub skipped: usize,
    pub rcd_2d: f64,
    pub rhd_2d: f64,
    pub rcd_5d: f64,
    pub rhd_5d: f64,
}

impl MetricReport {
    pub fn evaluated(&self) -> usize {
        self.scenes - self.skipped
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Macro-average over scenes given as `(generated, target)` pairs. Scenes
/// with an empty side are skipped; when every scene is skipped the averages
/// are zero.
pub fn evaluate_dataset(pairs: &[(Vec<AttributedPoint2D>, Vec<AttributedPoint2D>)], threads: usize) -> Result<(MetricReport, Vec<Option<SceneMetrics>>)> {
    let per_scene: Vec<Result<Option<SceneMetrics>>> = crate::parallel::map_ordered(pairs, threads, |(g, t)| {
        if g.is_empty() || t.is_empty() {
            Ok(None)
        } else {
            scene_metrics(g, t).map(Some)
        }
    });
    let per_scene: Vec<Option<SceneMetrics>> = per_scene.into_iter().collect::<Result<_>>()?;
    let done: Vec<&SceneMetrics> = per_scene.iter().flatten().collect();
    let avg = |f: fn(&SceneMetrics) -> f64| {
        if done.is_empty() {
            0.0
        } else {
            done.iter().map(|m| f(m)).sum::<f64>() / done.len() as f64
        }
    };
    let report = MetricReport {
        scenes: pairs.len(),
        skipped: pairs.len() - done.len(),
        rcd_2d: avg(|m| m.rcd_2d),
        rhd_2d: avg(|m| m.rhd_2d),
        rcd_5d: avg(|m| m.rcd_5d),
        rhd_5d: avg(|m| m.rhd_5d),
    };
    Ok((report, per_scene))
}
