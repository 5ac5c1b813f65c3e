//! Point-generation losses.
//!
//! The local term compares generated points with ground truth pillar by
//! pillar; the global term is the 5D radar Chamfer distance between the full
//! unfiltered generated set and the in-grid ground truth. Nearest-neighbour
//! assignments are made on current values and treated as constants, so
//! gradients flow through the selected points only.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::grid::{GridConfig, PillarIndex, TargetPillarImage};
use crate::metrics::{nn_2d, AttributedPoint2D};
use crate::nn::{Graph, Tensor, Var};
use crate::opp::{ActivePillarSet, OppLoss};
use crate::ppg::PpgVars;
use crate::types::{GeneratedPoint, PointCloud, RadarPoint};

/// Acceptable planar error used for score targets, in meters.
pub const D_STD: f64 = 0.25;

pub const CSV_HEADER: &str = "step,L_opp_cls,L_opp_reg,L_opp_bin,L_2D,L_feat,L_score,L_global,total";

/// Mean focal loss of probabilities `p` against 0/1 targets.
pub fn focal_loss(g: &mut Graph, p: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let e = g.focal_elems(p, target, alpha, gamma)?;
    Ok(g.mean(e))
}

/// Mean smooth-L1 of `x - target`.
pub fn smooth_l1(g: &mut Graph, x: Var, target: &[f64], beta: f64) -> Result<Var> {
    let e = g.smooth_l1_elems(x, target, beta)?;
    Ok(g.mean(e))
}

/// Mean binary cross-entropy of probabilities `p`.
pub fn bce(g: &mut Graph, p: Var, target: &[f64]) -> Result<Var> {
    let e = g.bce_elems(p, target)?;
    Ok(g.mean(e))
}

/// Split of predicted active pillars by whether ground truth occupies them.
/// Entries are positions in the active set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub positives: Vec<(usize, PillarIndex)>,
    pub negatives: Vec<usize>,
}

pub fn match_pillars(active: &ActivePillarSet, gt: &TargetPillarImage) -> MatchResult {
    let mut m = MatchResult::default();
    for (i, e) in active.entries.iter().enumerate() {
        if gt.occupancy.get(e.flat).copied().unwrap_or(false) {
            m.positives.push((i, e.index));
        } else {
            m.negatives.push(i);
        }
    }
    m
}

/// For every ground-truth point, the squared planar distance to its nearest
/// generated point and that point's index (lowest index on ties).
pub fn point_distances(gt: &[RadarPoint], gen: &[GeneratedPoint]) -> (Vec<f64>, Vec<usize>) {
    assert!(!gen.is_empty(), "every active pillar generates at least one point");
    gt.iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (k, q) in gen.iter().enumerate() {
                let d = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best
        })
        .unzip()
}

/// Score targets `min(1, d_std / sqrt(D'))` with `D'` the squared distance to
/// the closest ground-truth point of the paired pillar; zero for points of
/// negative pillars (`gt = None`).
pub fn score_targets(gen: &[GeneratedPoint], gt: Option<&[RadarPoint]>, d_std: f64) -> Vec<f64> {
    match gt {
        None => vec![0.0; gen.len()],
        Some(gt) if gt.is_empty() => vec![0.0; gen.len()],
        Some(gt) => gen
            .iter()
            .map(|q| {
                let d = gt.iter().map(|p| (p.x - q.x).powi(2) + (p.y - q.y).powi(2)).fold(f64::INFINITY, f64::min);
                if d == 0.0 {
                    1.0
                } else {
                    (d_std / d.sqrt()).min(1.0)
                }
            })
            .collect(),
    }
}

/// Ground-truth points inside the grid, bucketed by pillar.
pub fn gt_by_pillar(target: &PointCloud, grid: &GridConfig) -> BTreeMap<PillarIndex, Vec<RadarPoint>> {
    crate::grid::assign_points(target, grid).buckets
}

pub fn in_grid(target: &PointCloud, grid: &GridConfig) -> Vec<RadarPoint> {
    target.points.iter().filter(|p| grid.contains(p.x, p.y)).copied().collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LocalLoss {
    pub total: Var,
    pub l_2d: Var,
    pub l_feat: Var,
    pub l_score: Var,
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn rows_of(g: &Graph, points: Var, range: Range<usize>) -> Vec<GeneratedPoint> {
    let d = g.data(points);
    range
        .map(|r| {
            let s = &d[r * 6..r * 6 + 6];
            GeneratedPoint::from_array([s[0], s[1], s[2], s[3], s[4], s[5]])
        })
        .collect()
}

/// Constants of the local loss for one generation pass: the nearest
/// generated row of every ground-truth point in a positive pillar, the
/// per-point score targets and the normalization weights. All are computed
/// from current values and carry no gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalTargets {
    /// Generated row paired with each ground-truth point.
    pub rows: Vec<usize>,
    /// `(x, y, rcs, vx, vy)` of each paired ground-truth point.
    pub gt: Vec<[f64; 5]>,
    /// `1 / (|J_m| |V_pos|)` of each pair.
    pub pair_weight: Vec<f64>,
    pub score_target: Vec<f64>,
    /// `1 / (K_l |V_hat|)` of each generated row.
    pub score_weight: Vec<f64>,
}

pub fn local_targets(
    g: &Graph,
    vars: &PpgVars,
    matched: &MatchResult,
    gt: &BTreeMap<PillarIndex, Vec<RadarPoint>>,
    d_std: f64,
) -> Result<LocalTargets> {
    let Some(points) = vars.points else {
        return Ok(LocalTargets::default());
    };
    let n_pred = vars.active.len();
    let n_pos = matched.positives.len();
    let m = vars.num_points();
    let mut t = LocalTargets {
        score_target: vec![0.0; m],
        score_weight: vec![0.0; m],
        ..LocalTargets::default()
    };
    for range in &vars.ranges {
        let k = range.len() as f64;
        for r in range.clone() {
            t.score_weight[r] = 1.0 / (k * n_pred as f64);
        }
    }
    for &(i, idx) in &matched.positives {
        let range = vars.ranges[i].clone();
        let gen = rows_of(g, points, range.clone());
        let pts = gt
            .get(&idx)
            .ok_or_else(|| Error::Invalid(format!("no ground truth for positive pillar ({}, {})", idx.row, idx.col)))?;
        let (_, ks) = point_distances(pts, &gen);
        let j = pts.len() as f64;
        for (p, k) in pts.iter().zip(ks) {
            t.rows.push(range.start + k);
            t.gt.push([p.x, p.y, p.rcs, p.vx, p.vy]);
            t.pair_weight.push(1.0 / (j * n_pos as f64));
        }
        for (r, s) in range.zip(score_targets(&gen, Some(pts), d_std)) {
            t.score_target[r] = s;
        }
    }
    Ok(t)
}

/// Local loss with fixed targets; the three components are returned already
/// normalized, so `total = l_2d + l_feat + l_score`.
pub fn apply_local(g: &mut Graph, vars: &PpgVars, targets: &LocalTargets) -> Result<LocalLoss> {
    let Some(points) = vars.points else {
        let z = zero(g);
        return Ok(LocalLoss {
            total: z,
            l_2d: z,
            l_feat: z,
            l_score: z,
        });
    };
    if targets.score_target.len() != vars.num_points() {
        return Err(Error::shape(
            "local_loss",
            format!("{} score targets for {} generated points", targets.score_target.len(), vars.num_points()),
        ));
    }
    let (l_2d, l_feat) = if targets.rows.is_empty() {
        (zero(g), zero(g))
    } else {
        let n = targets.rows.len();
        let sel = g.gather_rows(points, &targets.rows)?;
        let sel = g.select_cols(sel, &[0, 1, 2, 3, 4])?;
        let target = g.constant(Tensor::from_parts(vec![n, 5], targets.gt.concat()));
        let diff = g.sub(sel, target)?;
        let xy = g.select_cols(diff, &[0, 1])?;
        let xy = g.square(xy);
        let w2d: Vec<f64> = targets.pair_weight.iter().flat_map(|&w| [w; 2]).collect();
        let l_2d = g.weighted_sum(xy, Some(&w2d), 1.0)?;
        let at = g.select_cols(diff, &[2, 3, 4])?;
        let at = g.abs(at);
        let wfeat: Vec<f64> = targets.pair_weight.iter().flat_map(|&w| [w; 3]).collect();
        let l_feat = g.weighted_sum(at, Some(&wfeat), 1.0)?;
        (l_2d, l_feat)
    };
    let scores = g.select_cols(points, &[5])?;
    let bce = g.bce_elems(scores, &targets.score_target)?;
    let l_score = g.weighted_sum(bce, Some(&targets.score_weight), 1.0)?;
    let total = g.add_all(&[l_2d, l_feat, l_score])?;
    Ok(LocalLoss {
        total,
        l_2d,
        l_feat,
        l_score,
    })
}

pub fn local_loss(
    g: &mut Graph,
    vars: &PpgVars,
    matched: &MatchResult,
    gt: &BTreeMap<PillarIndex, Vec<RadarPoint>>,
    d_std: f64,
) -> Result<LocalLoss> {
    let t = local_targets(g, vars, matched, gt, d_std)?;
    apply_local(g, vars, &t)
}

/// Constants of the global loss: for every generated row its nearest
/// ground-truth point, then for every ground-truth point its nearest
/// generated row, with the matching weights `1/M` and `1/N`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalTargets {
    pub rows: Vec<usize>,
    pub values: Vec<[f64; 5]>,
    pub weights: Vec<f64>,
}

pub fn global_targets(g: &Graph, vars: &PpgVars, gt: &[RadarPoint]) -> Result<GlobalTargets> {
    let Some(points) = vars.points else {
        return Ok(GlobalTargets::default());
    };
    if gt.is_empty() {
        return Ok(GlobalTargets::default());
    }
    let m = g.shape(points)[0];
    let gen: Vec<AttributedPoint2D> = rows_of(g, points, 0..m).iter().map(AttributedPoint2D::from).collect();
    let tgt: Vec<AttributedPoint2D> = gt.iter().map(AttributedPoint2D::from).collect();
    let gen_to_gt = nn_2d(&gen, &tgt)?;
    let gt_to_gen = nn_2d(&tgt, &gen)?;
    let n = tgt.len();
    let at = |t: &AttributedPoint2D| [t.x, t.y, t.rcs, t.vx, t.vy];
    let mut rows: Vec<usize> = (0..m).collect();
    rows.extend(gt_to_gen.iter().map(|&(i, _)| i));
    let mut values: Vec<[f64; 5]> = gen_to_gt.iter().map(|&(j, _)| at(&tgt[j])).collect();
    values.extend(tgt.iter().map(at));
    let mut weights = vec![1.0 / m as f64; m];
    weights.extend(vec![1.0 / n as f64; n]);
    Ok(GlobalTargets { rows, values, weights })
}

/// 5D radar Chamfer distance with fixed nearest-neighbour assignments.
pub fn apply_global(g: &mut Graph, vars: &PpgVars, targets: &GlobalTargets) -> Result<Var> {
    let Some(points) = vars.points else {
        return Ok(zero(g));
    };
    if targets.rows.is_empty() {
        return Ok(zero(g));
    }
    let n = targets.rows.len();
    let sel = g.gather_rows(points, &targets.rows)?;
    let sel = g.select_cols(sel, &[0, 1, 2, 3, 4])?;
    let target = g.constant(Tensor::from_parts(vec![n, 5], targets.values.concat()));
    let diff = g.sub(sel, target)?;
    let xy = g.select_cols(diff, &[0, 1])?;
    let xy = g.square(xy);
    let at = g.select_cols(diff, &[2, 3, 4])?;
    let at = g.abs(at);
    let terms = g.concat_cols(&[xy, at])?;
    let w: Vec<f64> = targets.weights.iter().flat_map(|&w| [w; 5]).collect();
    g.weighted_sum(terms, Some(&w), 1.0)
}

/// Differentiable 5D radar Chamfer distance between every generated row and
/// the given ground truth. Zero when either side is empty.
pub fn global_loss(g: &mut Graph, vars: &PpgVars, gt: &[RadarPoint]) -> Result<Var> {
    let t = global_targets(g, vars, gt)?;
    apply_global(g, vars, &t)
}

/// Scalar values of one loss evaluation, in CSV column order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub opp_cls: f64,
    pub opp_reg: f64,
    pub opp_bin: f64,
    pub l_2d: f64,
    pub l_feat: f64,
    pub l_score: f64,
    pub global: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 8] {
        [
            self.opp_cls,
            self.opp_reg,
            self.opp_bin,
            self.l_2d,
            self.l_feat,
            self.l_score,
            self.global,
            self.total,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            opp_cls: a[0],
            opp_reg: a[1],
            opp_bin: a[2],
            l_2d: a[3],
            l_feat: a[4],
            l_score: a[5],
            global: a[6],
            total: a[7],
        }
    }

    pub fn csv_row(&self, step: usize) -> String {
        let mut s = step.to_string();
        for v in self.as_array() {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }
}

/// Handles of the full objective.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub opp: OppLoss,
    pub local: Option<LocalLoss>,
    pub global: Option<Var>,
}

/// Unweighted sum of the OPP loss and, when present, the local and global
/// point losses.
pub fn total_loss(g: &mut Graph, opp: OppLoss, local: Option<LocalLoss>, global: Option<Var>) -> Result<TotalLoss> {
    let mut terms = vec![opp.total];
    if let Some(l) = local {
        terms.push(l.total);
    }
    if let Some(v) = global {
        terms.push(v);
    }
    let total = g.add_all(&terms)?;
    Ok(TotalLoss {
        total,
        opp,
        local,
        global,
    })
}

impl TotalLoss {
    pub fn components(&self, g: &Graph) -> LossComponents {
        let v = |x: Var| g.value(x).item();
        LossComponents {
            opp_cls: v(self.opp.cls),
            opp_reg: v(self.opp.reg),
            opp_bin: v(self.opp.bin),
            l_2d: self.local.map_or(0.0, |l| v(l.l_2d)),
            l_feat: self.local.map_or(0.0, |l| v(l.l_feat)),
            l_score: self.local.map_or(0.0, |l| v(l.l_score)),
            global: self.global.map_or(0.0, v),
            total: v(self.total),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opp::ActivePillar;

    fn rp(x: f64, y: f64) -> RadarPoint {
        RadarPoint::new(x, y, 0.0, 0.0, 0.0, 0.0)
    }

    fn gp(x: f64, y: f64, score: f64) -> GeneratedPoint {
        GeneratedPoint::from_array([x, y, 0.0, 0.0, 0.0, score])
    }

    #[test]
    fn distance_examples() {
        assert_eq!(point_distances(&[rp(0.0, 0.0)], &[gp(3.0, 4.0, 0.0)]), (vec![25.0], vec![0]));
        assert_eq!(point_distances(&[rp(0.0, 0.0)], &[gp(0.0, 2.0, 0.0), gp(1.0, 0.0, 0.0)]), (vec![1.0], vec![1]));
        assert_eq!(point_distances(&[rp(1.0, 1.0)], &[gp(0.0, 1.0, 0.0), gp(2.0, 1.0, 0.0)]).1, vec![0]);
    }

    #[test]
    fn score_target_examples() {
        let gt = [rp(0.0, 0.0)];
        let s = score_targets(&[gp(0.25, 0.0, 0.0), gp(1.0, 0.0, 0.0), gp(0.0, 0.0, 0.0), gp(0.1, 0.0, 0.0)], Some(&gt), D_STD);
        assert_eq!(s, vec![1.0, 0.25, 1.0, 1.0]);
        assert_eq!(score_targets(&[gp(0.0, 0.0, 0.0)], None, D_STD), vec![0.0]);
    }

    fn grid() -> GridConfig {
        GridConfig {
            x_min: 0.0,
            x_max: 5.0,
            y_min: 0.0,
            y_max: 5.0,
            pillar_dx: 2.5,
            pillar_dy: 2.5,
            channels: 2,
        }
    }

    fn setup(g: &mut Graph, rows: &[[f64; 6]], pillars: &[(usize, usize)]) -> PpgVars {
        let grid = grid();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = g.leaf(Tensor::new(&[rows.len(), 6], data).unwrap(), true);
        let mut entries = Vec::new();
        let mut ranges = Vec::new();
        let mut start = 0;
        for &(flat, k) in pillars {
            entries.push(ActivePillar {
                index: grid.index_of_flat(flat),
                flat,
                p_occ: 0.5,
                attrs: [0.0; 5],
                count: k as u64,
            });
            ranges.push(start..start + k);
            start += k;
        }
        PpgVars {
            points: Some(points),
            active: ActivePillarSet { entries },
            ranges,
        }
    }

    #[test]
    fn local_loss_single_offset_point() {
        let grid = grid();
        let cloud = PointCloud::new(vec![RadarPoint::new(1.0, 1.0, 0.0, 5.0, 1.0, 0.0)]);
        let target = crate::grid::build_target_image(&cloud, &grid).unwrap();
        let gt = gt_by_pillar(&cloud, &grid);
        let mut g = Graph::new();
        // generated one meter off, equal attributes, score equal to its target
        let vars = setup(&mut g, &[[2.0, 1.0, 5.0, 1.0, 0.0, 0.25]], &[(0, 1)]);
        let m = match_pillars(&vars.active, &target);
        assert_eq!(m.positives.len(), 1);
        let l = local_loss(&mut g, &vars, &m, &gt, D_STD).unwrap();
        assert!((g.value(l.l_2d).item() - 1.0).abs() < 1e-12);
        assert_eq!(g.value(l.l_feat).item(), 0.0);
        let bce = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((g.value(l.l_score).item() - bce).abs() < 1e-12);
    }

    #[test]
    fn negatives_with_zero_score_cost_nothing() {
        let grid = grid();
        let cloud = PointCloud::new(vec![rp(1.0, 1.0)]);
        let target = crate::grid::build_target_image(&cloud, &grid).unwrap();
        let gt = gt_by_pillar(&cloud, &grid);
        let mut g = Graph::new();
        let vars = setup(&mut g, &[[4.0, 4.0, 0.0, 0.0, 0.0, 0.0], [4.5, 4.0, 0.0, 0.0, 0.0, 0.0]], &[(3, 2)]);
        let m = match_pillars(&vars.active, &target);
        assert_eq!((m.positives.len(), m.negatives.len()), (0, 1));
        let l = local_loss(&mut g, &vars, &m, &gt, D_STD).unwrap();
        assert!(g.value(l.total).item() < 1e-5);
    }

    #[test]
    fn perfect_generation_has_near_zero_local_loss() {
        let grid = grid();
        let cloud = PointCloud::new(vec![RadarPoint::new(1.0, 1.0, 0.0, 3.0, 1.0, -1.0), RadarPoint::new(3.0, 1.0, 0.0, 2.0, 0.0, 0.0)]);
        let target = crate::grid::build_target_image(&cloud, &grid).unwrap();
        let gt = gt_by_pillar(&cloud, &grid);
        let mut g = Graph::new();
        let vars = setup(
            &mut g,
            &[[1.0, 1.0, 3.0, 1.0, -1.0, 1.0], [3.0, 1.0, 2.0, 0.0, 0.0, 1.0]],
            &[(0, 1), (1, 1)],
        );
        let m = match_pillars(&vars.active, &target);
        let l = local_loss(&mut g, &vars, &m, &gt, D_STD).unwrap();
        assert!(g.value(l.total).item() < 1e-5);
    }

    #[test]
    fn global_loss_examples() {
        let mut g = Graph::new();
        let vars = setup(&mut g, &[[0.0, 0.0, 2.0, 0.0, 0.0, 0.5]], &[(0, 1)]);
        let l = global_loss(&mut g, &vars, &[rp(0.0, 0.0)]).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        let vars = setup(&mut g, &[[3.0, 4.0, 0.0, 0.0, 0.0, 0.5]], &[(0, 1)]);
        let l = global_loss(&mut g, &vars, &[rp(0.0, 0.0)]).unwrap();
        assert_eq!(g.value(l).item(), 50.0);
        let vars = setup(&mut g, &[[1.0, 2.0, 3.0, 4.0, 5.0, 0.5], [2.0, 2.0, 1.0, 0.0, 0.0, 0.5]], &[(0, 2)]);
        let same = [RadarPoint::new(1.0, 2.0, 0.0, 3.0, 4.0, 5.0), RadarPoint::new(2.0, 2.0, 0.0, 1.0, 0.0, 0.0)];
        let l = global_loss(&mut g, &vars, &same).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn csv_row_layout() {
        let c = LossComponents::from_array([1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 6.0]);
        assert_eq!(c.csv_row(3), "3,1,2,3,0,0,0,0,6");
        assert_eq!(CSV_HEADER.split(',').count(), 9);
    }
}
