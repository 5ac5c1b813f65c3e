//! Pillar-to-point generation.
//!
//! Each active pillar's BEV feature is replicated `K'` times with one keyed
//! random scalar appended per copy. A position head turns every copy into a
//! planar offset from the pillar's predicted center; the BEV map is then
//! bilinearly sampled at the resulting points and a regression head predicts
//! attribute and score offsets.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridConfig, PillarIndex};
use crate::nn::{kaiming_uniform, Graph, ParamStore, Tensor, Var};
use crate::opp::{decode_attrs, select_active, ActivePillar, ActivePillarSet, OppHeads, OppOutput};
use crate::rng::keyed_uniform;
use crate::types::GeneratedPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpgConfig {
    pub hidden: usize,
    /// Inference keeps points whose score strictly exceeds this.
    pub score_threshold: f64,
}

impl Default for PpgConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            score_threshold: 0.1,
        }
    }
}

const LAYERS: [&str; 4] = ["ppg.pos.fc0", "ppg.pos.fc1", "ppg.reg.fc0", "ppg.reg.fc1"];

pub fn init_ppg(store: &mut ParamStore, bev_channels: usize, hidden: usize, seed: u64) -> Result<()> {
    let shapes = [
        [hidden, bev_channels + 1],
        [2, hidden],
        [hidden, bev_channels],
        [4, hidden],
    ];
    for (i, (name, shape)) in LAYERS.iter().zip(shapes).enumerate() {
        let wname = format!("{name}.weight");
        // output layers start at zero: points begin at the OPP means with
        // score p_occ
        let w = if i % 2 == 1 {
            Tensor::zeros(&shape)
        } else {
            kaiming_uniform(&shape, shape[1], seed, &wname)
        };
        store.insert(&wname, w)?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
    }
    Ok(())
}

fn mlp(g: &mut Graph, store: &ParamStore, x: Var, first: &str, second: &str) -> Result<Var> {
    let w0 = g.param(store, &format!("{first}.weight"))?;
    let b0 = g.param(store, &format!("{first}.bias"))?;
    let w1 = g.param(store, &format!("{second}.weight"))?;
    let b1 = g.param(store, &format!("{second}.bias"))?;
    let h = g.linear(x, w0, Some(b0))?;
    let h = g.relu(h);
    g.linear(h, w1, Some(b1))
}

/// Random scalar appended to copy `row` of the pillar at `flat`.
pub fn expansion_noise(seed: u64, scene_key: u64, flat: usize, row: u64) -> f64 {
    keyed_uniform(seed, scene_key, flat as u64, row)
}

/// Per active pillar, the `(K', C + 1)` matrix of replicated BEV features
/// with the random column last.
pub fn expand_features(bev: &Tensor, active: &ActivePillarSet, seed: u64, scene_key: u64) -> Result<Vec<Tensor>> {
    let s = bev.shape();
    if s.len() != 3 {
        return Err(Error::shape("expand_features", format!("bev {s:?}")));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    active
        .entries
        .iter()
        .map(|e| {
            let feat: Vec<f64> = (0..c).map(|ch| bev.data()[ch * hw + e.flat]).collect();
            let mut data = Vec::with_capacity(e.count as usize * (c + 1));
            for r in 0..e.count {
                data.extend_from_slice(&feat);
                data.push(expansion_noise(seed, scene_key, e.flat, r));
            }
            Tensor::new(&[e.count as usize, c + 1], data)
        })
        .collect()
}

/// Graph handles of one generation pass.
#[derive(Debug, Clone)]
pub struct PpgVars {
    /// `[M, 6]` rows `(x, y, rcs, vx, vy, score)`; `None` without active
    /// pillars.
    pub points: Option<Var>,
    pub active: ActivePillarSet,
    /// Row range of every active pillar inside `points`.
    pub ranges: Vec<Range<usize>>,
}

impl PpgVars {
    pub fn num_points(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

/// Position head: `[M, C+1]` expanded rows to `[M, 2]` offsets bounded by
/// one pillar size through `tanh`, added to the per-row centers `[M, 2]`.
pub fn predict_positions(g: &mut Graph, expanded: Var, centers: Var, store: &ParamStore, grid: &GridConfig) -> Result<Var> {
    let raw = mlp(g, store, expanded, LAYERS[0], LAYERS[1])?;
    let t = g.tanh(raw);
    let m = g.shape(t)[0];
    let scale: Vec<f64> = (0..m).flat_map(|_| [grid.pillar_dx, grid.pillar_dy]).collect();
    let offsets = g.affine(t, &scale, &[0.0])?;
    g.add(centers, offsets)
}

/// Regression head on features sampled at `coords` (meters, `[M, 2]`):
/// returns `[M, 4]` rows `(rcs, vx, vy, score)` where the attributes are
/// `base_attrs + offsets` and `score = clamp(p_occ + ds, 0, 1)`.
pub fn sample_and_regress(
    g: &mut Graph,
    bev: Var,
    coords: Var,
    base_attrs: Var,
    p_occ: Var,
    store: &ParamStore,
    grid: &GridConfig,
) -> Result<Var> {
    let m = g.shape(coords)[0];
    let scale: Vec<f64> = (0..m).flat_map(|_| [1.0 / grid.pillar_dx, 1.0 / grid.pillar_dy]).collect();
    let (u0, v0) = grid.to_map_coords(0.0, 0.0);
    let shift: Vec<f64> = (0..m).flat_map(|_| [u0, v0]).collect();
    let map_xy = g.affine(coords, &scale, &shift)?;
    let feats = g.bilinear_sample(bev, map_xy)?;
    let out = mlp(g, store, feats, LAYERS[2], LAYERS[3])?;
    let d_attr = g.select_cols(out, &[0, 1, 2])?;
    let attrs = g.add(base_attrs, d_attr)?;
    let ds = g.select_cols(out, &[3])?;
    let s = g.add(p_occ, ds)?;
    let s = g.clamp(s, 0.0, 1.0);
    g.concat_cols(&[attrs, s])
}

/// Runs selection, expansion and both heads for every active pillar.
#[allow(clippy::too_many_arguments)]
pub fn ppg_forward(
    g: &mut Graph,
    bev: Var,
    heads: &OppHeads,
    opp_out: &OppOutput,
    store: &ParamStore,
    grid: &GridConfig,
    active_threshold: f64,
    seed: u64,
    scene_key: u64,
) -> Result<PpgVars> {
    let active = select_active(opp_out, active_threshold);
    if active.is_empty() {
        return Ok(PpgVars {
            points: None,
            active,
            ranges: Vec::new(),
        });
    }
    let cells: Vec<usize> = active.entries.iter().map(|e| e.flat).collect();
    let mut row_cells = Vec::new();
    let mut row_pillar = Vec::new();
    let mut noise = Vec::new();
    let mut ranges = Vec::with_capacity(active.len());
    for (i, e) in active.entries.iter().enumerate() {
        let start = row_cells.len();
        for r in 0..e.count {
            row_cells.push(e.flat);
            row_pillar.push(i);
            noise.push(expansion_noise(seed, scene_key, e.flat, r));
        }
        ranges.push(start..row_cells.len());
    }
    let m = row_cells.len();

    let feats = g.gather_cells(bev, &row_cells)?;
    let noise = g.constant(Tensor::from_parts(vec![m, 1], noise));
    let expanded = g.concat_cols(&[feats, noise])?;

    let decoded = decode_attrs(g, heads, &cells, grid)?;
    let per_row = g.gather_rows(decoded, &row_pillar)?;
    let centers = g.select_cols(per_row, &[0, 1])?;
    let base_attrs = g.select_cols(per_row, &[2, 3, 4])?;
    let p_cells = g.gather_cells(heads.p_occ, &cells)?;
    let p_rows = g.gather_rows(p_cells, &row_pillar)?;

    let xy = predict_positions(g, expanded, centers, store, grid)?;
    let rest = sample_and_regress(g, bev, xy, base_attrs, p_rows, store, grid)?;
    let points = g.concat_cols(&[xy, rest])?;
    Ok(PpgVars {
        points: Some(points),
        active,
        ranges,
    })
}

/// Points generated for one active pillar.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarGeneration {
    pub pillar: PillarIndex,
    pub source: ActivePillar,
    pub points: Vec<GeneratedPoint>,
}

/// Result of a generation pass: the score-filtered merged cloud and the
/// unfiltered per-pillar structure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    pub points: Vec<GeneratedPoint>,
    pub pillars: Vec<PillarGeneration>,
}

impl Generation {
    pub fn unfiltered(&self) -> impl Iterator<Item = &GeneratedPoint> {
        self.pillars.iter().flat_map(|p| p.points.iter())
    }
}

pub fn collect_generation(g: &Graph, vars: &PpgVars, score_threshold: f64) -> Generation {
    let Some(points) = vars.points else {
        return Generation::default();
    };
    let rows = g.data(points);
    let all: Vec<GeneratedPoint> = rows
        .chunks(6)
        .map(|r| GeneratedPoint::from_array([r[0], r[1], r[2], r[3], r[4], r[5]]))
        .collect();
    let pillars = vars
        .active
        .entries
        .iter()
        .zip(&vars.ranges)
        .map(|(e, r)| PillarGeneration {
            pillar: e.index,
            source: *e,
            points: all[r.clone()].to_vec(),
        })
        .collect();
    let points = all.into_iter().filter(|p| p.score > score_threshold).collect();
    Generation { points, pillars }
}
