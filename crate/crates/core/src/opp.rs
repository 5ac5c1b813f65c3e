//! Occupied pillar prediction: per-pillar occupancy probability, mean radar
//! attributes and a point count encoded with log-scale binning.
//!
//! A count `K >= 1` is split into `bin = floor(log2 K)` and
//! `res = log2(K - 2^bin + 1)`, so `K = 2^bin + 2^res - 1`. Within bin `b`
//! the residual spans `[0, b]`; the residual head predicts it as a fraction
//! of `b` through a sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridConfig, PillarIndex, TargetPillarImage};
use crate::nn::{kaiming_uniform, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountTarget {
    pub bin: u32,
    pub res: f64,
}

/// Log-scale binning of a point count.
pub fn encode_count(k: u64) -> Result<CountTarget> {
    if k < 1 {
        return Err(Error::Invalid(format!("point count must be >= 1, got {k}")));
    }
    let bin = 63 - k.leading_zeros();
    let res = ((k - (1u64 << bin) + 1) as f64).log2();
    Ok(CountTarget { bin, res })
}

/// Unrounded inverse of [`encode_count`]: `2^bin + 2^res - 1`.
pub fn decode_count_continuous(bin: u32, res: f64) -> f64 {
    2f64.powi(bin as i32) + res.max(0.0).exp2() - 1.0
}

/// `round(2^bin + 2^res - 1)`, at least 1.
pub fn decode_count(bin: u32, res: f64) -> u64 {
    (decode_count_continuous(bin, res).round() as u64).max(1)
}

/// Training target for a head with `bins` classes: the bin index and the
/// residual as a fraction of the bin's residual span. Counts beyond the top
/// bin saturate to `2^bins - 1`.
pub fn count_training_target(k: u64, bins: usize) -> Result<(usize, f64)> {
    let t = encode_count(k)?;
    let top = bins as u32 - 1;
    if t.bin > top {
        return Ok((top as usize, 1.0));
    }
    let frac = if t.bin == 0 { 0.0 } else { t.res / t.bin as f64 };
    Ok((t.bin as usize, frac))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OppConfig {
    /// Number of count bins `B`.
    pub bins: usize,
    /// Pillars whose occupancy strictly exceeds this are active.
    pub active_threshold: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for OppConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            active_threshold: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

const HEADS: [(&str, Option<usize>); 4] = [("occupancy", Some(1)), ("attrs", Some(5)), ("bins", None), ("residuals", None)];

/// Initial occupancy probability, set through the occupancy head's bias.
pub const OCCUPANCY_PRIOR: f64 = 0.01;

pub fn init_opp(store: &mut ParamStore, bev_channels: usize, bins: usize, seed: u64) -> Result<()> {
    if bins == 0 {
        return Err(Error::Config("bin count must be positive".into()));
    }
    for (head, out) in HEADS {
        let out = out.unwrap_or(bins);
        let wname = format!("opp.{head}.weight");
        store.insert(&wname, kaiming_uniform(&[out, bev_channels, 1, 1], bev_channels, seed, &wname))?;
        let bias = if head == "occupancy" {
            Tensor::full(&[out], logit(OCCUPANCY_PRIOR))
        } else {
            Tensor::zeros(&[out])
        };
        store.insert(&format!("opp.{head}.bias"), bias)?;
    }
    Ok(())
}

/// Graph handles of the four OPP heads.
#[derive(Debug, Clone, Copy)]
pub struct OppHeads {
    /// `(1, H, W)` occupancy probabilities.
    pub p_occ: Var,
    /// `(5, H, W)` raw attribute outputs; see [`decode_attrs`].
    pub attrs_raw: Var,
    /// `(B, H, W)` bin logits.
    pub bin_logits: Var,
    /// `(B, H, W)` residual fractions in `(0, 1)`.
    pub residuals: Var,
}

fn head(g: &mut Graph, store: &ParamStore, bev: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("opp.{name}.weight"))?;
    let b = g.param(store, &format!("opp.{name}.bias"))?;
    g.conv2d(bev, w, Some(b), 1, 0)
}

pub fn opp_forward(g: &mut Graph, bev: Var, store: &ParamStore) -> Result<OppHeads> {
    if g.shape(bev).len() != 3 {
        return Err(Error::shape("opp_forward", format!("bev {:?}", g.shape(bev))));
    }
    let occ = head(g, store, bev, "occupancy")?;
    let p_occ = g.sigmoid(occ);
    let attrs_raw = head(g, store, bev, "attrs")?;
    let bin_logits = head(g, store, bev, "bins")?;
    let res = head(g, store, bev, "residuals")?;
    let residuals = g.sigmoid(res);
    Ok(OppHeads {
        p_occ,
        attrs_raw,
        bin_logits,
        residuals,
    })
}

/// Fixed gain on the RCS and velocity channels; speeds up fitting of their
/// physical ranges.
pub const ATTR_GAIN: f64 = 3.0;

/// Physical attributes `(x_c, y_c, rcs_c, vx_c, vy_c)` at the given cells,
/// shape `[N, 5]`. Positions are the pillar center plus a tanh-bounded offset
/// of at most half a pillar; the other channels are scaled by `ATTR_GAIN`.
pub fn decode_attrs(g: &mut Graph, heads: &OppHeads, cells: &[usize], grid: &GridConfig) -> Result<Var> {
    let raw = g.gather_cells(heads.attrs_raw, cells)?;
    let xy = g.select_cols(raw, &[0, 1])?;
    let xy = g.tanh(xy);
    let mut scale = Vec::with_capacity(2 * cells.len());
    let mut shift = Vec::with_capacity(2 * cells.len());
    for &c in cells {
        let (cx, cy) = grid.center(grid.index_of_flat(c));
        scale.extend([0.5 * grid.pillar_dx, 0.5 * grid.pillar_dy]);
        shift.extend([cx, cy]);
    }
    let xy = g.affine(xy, &scale, &shift)?;
    let rest = g.select_cols(raw, &[2, 3, 4])?;
    let rest = g.scale(rest, ATTR_GAIN);
    g.concat_cols(&[xy, rest])
}

/// Plain values of the OPP heads for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct OppOutput {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    /// Row-major `(H, W)` occupancy probabilities.
    pub p_occ: Vec<f64>,
    /// `(5, H, W)` decoded attributes.
    pub attrs: Tensor,
    pub bin_logits: Tensor,
    /// `(B, H, W)` residual fractions.
    pub residuals: Tensor,
}

impl OppOutput {
    pub fn from_graph(g: &mut Graph, heads: &OppHeads, grid: &GridConfig) -> Result<Self> {
        let (h, w) = grid.dims()?;
        let all: Vec<usize> = (0..h * w).collect();
        let dec = decode_attrs(g, heads, &all, grid)?;
        // [HW, 5] -> (5, H, W)
        let rows = g.data(dec);
        let mut attrs = vec![0.0; 5 * h * w];
        for cell in 0..h * w {
            for ch in 0..5 {
                attrs[ch * h * w + cell] = rows[cell * 5 + ch];
            }
        }
        let bins = g.shape(heads.bin_logits)[0];
        Ok(Self {
            height: h,
            width: w,
            bins,
            p_occ: g.data(heads.p_occ).to_vec(),
            attrs: Tensor::from_parts(vec![5, h, w], attrs),
            bin_logits: g.value(heads.bin_logits).clone(),
            residuals: g.value(heads.residuals).clone(),
        })
    }

    /// Builds an output directly from raw head values (no network): `occ`
    /// and `attr_raw` are pre-activation, `res_raw` is pre-sigmoid.
    pub fn from_raw(grid: &GridConfig, occ_logits: &[f64], attr_raw: &[f64], bin_logits: &[f64], res_raw: &[f64]) -> Result<Self> {
        let (h, w) = grid.dims()?;
        let hw = h * w;
        if occ_logits.len() != hw || attr_raw.len() != 5 * hw || bin_logits.len() % hw != 0 || res_raw.len() != bin_logits.len() {
            return Err(Error::shape("OppOutput::from_raw", "head sizes do not match the grid"));
        }
        let bins = bin_logits.len() / hw;
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_parts(vec![1, h, w], occ_logits.to_vec()));
        let p_occ = g.sigmoid(p);
        let attrs_raw = g.constant(Tensor::from_parts(vec![5, h, w], attr_raw.to_vec()));
        let bl = g.constant(Tensor::from_parts(vec![bins, h, w], bin_logits.to_vec()));
        let r = g.constant(Tensor::from_parts(vec![bins, h, w], res_raw.to_vec()));
        let residuals = g.sigmoid(r);
        let heads = OppHeads {
            p_occ,
            attrs_raw,
            bin_logits: bl,
            residuals,
        };
        Self::from_graph(&mut g, &heads, grid)
    }

    pub fn attrs_at(&self, flat: usize) -> [f64; 5] {
        let hw = self.height * self.width;
        let d = self.attrs.data();
        [d[flat], d[hw + flat], d[2 * hw + flat], d[3 * hw + flat], d[4 * hw + flat]]
    }

    /// `(bin*, K')` at a cell: the arg-max bin (lowest index on ties) and the
    /// decoded count from that bin's residual.
    pub fn count_at(&self, flat: usize) -> (usize, u64) {
        let hw = self.height * self.width;
        let logits = self.bin_logits.data();
        let mut best = 0;
        for b in 1..self.bins {
            if logits[b * hw + flat] > logits[best * hw + flat] {
                best = b;
            }
        }
        let res = self.residuals.data()[best * hw + flat] * best as f64;
        (best, decode_count(best as u32, res))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivePillar {
    pub index: PillarIndex,
    pub flat: usize,
    pub p_occ: f64,
    /// Decoded `(x_c, y_c, rcs_c, vx_c, vy_c)`.
    pub attrs: [f64; 5],
    /// Number of points to generate, `K' >= 1`.
    pub count: u64,
}

/// Active pillars in row-major cell order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivePillarSet {
    pub entries: Vec<ActivePillar>,
}

impl ActivePillarSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_points(&self) -> u64 {
        self.entries.iter().map(|e| e.count).sum()
    }
}

/// Pillars with `p_occ > threshold` (strict).
pub fn select_active(out: &OppOutput, threshold: f64) -> ActivePillarSet {
    let entries = out
        .p_occ
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(flat, &p)| ActivePillar {
            index: PillarIndex {
                row: flat / out.width,
                col: flat % out.width,
            },
            flat,
            p_occ: p,
            attrs: out.attrs_at(flat),
            count: out.count_at(flat).1,
        })
        .collect();
    ActivePillarSet { entries }
}

/// Scalar handles of the OPP loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct OppLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub bin: Var,
}

/// Focal occupancy loss over every pillar plus, on occupied pillars only,
/// smooth-L1 attribute regression and the count loss (focal on the softmax
/// probability of the target bin and smooth-L1 on its residual).
pub fn opp_loss(g: &mut Graph, heads: &OppHeads, target: &TargetPillarImage, grid: &GridConfig, cfg: &OppConfig) -> Result<OppLoss> {
    let hw = target.height * target.width;
    if g.value(heads.p_occ).len() != hw {
        return Err(Error::shape("opp_loss", "occupancy map does not match the target image"));
    }
    let bins = g.shape(heads.bin_logits)[0];
    let occ_target: Vec<f64> = target.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    let cls = g.focal_elems(heads.p_occ, &occ_target, cfg.focal_alpha, cfg.focal_gamma)?;
    let cells = target.occupied_cells();
    // summed over all pillars, normalized by the occupied count
    let cls = g.weighted_sum(cls, None, 1.0 / cells.len().max(1) as f64)?;

    let (reg, bin) = if cells.is_empty() {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    } else {
        let pred = decode_attrs(g, heads, &cells, grid)?;
        let want: Vec<f64> = cells.iter().flat_map(|&c| target.means(c)).collect();
        let reg = g.smooth_l1_elems(pred, &want, cfg.smooth_l1_beta)?;
        let reg = g.mean(reg);

        let mut picks = Vec::with_capacity(cells.len());
        let mut fracs = Vec::with_capacity(cells.len());
        for (n, &c) in cells.iter().enumerate() {
            let (b, frac) = count_training_target(target.count(c) as u64, bins)?;
            picks.push(n * bins + b);
            fracs.push(frac);
        }
        let n = cells.len();
        let logits = g.gather_cells(heads.bin_logits, &cells)?;
        let probs = g.softmax(logits)?;
        let probs = g.reshape(probs, &[n * bins, 1])?;
        let p_true = g.gather_rows(probs, &picks)?;
        let cls_bin = g.focal_elems(p_true, &vec![1.0; n], cfg.focal_alpha, cfg.focal_gamma)?;
        let cls_bin = g.mean(cls_bin);
        let res = g.gather_cells(heads.residuals, &cells)?;
        let res = g.reshape(res, &[n * bins, 1])?;
        let res = g.gather_rows(res, &picks)?;
        let res = g.smooth_l1_elems(res, &fracs, cfg.smooth_l1_beta)?;
        let res = g.mean(res);
        (reg, g.add(cls_bin, res)?)
    };
    let total = g.add_all(&[cls, reg, bin])?;
    Ok(OppLoss { total, cls, reg, bin })
}

/// Inverse sigmoid, for building head values in tests and fixtures.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
