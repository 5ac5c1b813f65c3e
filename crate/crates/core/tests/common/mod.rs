//! Finite-difference oracles shared by the gradient and acceptance suites.
#![allow(dead_code)]

use std::ops::Range;

use rand::Rng;

use pillargen::grid::{build_target_image, GridConfig};
use pillargen::losses::{apply_global, apply_local, bce, focal_loss, global_targets, gt_by_pillar, in_grid, local_targets, match_pillars, smooth_l1};
use pillargen::nn::{Graph, ParamStore, Tensor, Var};
use pillargen::opp::{opp_forward, opp_loss, OppConfig, OppOutput};
use pillargen::ppg::{ppg_forward, PpgVars};
use pillargen::rng::stream_rng;
use pillargen::train::{scene_loss_with, PreparedScene};
use pillargen::{ModelConfig, Phase, PillarGen, RadarPoint, Result, ScenePair};

pub const H: f64 = 1e-5;
/// Step used to re-measure entries whose `H` step straddles a kink.
pub const H_FINE: f64 = 1e-7;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub max_rel: f64,
    pub tol: f64,
    pub entries: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

/// `max |a - n| / max(max |a|, max |n|)` over one tensor; 0 when both are
/// identically zero.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

/// Re-measures, at `H_FINE`, entries that disagree at `H`. A central
/// difference whose step crosses a ReLU, abs or clamp kink is off by a
/// finite amount; a wrong analytic gradient stays wrong at any step.
fn refine(analytic: &[f64], numeric: &mut [f64], tol: f64, fd: impl Fn(usize, f64) -> f64) {
    let scale = analytic.iter().chain(numeric.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, n) in numeric.iter_mut().enumerate() {
        if (analytic[i] - *n).abs() >= 0.1 * tol * scale {
            *n = fd(i, H_FINE);
        }
    }
}

pub fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = stream_rng(seed, 77);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Deterministic weights that turn any output into a generic scalar.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let w = uniform(seed ^ 0xabc, &[n], -1.0, 1.0);
    g.weighted_sum(y, Some(w.data()), 1.0)
}

/// Checks the gradient of `build` with respect to every entry of every
/// input tensor.
pub fn check_inputs(name: &str, inputs: &[Tensor], tol: f64, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Check {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars).expect("forward");
    let grads = g.backward(out);
    let mut max_rel = 0.0f64;
    let mut entries = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let fd = |i: usize, h: f64| {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&xs);
            (up - down) / (2.0 * h)
        };
        let mut numeric: Vec<f64> = (0..inputs[k].len()).map(|i| fd(i, H)).collect();
        refine(&analytic, &mut numeric, tol, fd);
        entries += numeric.len();
        max_rel = max_rel.max(rel_error(&analytic, &numeric));
    }
    Check {
        name: name.to_string(),
        max_rel,
        tol,
        entries,
    }
}

/// Checks the gradient of `build` with respect to the parameters of `store`
/// whose names satisfy `select`. At most `per_tensor` evenly spaced entries
/// of each tensor are probed.
pub fn check_params(
    name: &str,
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    per_tensor: usize,
    tol: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Check {
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let out = build(&mut g, s).expect("forward");
        g.value(out).item()
    };
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = build(&mut g, &work).expect("forward");
    let grads = g.backward(out);
    g.accumulate_param_grads(&grads, &mut work);

    let mut max_rel = 0.0f64;
    let mut entries = 0;
    let names: Vec<String> = store.names().filter(|n| select(n)).map(str::to_string).collect();
    assert!(!names.is_empty(), "{name}: no parameters selected");
    for pname in names {
        let idx = work.index_of(&pname).unwrap();
        let len = work.get(idx).value.len();
        let step = len.div_ceil(per_tensor).max(1);
        let probe: Vec<usize> = (0..len).step_by(step).collect();
        let analytic: Vec<f64> = probe.iter().map(|&i| work.get(idx).grad[i]).collect();
        let fd = |j: usize, h: f64| {
            let i = probe[j];
            let mut s = store.clone();
            let orig = s.get(idx).value.data()[i];
            s.get_mut(idx).value.data_mut()[i] = orig + h;
            let up = eval(&s);
            s.get_mut(idx).value.data_mut()[i] = orig - h;
            let down = eval(&s);
            (up - down) / (2.0 * h)
        };
        let mut numeric: Vec<f64> = (0..probe.len()).map(|j| fd(j, H)).collect();
        refine(&analytic, &mut numeric, tol, fd);
        entries += probe.len();
        max_rel = max_rel.max(rel_error(&analytic, &numeric));
    }
    Check {
        name: name.to_string(),
        max_rel,
        tol,
        entries,
    }
}

/// Adds uniform noise in `[-amp, amp]` to every parameter so that no layer
/// sits at an exactly zero initialization.
pub fn jitter(store: &mut ParamStore, seed: u64, amp: f64) {
    let mut rng = stream_rng(seed, 99);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

fn random_points(seed: u64, n: usize, grid: &GridConfig) -> Vec<RadarPoint> {
    let mut rng = stream_rng(seed, 5);
    (0..n)
        .map(|_| {
            RadarPoint::new(
                rng.random_range(grid.x_min + 0.05..grid.x_max - 0.05),
                rng.random_range(grid.y_min + 0.05..grid.y_max - 0.05),
                rng.random_range(0.0..2.0),
                rng.random_range(-5.0..15.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            )
        })
        .collect()
}

/// 4x4 grid of 1 m pillars.
pub fn tiny_grid(channels: usize) -> GridConfig {
    GridConfig {
        x_min: 0.0,
        x_max: 4.0,
        y_min: 0.0,
        y_max: 4.0,
        pillar_dx: 1.0,
        pillar_dy: 1.0,
        channels,
    }
}

/// Threshold in the widest gap between the top occupancy values, so that
/// perturbations of size `H` cannot change the active set.
pub fn stable_threshold(p_occ: &[f64], max_active: usize) -> f64 {
    let mut p = p_occ.to_vec();
    p.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let (k, gap) = (1..=max_active.min(p.len() - 1))
        .map(|k| (k, p[k - 1] - p[k]))
        .fold((1, f64::MIN), |best, c| if c.1 > best.1 { c } else { best });
    assert!(gap > 1e-4, "occupancy values too close for a stable active set");
    0.5 * (p[k - 1] + p[k])
}

/// Small model and scene on the 4x4 grid, with every parameter jittered and
/// the active threshold placed in a stable gap.
pub fn tiny_setup(seed: u64) -> (PillarGen, ScenePair) {
    let grid = tiny_grid(3);
    let cfg = ModelConfig {
        bins: 3,
        ppg_hidden: 6,
        ..ModelConfig::default()
    };
    let mut model = PillarGen::new(grid, cfg, seed, true).unwrap();
    jitter(&mut model.store, seed, 0.3);
    let scene = ScenePair::new("grad", random_points(seed + 1, 14, &grid), random_points(seed + 2, 20, &grid));
    let out = model.opp_output(&scene.source).unwrap();
    model.config.active_threshold = stable_threshold(&out.p_occ, 4);
    (model, scene)
}

// Individual suites. Each returns one `Check` per tensor group.

pub fn linear_checks() -> Vec<Check> {
    let x = uniform(1, &[5, 3], -1.0, 1.0);
    let w = uniform(2, &[4, 3], -1.0, 1.0);
    let b = uniform(3, &[4], -1.0, 1.0);
    vec![
        check_inputs("linear", &[x.clone(), w.clone(), b], OP_TOL, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 1)
        }),
        check_inputs("linear (no bias)", &[x, w], OP_TOL, |g, v| {
            let y = g.linear(v[0], v[1], None)?;
            project(g, y, 2)
        }),
    ]
}

pub fn conv_checks() -> Vec<Check> {
    let x = uniform(4, &[2, 5, 6], -1.0, 1.0);
    let w3 = uniform(5, &[3, 2, 3, 3], -1.0, 1.0);
    let w1 = uniform(6, &[3, 2, 1, 1], -1.0, 1.0);
    let b = uniform(7, &[3], -1.0, 1.0);
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        out.push(check_inputs(
            &format!("conv2d 3x3 stride {stride} pad {pad}"),
            &[x.clone(), w3.clone(), b.clone()],
            OP_TOL,
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(g, y, 3)
            },
        ));
    }
    out.push(check_inputs("conv2d 1x1", &[x, w1, b], OP_TOL, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
        project(g, y, 4)
    }));
    out
}

pub fn activation_checks() -> Vec<Check> {
    let x = uniform(8, &[4, 5], -2.0, 2.0);
    let y = uniform(9, &[4, 5], -2.0, 2.0);
    let img = uniform(10, &[2, 2, 3], -1.0, 1.0);
    let mut out = vec![
        check_inputs("relu", &[x.clone()], OP_TOL, |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 5)
        }),
        check_inputs("sigmoid", &[x.clone()], OP_TOL, |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 6)
        }),
        check_inputs("tanh", &[x.clone()], OP_TOL, |g, v| {
            let y = g.tanh(v[0]);
            project(g, y, 7)
        }),
        check_inputs("square", &[x.clone()], OP_TOL, |g, v| {
            let y = g.square(v[0]);
            project(g, y, 8)
        }),
        check_inputs("abs", &[x.clone()], OP_TOL, |g, v| {
            let y = g.abs(v[0]);
            project(g, y, 9)
        }),
        check_inputs("clamp", &[x.clone()], OP_TOL, |g, v| {
            let y = g.clamp(v[0], -0.7, 0.9);
            project(g, y, 10)
        }),
        check_inputs("softmax", &[x.clone()], OP_TOL, |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, 11)
        }),
    ];
    let scale: Vec<f64> = (0..20).map(|i| 0.5 + 0.1 * i as f64).collect();
    let shift: Vec<f64> = (0..20).map(|i| -1.0 + 0.05 * i as f64).collect();
    out.push(check_inputs("affine and scale", &[x.clone()], OP_TOL, |g, v| {
        let a = g.affine(v[0], &scale, &shift)?;
        let y = g.scale(a, -1.7);
        project(g, y, 12)
    }));
    out.push(check_inputs("add, sub, mul", &[x.clone(), y.clone()], OP_TOL, |g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(v[0], v[1])?;
        let m = g.mul(a, s)?;
        let m2 = g.mul(m, v[1])?;
        project(g, m2, 13)
    }));
    out.push(check_inputs("upsample_nearest", &[img.clone()], OP_TOL, |g, v| {
        let y = g.upsample_nearest(v[0], 2)?;
        project(g, y, 14)
    }));
    out.push(check_inputs("reshape and concat0", &[img.clone(), img.clone()], OP_TOL, |g, v| {
        let c = g.concat0(&[v[0], v[1]])?;
        let r = g.reshape(c, &[12, 2])?;
        let s = g.square(r);
        project(g, s, 15)
    }));
    out.push(check_inputs("concat_cols and select_cols", &[x.clone(), y.clone()], OP_TOL, |g, v| {
        let c = g.concat_cols(&[v[0], v[1]])?;
        let s = g.select_cols(c, &[9, 0, 3, 3, 7])?;
        let sq = g.square(s);
        project(g, sq, 16)
    }));
    out.push(check_inputs("gather_rows", &[x.clone()], OP_TOL, |g, v| {
        let r = g.gather_rows(v[0], &[3, 0, 3, 1])?;
        let sq = g.square(r);
        project(g, sq, 17)
    }));
    out.push(check_inputs("gather_cells and scatter_cells", &[img.clone(), uniform(11, &[3, 2], -1.0, 1.0)], OP_TOL, |g, v| {
        let c = g.gather_cells(v[0], &[5, 0, 2])?;
        let s = g.scatter_cells(v[1], &[1, 4, 3], 2, 3)?;
        let s2 = g.square(s);
        let c2 = g.square(c);
        let a = project(g, s2, 18)?;
        let b = project(g, c2, 19)?;
        g.add(a, b)
    }));
    let segs: Vec<Range<usize>> = vec![0..2, 2..3, 3..4];
    out.push(check_inputs("segment_max", &[x.clone()], OP_TOL, |g, v| {
        let m = g.segment_max(v[0], &segs)?;
        project(g, m, 20)
    }));
    out.push(check_inputs("sum, mean, add_all", &[x, y], OP_TOL, |g, v| {
        let a = g.square(v[0]);
        let s = g.sum(a);
        let m = g.mean(v[1]);
        let w = g.weighted_sum(v[0], None, 0.3)?;
        g.add_all(&[s, m, w])
    }));
    out
}

pub fn bilinear_checks() -> Vec<Check> {
    let fmap = uniform(12, &[2, 4, 5], -1.0, 1.0);
    // generic interior positions plus two outside the map (clamped)
    let mut coords = uniform(13, &[6, 2], 0.1, 3.0).into_data();
    coords.extend([5.6, 1.3, -0.8, 2.2]);
    let coords = Tensor::new(&[8, 2], coords).unwrap();
    vec![check_inputs("bilinear_sample (map and coordinates)", &[fmap, coords], OP_TOL, |g, v| {
        let y = g.bilinear_sample(v[0], v[1])?;
        project(g, y, 21)
    })]
}

/// Coordinate derivative at the midpoint between cells holding 0 and 1.
pub fn bilinear_midpoint_slope() -> f64 {
    let eval = |x: f64| {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
        let c = g.constant(Tensor::new(&[1, 2], vec![x, 0.0]).unwrap());
        let y = g.bilinear_sample(f, c).unwrap();
        g.value(y).item()
    };
    (eval(0.5 + H) - eval(0.5 - H)) / (2.0 * H)
}

pub fn loss_op_checks() -> Vec<Check> {
    let p = uniform(14, &[12], 0.02, 0.98);
    let y: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let soft: Vec<f64> = uniform(15, &[12], 0.0, 1.0).into_data();
    let x = uniform(16, &[12], -3.0, 3.0);
    let t: Vec<f64> = uniform(17, &[12], -3.0, 3.0).into_data();
    vec![
        check_inputs("focal_loss gamma 2", &[p.clone()], OP_TOL, |g, v| focal_loss(g, v[0], &y, 0.25, 2.0)),
        check_inputs("focal_loss gamma 0", &[p.clone()], OP_TOL, |g, v| focal_loss(g, v[0], &y, 0.5, 0.0)),
        check_inputs("focal_loss gamma 1.5", &[p.clone()], OP_TOL, |g, v| focal_loss(g, v[0], &y, 0.7, 1.5)),
        check_inputs("smooth_l1", &[x], OP_TOL, |g, v| smooth_l1(g, v[0], &t, 1.0)),
        check_inputs("bce", &[p], OP_TOL, |g, v| bce(g, v[0], &soft)),
    ]
}

pub fn encoder_and_backbone_checks() -> Vec<Check> {
    let (model, scene) = tiny_setup(21);
    let grid = model.grid;
    let buckets = pillargen::grid::assign_points(&scene.source, &grid);
    let pseudo = uniform(18, &[grid.channels, 4, 4], -1.0, 1.0);
    vec![
        check_params("pillar encoder", &model.store, |n| n.starts_with("encoder."), 64, OP_TOL, |g, s| {
            let p = pillargen::grid::encode_pillars(g, &buckets, s, &grid)?;
            project(g, p, 22)
        }),
        check_inputs("backbone (input)", &[pseudo.clone()], OP_TOL, |g, v| {
            let b = pillargen::backbone::backbone_forward(g, v[0], &model.store)?;
            project(g, b, 23)
        }),
        check_params("backbone (parameters)", &model.store, |n| n.starts_with("backbone."), 48, OP_TOL, |g, s| {
            let x = g.constant(pseudo.clone());
            let b = pillargen::backbone::backbone_forward(g, x, s)?;
            project(g, b, 24)
        }),
    ]
}

pub fn opp_checks() -> Vec<Check> {
    let (model, scene) = tiny_setup(31);
    let grid = model.grid;
    let target = build_target_image(&scene.target, &grid).unwrap();
    let cfg = OppConfig {
        bins: model.config.bins,
        ..model.config.opp()
    };
    let bev = uniform(19, &[model.bev_channels(), 4, 4], 0.0, 1.0);
    vec![
        check_inputs("OPP heads and loss (BEV input)", &[bev.clone()], OP_TOL, |g, v| {
            let heads = opp_forward(g, v[0], &model.store)?;
            Ok(opp_loss(g, &heads, &target, &grid, &cfg)?.total)
        }),
        check_params("OPP heads and loss (parameters)", &model.store, |n| n.starts_with("opp."), 64, OP_TOL, |g, s| {
            let x = g.constant(bev.clone());
            let heads = opp_forward(g, x, s)?;
            Ok(opp_loss(g, &heads, &target, &grid, &cfg)?.total)
        }),
    ]
}

fn ppg_graph(g: &mut Graph, bev: Var, store: &ParamStore, model: &PillarGen) -> Result<PpgVars> {
    let heads = opp_forward(g, bev, store)?;
    let out = OppOutput::from_graph(g, &heads, &model.grid)?;
    ppg_forward(g, bev, &heads, &out, store, &model.grid, model.config.active_threshold, 3, 11)
}

pub fn ppg_checks() -> Vec<Check> {
    let (mut model, _) = tiny_setup(41);
    let bev = uniform(20, &[model.bev_channels(), 4, 4], 0.0, 1.0);
    // active set from this BEV rather than from the scene
    let mut g = Graph::new();
    let b = g.constant(bev.clone());
    let heads = opp_forward(&mut g, b, &model.store).unwrap();
    let out = OppOutput::from_graph(&mut g, &heads, &model.grid).unwrap();
    model.config.active_threshold = stable_threshold(&out.p_occ, 4);
    let model = &model;
    vec![
        check_inputs("PPG heads (BEV input)", &[bev.clone()], OP_TOL, |g, v| {
            let vars = ppg_graph(g, v[0], &model.store, model)?;
            project(g, vars.points.expect("active pillars"), 25)
        }),
        check_params("PPG heads (parameters)", &model.store, |n| n.starts_with("ppg."), 64, OP_TOL, |g, s| {
            let x = g.constant(bev.clone());
            let vars = ppg_graph(g, x, s, model)?;
            project(g, vars.points.expect("active pillars"), 26)
        }),
    ]
}

/// Generated rows spread over two pillars of the 4x4 grid, one with ground
/// truth and one without, plus the matching `PpgVars` layout.
fn loss_fixture() -> (Tensor, PpgVars, ScenePair) {
    use pillargen::opp::{ActivePillar, ActivePillarSet};
    let grid = tiny_grid(2);
    let mut rng = stream_rng(61, 1);
    let mut rows = Vec::new();
    let layout = [(5usize, 4usize), (10, 3), (0, 2)];
    let mut entries = Vec::new();
    let mut ranges = Vec::new();
    let mut start = 0;
    for &(flat, k) in &layout {
        let idx = grid.index_of_flat(flat);
        let (cx, cy) = grid.center(idx);
        for _ in 0..k {
            rows.extend([
                cx + rng.random_range(-0.6..0.6),
                cy + rng.random_range(-0.6..0.6),
                rng.random_range(-5.0..15.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.05..0.95),
            ]);
        }
        entries.push(ActivePillar {
            index: idx,
            flat,
            p_occ: 0.5,
            attrs: [cx, cy, 0.0, 0.0, 0.0],
            count: k as u64,
        });
        ranges.push(start..start + k);
        start += k;
    }
    let points = Tensor::new(&[start, 6], rows).unwrap();
    let mut gt = Vec::new();
    for &(flat, n) in &[(5usize, 3usize), (10, 5), (15, 2)] {
        let (cx, cy) = grid.center(grid.index_of_flat(flat));
        for _ in 0..n {
            gt.push(RadarPoint::new(
                cx + rng.random_range(-0.45..0.45),
                cy + rng.random_range(-0.45..0.45),
                0.5,
                rng.random_range(-5.0..15.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ));
        }
    }
    let vars = PpgVars {
        points: None,
        active: ActivePillarSet { entries },
        ranges,
    };
    (points, vars, ScenePair::new("loss", vec![], gt))
}

pub fn point_loss_checks() -> Vec<Check> {
    let (points, layout, scene) = loss_fixture();
    let grid = tiny_grid(2);
    let target = build_target_image(&scene.target, &grid).unwrap();
    let gt_map = gt_by_pillar(&scene.target, &grid);
    let gt_all = in_grid(&scene.target, &grid);
    let with = |v: Var| PpgVars {
        points: Some(v),
        active: layout.active.clone(),
        ranges: layout.ranges.clone(),
    };
    // assignments and score targets are constants of the loss: take them at
    // the unperturbed point
    let mut g = Graph::new();
    let base = with(g.constant(points.clone()));
    let m = match_pillars(&base.active, &target);
    let local = local_targets(&g, &base, &m, &gt_map, pillargen::losses::D_STD).unwrap();
    let global = global_targets(&g, &base, &gt_all).unwrap();
    assert!(!local.rows.is_empty() && !global.rows.is_empty());
    vec![
        check_inputs("local loss", &[points.clone()], OP_TOL, |g, v| Ok(apply_local(g, &with(v[0]), &local)?.total)),
        check_inputs("global loss", &[points], OP_TOL, |g, v| apply_global(g, &with(v[0]), &global)),
    ]
}

pub fn composite_checks() -> Vec<Check> {
    let (model, scene) = tiny_setup(51);
    let prepared = PreparedScene::new(&scene, &model).unwrap();
    let mut g = Graph::new();
    let (_, fixed) = scene_loss_with(&mut g, &model, &prepared, Phase::E2e, None).unwrap();
    let fixed = fixed.unwrap();
    assert!(!fixed.local.rows.is_empty(), "no positive pillars in the fixture");
    vec![check_params("end-to-end total loss on a 4x4 grid", &model.store, |_| true, usize::MAX, COMPOSITE_TOL, |g, s| {
        let probe = PillarGen {
            store: s.clone(),
            ..model.clone()
        };
        Ok(scene_loss_with(g, &probe, &prepared, Phase::E2e, Some(&fixed))?.0.total)
    })]
}

/// Every gradient check, in a fixed order.
pub fn all_checks() -> Vec<Check> {
    let mut all = Vec::new();
    all.extend(linear_checks());
    all.extend(conv_checks());
    all.extend(activation_checks());
    all.extend(bilinear_checks());
    all.extend(loss_op_checks());
    all.extend(encoder_and_backbone_checks());
    all.extend(opp_checks());
    all.extend(ppg_checks());
    all.extend(point_loss_checks());
    all.extend(composite_checks());
    all
}

pub fn assert_checks(checks: &[Check]) {
    for c in checks {
        assert!(c.passed(), "{}: relative error {:.3e} >= {:.0e} over {} entries", c.name, c.max_rel, c.tol, c.entries);
    }
}
