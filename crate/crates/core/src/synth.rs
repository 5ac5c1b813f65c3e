//! Synthetic paired radar scenes.
//!
//! A scene is a handful of objects, each a 2D Gaussian cluster whose points
//! share one velocity and one RCS level. The dense cluster samples form the target cloud.
//! The source cloud keeps a random subset of them, rotates each kept point
//! about the sensor origin by a small random azimuth error, perturbs RCS and
//! adds uniform clutter. Every scene depends only on `(seed, scene_index)`.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::io::write_scene_file;
use crate::rng::stream_rng;
use crate::types::{RadarPoint, ScenePair};

pub const GENERATOR_VERSION: &str = "pillargen-synth 1";
pub const RCS_MIN: f64 = -10.0;
pub const RCS_MAX: f64 = 30.0;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Inclusive object count range.
    pub n_objects: [usize; 2],
    /// Uniform clutter points added to every source cloud.
    pub clutter_rate: usize,
    /// Standard deviation of an object's cluster along each axis, meters.
    pub object_extent: f64,
    /// Inclusive range for the relative size of each object.
    pub target_points_per_object: [usize; 2],
    /// When set, per-object counts are rescaled to sum to exactly this.
    pub target_total: Option<usize>,
    pub source_keep_ratio: f64,
    pub azimuth_sigma: f64,
    pub rcs_sigma: f64,
    pub velocity_range: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: [4, 8],
            clutter_rate: 20,
            object_extent: 1.5,
            target_points_per_object: [60, 180],
            target_total: Some(840),
            source_keep_ratio: 0.5,
            azimuth_sigma: 0.02,
            rcs_sigma: 2.0,
            velocity_range: 15.0,
        }
    }
}

impl SceneSpec {
    /// No noise, no clutter, everything kept: source equals target.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            seed,
            clutter_rate: 0,
            source_keep_ratio: 1.0,
            azimuth_sigma: 0.0,
            rcs_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_objects[0] == 0 || self.n_objects[0] > self.n_objects[1] {
            return bad(format!("n_objects range {:?} must be non-empty and start at >= 1", self.n_objects));
        }
        let [lo, hi] = self.target_points_per_object;
        if lo == 0 || lo > hi {
            return bad(format!("target_points_per_object range {:?} must be non-empty and start at >= 1", [lo, hi]));
        }
        if self.target_total == Some(0) {
            return bad("target_total must be positive".into());
        }
        if !(self.source_keep_ratio > 0.0 && self.source_keep_ratio <= 1.0) {
            return bad(format!("source_keep_ratio {} must lie in (0, 1]", self.source_keep_ratio));
        }
        for (name, v) in [
            ("object_extent", self.object_extent),
            ("azimuth_sigma", self.azimuth_sigma),
            ("rcs_sigma", self.rcs_sigma),
            ("velocity_range", self.velocity_range),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Splits `total` proportionally to `weights` with the largest-remainder
/// rule (ties to the earlier object).
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * total as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

pub fn scene_id(index: u64) -> String {
    format!("scene-{index:05}")
}

pub fn gen_scene(spec: &SceneSpec, grid: &GridConfig, scene_index: u64) -> ScenePair {
    let mut rng = stream_rng(spec.seed, scene_index);
    let n_obj = rng.random_range(spec.n_objects[0]..=spec.n_objects[1]);
    let [lo, hi] = spec.target_points_per_object;
    let weights: Vec<usize> = (0..n_obj).map(|_| rng.random_range(lo..=hi)).collect();
    let counts = match spec.target_total {
        Some(t) => apportion(&weights, t),
        None => weights,
    };

    let margin_x = (2.0 * spec.object_extent).min(0.25 * (grid.x_max - grid.x_min));
    let margin_y = (2.0 * spec.object_extent).min(0.25 * (grid.y_max - grid.y_min));
    // keep samples strictly inside the half-open grid
    let inner = |v: f64, lo: f64, hi: f64| v.clamp(lo, hi - 1e-6 * (hi - lo));

    let mut target = Vec::new();
    for &k in &counts {
        let cx = rng.random_range(grid.x_min + margin_x..grid.x_max - margin_x);
        let cy = rng.random_range(grid.y_min + margin_y..grid.y_max - margin_y);
        let level = rng.random_range(RCS_MIN + 5.0..RCS_MAX - 5.0);
        let vx = rng.random_range(-spec.velocity_range..=spec.velocity_range);
        let vy = rng.random_range(-spec.velocity_range..=spec.velocity_range);
        for _ in 0..k {
            let x = inner(cx + normal(&mut rng, spec.object_extent), grid.x_min, grid.x_max);
            let y = inner(cy + normal(&mut rng, spec.object_extent), grid.y_min, grid.y_max);
            let z = rng.random_range(0.0..2.0);
            target.push(RadarPoint::new(x, y, z, level, vx, vy));
        }
    }

    let mut source = Vec::new();
    for p in &target {
        if !rng.random_bool(spec.source_keep_ratio) {
            continue;
        }
        let mut q = *p;
        let theta = normal(&mut rng, spec.azimuth_sigma);
        if theta != 0.0 {
            let (s, c) = theta.sin_cos();
            q.x = p.x * c - p.y * s;
            q.y = p.x * s + p.y * c;
        }
        let dr = normal(&mut rng, spec.rcs_sigma);
        if dr != 0.0 {
            q.rcs = (p.rcs + dr).clamp(RCS_MIN, RCS_MAX);
        }
        source.push(q);
    }
    // clutter may spill up to 5% beyond the grid
    let sx = 0.05 * (grid.x_max - grid.x_min);
    let sy = 0.05 * (grid.y_max - grid.y_min);
    for _ in 0..spec.clutter_rate {
        source.push(RadarPoint::new(
            rng.random_range(grid.x_min - sx..grid.x_max + sx),
            rng.random_range(grid.y_min - sy..grid.y_max + sy),
            rng.random_range(0.0..2.0),
            rng.random_range(RCS_MIN..0.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
    }
    ScenePair::new(scene_id(scene_index), source, target)
}

/// Scenes `0..n_scenes`, generated with up to `threads` workers.
pub fn gen_scenes(spec: &SceneSpec, grid: &GridConfig, n_scenes: usize, threads: usize) -> Vec<ScenePair> {
    let idx: Vec<u64> = (0..n_scenes as u64).collect();
    crate::parallel::map_ordered(&idx, threads, |&i| gen_scene(spec, grid, i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub n_scenes: usize,
    pub grid: GridConfig,
    pub spec: SceneSpec,
}

/// Writes `dataset.jsonl` and `manifest.json` into `dir`, creating it.
pub fn gen_dataset(spec: &SceneSpec, grid: &GridConfig, n_scenes: usize, dir: impl AsRef<Path>, threads: usize) -> Result<Manifest> {
    spec.validate()?;
    grid.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = gen_scenes(spec, grid, n_scenes, threads);
    write_scene_file(&scenes, dir.join(DATASET_FILE))?;
    let manifest = Manifest {
        generator: GENERATOR_VERSION.to_string(),
        n_scenes,
        grid: *grid,
        spec: spec.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Rebuilds the dataset described by a manifest into `dir`.
pub fn regenerate(manifest: &Manifest, dir: impl AsRef<Path>, threads: usize) -> Result<Manifest> {
    if manifest.generator != GENERATOR_VERSION {
        return Err(Error::Config(format!(
            "manifest was written by '{}', this is '{GENERATOR_VERSION}'",
            manifest.generator
        )));
    }
    gen_dataset(&manifest.spec, &manifest.grid, manifest.n_scenes, dir, threads)
}
