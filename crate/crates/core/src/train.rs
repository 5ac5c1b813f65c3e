//! Two-phase training, evaluation and dataset inference.
//!
//! Phase `opp` fits the encoder, backbone and occupancy heads on the
//! occupancy loss alone. Phase `e2e` adds the point generation heads and
//! optimizes the full objective. Scenes are processed one at a time and
//! their gradients accumulated over `batch_size` scenes per optimizer step.
//! Training is always serial, so a fixed seed gives identical checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::grid::{build_target_image, PillarIndex, TargetPillarImage};
use crate::losses::{
    apply_global, apply_local, global_targets, gt_by_pillar, in_grid, local_targets, match_pillars, total_loss, GlobalTargets, LocalTargets, LossComponents,
    TotalLoss, CSV_HEADER,
};
use crate::metrics::{evaluate_dataset, AttributedPoint2D, MetricReport, SceneMetrics};
use crate::model::{is_ppg_param, PillarGen};
use crate::nn::checkpoint::{self, Checkpoint};
use crate::nn::{adam_step, clip_grad_norm, AdamConfig, Graph, OneCycle, OptimState};
use crate::opp::{opp_loss, select_active};
use crate::parallel::map_ordered;
use crate::types::{RadarPoint, SceneGeneration, ScenePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Opp,
    E2e,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opp" => Ok(Phase::Opp),
            "e2e" => Ok(Phase::E2e),
            other => Err(Error::Config(format!("unknown phase '{other}', expected opp or e2e"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Opp => "opp",
            Phase::E2e => "e2e",
        })
    }
}

/// Per-scene data that does not change during training.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub pair: ScenePair,
    pub target_image: TargetPillarImage,
    pub gt_pillars: BTreeMap<PillarIndex, Vec<RadarPoint>>,
    pub gt_in_grid: Vec<RadarPoint>,
}

impl PreparedScene {
    pub fn new(pair: &ScenePair, model: &PillarGen) -> Result<Self> {
        Ok(Self {
            target_image: build_target_image(&pair.target, &model.grid)?,
            gt_pillars: gt_by_pillar(&pair.target, &model.grid),
            gt_in_grid: in_grid(&pair.target, &model.grid),
            pair: pair.clone(),
        })
    }
}

/// Builds the training objective for one scene.
/// Assignment constants of the generation losses for one scene pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenTargets {
    pub local: LocalTargets,
    pub global: GlobalTargets,
}

pub fn scene_loss(g: &mut Graph, model: &PillarGen, scene: &PreparedScene, phase: Phase) -> Result<TotalLoss> {
    Ok(scene_loss_with(g, model, scene, phase, None)?.0)
}

/// Scene loss that reuses `fixed` assignment constants when given instead
/// of recomputing them, and returns the constants it used. The active set
/// must be unchanged for fixed constants to apply.
pub fn scene_loss_with(
    g: &mut Graph,
    model: &PillarGen,
    scene: &PreparedScene,
    phase: Phase,
    fixed: Option<&GenTargets>,
) -> Result<(TotalLoss, Option<GenTargets>)> {
    let trunk = model.trunk(g, &scene.pair.source)?;
    let opp = opp_loss(g, &trunk.heads, &scene.target_image, &model.grid, &model.config.opp())?;
    if phase == Phase::Opp {
        return Ok((total_loss(g, opp, None, None)?, None));
    }
    let (_, vars) = model.generate(g, &trunk, &scene.pair.scene_id)?;
    let targets = match fixed {
        Some(t) => t.clone(),
        None => {
            let matched = match_pillars(&vars.active, &scene.target_image);
            GenTargets {
                local: local_targets(g, &vars, &matched, &scene.gt_pillars, model.config.d_std)?,
                global: global_targets(g, &vars, &scene.gt_in_grid)?,
            }
        }
    };
    let local = apply_local(g, &vars, &targets.local)?;
    let global = apply_global(g, &vars, &targets.global)?;
    Ok((total_loss(g, opp, Some(local), Some(global))?, Some(targets)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PillarGen,
    /// Mean loss components of every epoch, in order.
    pub epochs: Vec<LossComponents>,
}

impl TrainOutcome {
    pub fn first_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |c| c.total)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |c| c.total)
    }
}

/// Model for `phase`, warm-started from `init` where given.
///
/// For phase `e2e` an initial checkpoint without generation parameters
/// supplies everything else and the generation heads start fresh.
pub fn initial_model(cfg: &Config, phase: Phase, init: Option<&Checkpoint>) -> Result<PillarGen> {
    let seed = cfg.train.seed;
    match (phase, init) {
        (Phase::Opp, None) => PillarGen::new(cfg.grid, cfg.model, seed, false),
        (Phase::Opp, Some(ck)) => {
            let mut m = PillarGen::new(cfg.grid, cfg.model, seed, false)?;
            checkpoint::load_into(ck, &mut m.store, |_| true)?;
            Ok(m)
        }
        (Phase::E2e, None) => {
            log::info!("phase e2e without an initial checkpoint: all parameters randomly initialized");
            PillarGen::new(cfg.grid, cfg.model, seed, true)
        }
        (Phase::E2e, Some(ck)) => {
            let mut m = PillarGen::new(cfg.grid, cfg.model, seed, true)?;
            if ck.names().any(is_ppg_param) {
                checkpoint::load_into(ck, &mut m.store, |_| true)?;
            } else {
                checkpoint::load_into(ck, &mut m.store, |n| !is_ppg_param(n))?;
                log::info!("generation heads freshly initialized");
            }
            Ok(m)
        }
    }
}

pub fn train(cfg: &Config, phase: Phase, scenes: &[ScenePair], init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    train_with(cfg, phase, scenes, init, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean components)` after each
/// epoch (epochs count from 1).
pub fn train_with(
    cfg: &Config,
    phase: Phase,
    scenes: &[ScenePair],
    init: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(usize, &LossComponents),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut model = initial_model(cfg, phase, init)?;
    let prepared: Vec<PreparedScene> = scenes.iter().map(|s| PreparedScene::new(s, &model)).collect::<Result<_>>()?;
    let tc = cfg.train;
    let adam = AdamConfig {
        weight_decay: tc.weight_decay,
        ..AdamConfig::default()
    };
    let schedule = OneCycle {
        max_lr: tc.max_lr,
        pct_start: tc.pct_start,
        ..OneCycle::default()
    };
    let steps_per_epoch = prepared.len().div_ceil(tc.batch_size);
    let last_step = tc.epochs * steps_per_epoch - 1;
    let mut state = OptimState::new(&model.store);
    let mut step = 0;
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let mut sums = [0.0; 8];
        for batch in prepared.chunks(tc.batch_size) {
            model.store.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for scene in batch {
                let mut g = Graph::new();
                let loss = scene_loss(&mut g, &model, scene, phase)?;
                let c = loss.components(&g);
                if !c.total.is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite loss at epoch {epoch} on scene {}",
                        scene.pair.scene_id
                    )));
                }
                for (s, v) in sums.iter_mut().zip(c.as_array()) {
                    *s += v;
                }
                let scaled = g.scale(loss.total, w);
                let grads = g.backward(scaled);
                g.accumulate_param_grads(&grads, &mut model.store);
            }
            clip_grad_norm(&mut model.store, tc.clip_norm);
            let lr = schedule.lr(step, last_step)?;
            adam_step(&mut model.store, &mut state, lr, &adam)?;
            step += 1;
        }
        let mean = LossComponents::from_array(sums.map(|s| s / prepared.len() as f64));
        log::debug!("{phase} epoch {epoch}: loss {:.6}", mean.total);
        on_epoch(epoch, &mean);
        history.push(mean);
    }
    Ok(TrainOutcome { model, epochs: history })
}

/// Writes the per-epoch loss log; the `step` column is the epoch number.
pub fn write_loss_log(path: impl AsRef<Path>, epochs: &[LossComponents]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, c) in epochs.iter().enumerate() {
        out.push_str(&c.csv_row(i + 1));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint for the model shape described by `cfg`; every stored
/// name must be expected and every expected name present.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &Config) -> Result<PillarGen> {
    PillarGen::load(path, cfg.grid, cfg.model)
}

/// Score-filtered generations, one per scene, in input order.
pub fn infer_dataset(model: &PillarGen, scenes: &[ScenePair], threshold: f64, threads: usize) -> Result<Vec<SceneGeneration>> {
    map_ordered(scenes, threads, |s| {
        model.infer_with_threshold(&s.source, &s.scene_id, threshold).map(|g| SceneGeneration {
            scene_id: s.scene_id.clone(),
            points: g.points,
        })
    })
    .into_iter()
    .collect()
}

fn attributed<'a, T: 'a>(pts: impl IntoIterator<Item = &'a T>) -> Vec<AttributedPoint2D>
where
    AttributedPoint2D: From<&'a T>,
{
    pts.into_iter().map(AttributedPoint2D::from).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub per_scene: Vec<Option<SceneMetrics>>,
    pub generations: Vec<SceneGeneration>,
}

/// Generates every scene and scores it against its target cloud.
pub fn run_eval(model: &PillarGen, scenes: &[ScenePair], threads: usize) -> Result<EvalOutcome> {
    let generations = infer_dataset(model, scenes, model.config.score_threshold, threads)?;
    let pairs: Vec<_> = generations
        .iter()
        .zip(scenes)
        .map(|(g, s)| (attributed(&g.points), attributed(&s.target.points)))
        .collect();
    let (report, per_scene) = evaluate_dataset(&pairs, threads)?;
    Ok(EvalOutcome {
        report,
        per_scene,
        generations,
    })
}

/// The identity baseline: source clouds scored as if they were generated.
pub fn source_baseline(scenes: &[ScenePair], threads: usize) -> Result<MetricReport> {
    let pairs: Vec<_> = scenes
        .iter()
        .map(|s| (attributed(&s.source.points), attributed(&s.target.points)))
        .collect();
    Ok(evaluate_dataset(&pairs, threads)?.0)
}

/// Mean over scenes of the IoU between predicted active pillars and ground
/// truth occupancy. A scene where both sets are empty counts as 1.
pub fn occupancy_iou(model: &PillarGen, scenes: &[ScenePair]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no scenes".into()));
    }
    let mut total = 0.0;
    for s in scenes {
        let out = model.opp_output(&s.source)?;
        let active = select_active(&out, model.config.active_threshold);
        let gt = build_target_image(&s.target, &model.grid)?;
        let mut pred = vec![false; gt.occupancy.len()];
        for e in &active.entries {
            pred[e.flat] = true;
        }
        let inter = pred.iter().zip(&gt.occupancy).filter(|(a, b)| **a && **b).count();
        let union = pred.iter().zip(&gt.occupancy).filter(|(a, b)| **a || **b).count();
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / scenes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;
    use crate::synth::{gen_scenes, SceneSpec};

    fn tiny() -> (Config, Vec<ScenePair>) {
        let mut cfg = Config::default();
        cfg.grid = GridConfig {
            x_min: 0.0,
            x_max: 20.0,
            y_min: -10.0,
            y_max: 10.0,
            pillar_dx: 2.5,
            pillar_dy: 2.5,
            channels: 4,
        };
        cfg.model.ppg_hidden = 8;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 2;
        let spec = SceneSpec {
            n_objects: [1, 2],
            target_total: Some(60),
            object_extent: 1.0,
            clutter_rate: 3,
            ..SceneSpec::default()
        };
        let scenes = gen_scenes(&spec, &cfg.grid, 2, 0);
        (cfg, scenes)
    }

    #[test]
    fn phase_parsing() {
        assert_eq!("opp".parse::<Phase>().unwrap(), Phase::Opp);
        assert_eq!("e2e".parse::<Phase>().unwrap(), Phase::E2e);
        assert!("both".parse::<Phase>().is_err());
    }

    #[test]
    fn one_epoch_runs_and_logs_one_row() {
        let (cfg, scenes) = tiny();
        let out = train(&cfg, Phase::Opp, &scenes, None).unwrap();
        assert_eq!(out.epochs.len(), 1);
        assert!(!out.model.has_ppg());
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("loss.csv");
        write_loss_log(&log, &out.epochs).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn e2e_warm_start_keeps_trunk_and_adds_heads() {
        let (cfg, scenes) = tiny();
        let opp = train(&cfg, Phase::Opp, &scenes, None).unwrap();
        let ck = checkpoint::decode(&opp.model.to_bytes()).unwrap();
        let m = initial_model(&cfg, Phase::E2e, Some(&ck)).unwrap();
        assert!(m.has_ppg());
        for name in ck.names() {
            assert_eq!(m.store.by_name(name).unwrap().value.data(), ck.get(name).unwrap().data());
        }
        let e2e = train(&cfg, Phase::E2e, &scenes, Some(&ck)).unwrap();
        assert!(e2e.final_loss().is_finite());
        // an e2e checkpoint cannot seed phase opp
        let ck2 = checkpoint::decode(&e2e.model.to_bytes()).unwrap();
        assert!(initial_model(&cfg, Phase::Opp, Some(&ck2)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, scenes) = tiny();
        let a = train(&cfg, Phase::E2e, &scenes, None).unwrap();
        let b = train(&cfg, Phase::E2e, &scenes, None).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    }

    #[test]
    fn iou_and_eval_run() {
        let (cfg, scenes) = tiny();
        let m = PillarGen::new(cfg.grid, cfg.model, 0, true).unwrap();
        let iou = occupancy_iou(&m, &scenes).unwrap();
        assert!((0.0..=1.0).contains(&iou));
        let a = run_eval(&m, &scenes, 0).unwrap();
        let b = run_eval(&m, &scenes, 2).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.scenes, 2);
        let base = source_baseline(&scenes, 0).unwrap();
        assert_eq!(base.skipped, 0);
        assert!(base.rcd_2d > 0.0);
    }
}
