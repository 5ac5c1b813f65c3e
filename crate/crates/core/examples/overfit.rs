//! Trains both phases on a small synthetic set and reports how the model
//! compares with the raw source clouds.
//!
//! ```text
//! cargo run --release -p pillargen --example overfit -- [scenes] [opp_epochs] [e2e_epochs]
//! ```

use std::time::Instant;

use pillargen::nn::checkpoint;
use pillargen::synth::gen_scenes;
use pillargen::train::{occupancy_iou, run_eval, source_baseline, train_with};
use pillargen::{Config, Phase};

fn main() -> pillargen::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let n = args.first().copied().unwrap_or(8);
    let opp_epochs = args.get(1).copied().unwrap_or(200);
    let e2e_epochs = args.get(2).copied().unwrap_or(300);

    let mut cfg = Config::default();
    if let Ok(v) = std::env::var("BATCH") {
        cfg.train.batch_size = v.parse().expect("BATCH");
    }
    if let Ok(v) = std::env::var("LR") {
        cfg.train.max_lr = v.parse().expect("LR");
    }
    let scenes = gen_scenes(&cfg.synth, &cfg.grid, n, 0);
    let base = source_baseline(&scenes, 0)?;
    println!("source baseline: rcd_2d {:.3}", base.rcd_2d);

    let t = Instant::now();
    cfg.train.epochs = opp_epochs;
    let opp = train_with(&cfg, Phase::Opp, &scenes, None, |e, c| {
        if e == 1 || e % 20 == 0 {
            println!("opp {e:4} total {:.4} cls {:.4} reg {:.4} bin {:.4}", c.total, c.opp_cls, c.opp_reg, c.opp_bin);
        }
    })?;
    println!("opp phase {:.1}s, iou {:.3}", t.elapsed().as_secs_f64(), occupancy_iou(&opp.model, &scenes)?);
    if std::env::var("DIAG").is_ok() {
        for s in &scenes {
            let out = opp.model.opp_output(&s.source)?;
            let gt = pillargen::grid::build_target_image(&s.target, &cfg.grid)?;
            let src = pillargen::grid::build_target_image(&s.source, &cfg.grid)?;
            let (mut tp, mut fp, mut fneg, mut stp, mut sfp, mut sfn) = (0, 0, 0, 0, 0, 0);
            let mut small_missed = 0;
            for c in 0..gt.occupancy.len() {
                let p = out.p_occ[c] > 0.1;
                let g = gt.occupancy[c];
                let q = src.occupancy[c];
                match (p, g) { (true, true) => tp += 1, (true, false) => fp += 1, (false, true) => { fneg += 1; if gt.count(c) <= 2 { small_missed += 1 } }, _ => {} }
                match (q, g) { (true, true) => stp += 1, (true, false) => sfp += 1, (false, true) => sfn += 1, _ => {} }
            }
            println!("{}: gt {} tp {tp} fp {fp} fn {fneg} (<=2 pts {small_missed}) | source tp {stp} fp {sfp} fn {sfn}", s.scene_id, tp + fneg);
        }
    }

    let ck = checkpoint::decode(&opp.model.to_bytes())?;
    let t = Instant::now();
    cfg.train.epochs = e2e_epochs;
    if let Ok(v) = std::env::var("LR_E2E") {
        cfg.train.max_lr = v.parse().expect("LR_E2E");
    }
    if let Ok(v) = std::env::var("BATCH_E2E") {
        cfg.train.batch_size = v.parse().expect("BATCH_E2E");
    }
    let e2e = train_with(&cfg, Phase::E2e, &scenes, Some(&ck), |e, c| {
        if e == 1 || e % 20 == 0 {
            println!(
                "e2e {e:4} total {:.4} opp {:.4} 2d {:.4} feat {:.4} score {:.4} global {:.4}",
                c.total,
                c.opp_cls + c.opp_reg + c.opp_bin,
                c.l_2d,
                c.l_feat,
                c.l_score,
                c.global
            );
        }
    })?;
    println!("e2e phase {:.1}s", t.elapsed().as_secs_f64());
    let model = pillargen::PillarGen::from_checkpoint(&checkpoint::decode(&e2e.model.to_bytes())?, cfg.grid, cfg.model)?;
    let ev = run_eval(&model, &scenes, 0)?;
    println!("generated: {}", ev.report.to_json());
    println!("loss first {:.4} final {:.4}", e2e.first_loss(), e2e.final_loss());
    println!("iou {:.3}", occupancy_iou(&model, &scenes)?);
    if std::env::var("DIAG").is_ok() {
        use pillargen::metrics::{nn_2d, AttributedPoint2D};
        // gen->gt split by whether the pillar holds ground truth
        let mut acc = [0.0f64; 8];
        for s in &scenes {
            let gen = model.infer_with_threshold(&s.source, &s.scene_id, 0.1)?;
            let gt_img = pillargen::grid::build_target_image(&s.target, &cfg.grid)?;
            let tgt: Vec<AttributedPoint2D> = s.target.points.iter().map(AttributedPoint2D::from).collect();
            let all: Vec<AttributedPoint2D> = gen.unfiltered().map(AttributedPoint2D::from).collect();
            let m = all.len() as f64;
            for pg in &gen.pillars {
                let occ = gt_img.occupancy[pg.source.flat];
                let pts: Vec<AttributedPoint2D> = pg.points.iter().map(AttributedPoint2D::from).collect();
                for (q, (j, _)) in pts.iter().zip(nn_2d(&pts, &tgt)?) {
                    let t = &tgt[j];
                    let d2 = (q.x - t.x).powi(2) + (q.y - t.y).powi(2);
                    let da = (q.rcs - t.rcs).abs() + (q.vx - t.vx).abs() + (q.vy - t.vy).abs();
                    let o = if occ { 0 } else { 2 };
                    acc[o] += d2 / m / 8.0;
                    acc[o + 1] += da / m / 8.0;
                    let a = pg.source.attrs;
                    let db = (a[2] - t.rcs).abs() + (a[3] - t.vx).abs() + (a[4] - t.vy).abs();
                    acc[6 + o / 2] += db / m / 8.0;
                }
            }
            let n = tgt.len() as f64;
            for (t, (i, _)) in tgt.iter().zip(nn_2d(&tgt, &all)?) {
                let q = &all[i];
                acc[4] += ((q.x - t.x).powi(2) + (q.y - t.y).powi(2)) / n / 8.0;
                acc[5] += ((q.rcs - t.rcs).abs() + (q.vx - t.vx).abs() + (q.vy - t.vy).abs()) / n / 8.0;
            }
        }
        println!("gen->gt tp 2d {:.3} attr {:.3} | fp 2d {:.3} attr {:.3} | gt->gen 2d {:.3} attr {:.3}", acc[0], acc[1], acc[2], acc[3], acc[4], acc[5]);
        println!("opp-mean attr only: tp {:.3} fp {:.3}", acc[6], acc[7]);
    }
    Ok(())
}
