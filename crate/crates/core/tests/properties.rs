//! Randomized invariants across modules.

use proptest::prelude::*;

use pillargen::grid::{assign_points, build_target_image, GridConfig};
use pillargen::io::{read_points_file, read_scene_file, write_points_file, write_scene_file};
use pillargen::losses::{global_loss, score_targets, D_STD};
use pillargen::metrics::{nn_2d, nn_2d_brute, rcd_2d, rcd_5d, rhd_2d, rhd_5d, AttributedPoint2D};
use pillargen::nn::checkpoint;
use pillargen::nn::{Graph, Tensor};
use pillargen::opp::{decode_count, decode_count_continuous, encode_count, opp_loss, select_active, OppConfig, OppHeads, OppOutput};
use pillargen::ppg::PpgVars;
use pillargen::synth::gen_scene;
use pillargen::{GeneratedPoint, ModelConfig, PillarGen, PointCloud, RadarPoint, SceneGeneration, ScenePair, SceneSpec};

fn attributed() -> impl Strategy<Value = AttributedPoint2D> {
    (-50.0..50.0f64, -50.0..50.0f64, -10.0..30.0f64, -5.0..5.0f64, -5.0..5.0f64)
        .prop_map(|(x, y, rcs, vx, vy)| AttributedPoint2D::new(x, y, rcs, vx, vy))
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<AttributedPoint2D>> {
    prop::collection::vec(attributed(), 1..max)
}

fn radar_point() -> impl Strategy<Value = RadarPoint> {
    (-5.0..85.0f64, -45.0..45.0f64, 0.0..2.0f64, -10.0..30.0f64, -15.0..15.0f64, -15.0..15.0f64)
        .prop_map(|(x, y, z, rcs, vx, vy)| RadarPoint::new(x, y, z, rcs, vx, vy))
}

fn small_grid() -> GridConfig {
    GridConfig {
        x_min: 0.0,
        x_max: 16.0,
        y_min: -8.0,
        y_max: 8.0,
        pillar_dx: 2.0,
        pillar_dy: 2.0,
        channels: 4,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_round_trip(k in 1u64..1_000_000) {
        let t = encode_count(k).unwrap();
        prop_assert_eq!(decode_count(t.bin, t.res), k);
        prop_assert!(t.res >= 0.0 && t.res <= t.bin as f64);
    }

    #[test]
    fn decode_is_strictly_increasing_in_residual(bin in 0u32..12, a in 0.0..12.0f64, b in 0.0..12.0f64) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(decode_count_continuous(bin, lo) < decode_count_continuous(bin, hi));
    }

    #[test]
    fn active_set_ignores_monotone_logit_rescaling(
        logits in prop::collection::vec(-4.0..4.0f64, 16 * 3),
        occ in prop::collection::vec(-3.0..3.0f64, 16),
        scale in 0.1..5.0f64,
        shift in -3.0..3.0f64,
    ) {
        let grid = GridConfig { x_min: 0.0, x_max: 4.0, y_min: 0.0, y_max: 4.0, pillar_dx: 1.0, pillar_dy: 1.0, channels: 2 };
        let attrs = vec![0.0; 5 * 16];
        let res = vec![0.0; 16 * 3];
        let a = OppOutput::from_raw(&grid, &occ, &attrs, &logits, &res).unwrap();
        let warped: Vec<f64> = logits.iter().map(|v| (scale * v + shift).tanh() * 7.0 + v.powi(3)).collect();
        let b = OppOutput::from_raw(&grid, &occ, &attrs, &warped, &res).unwrap();
        prop_assert_eq!(select_active(&a, 0.1), select_active(&b, 0.1));
    }

    #[test]
    fn hash_nearest_matches_brute_force(p in cloud(120), q in cloud(120)) {
        prop_assert_eq!(nn_2d(&p, &q).unwrap(), nn_2d_brute(&p, &q).unwrap());
    }

    #[test]
    fn metrics_are_symmetric_and_zero_on_identical_sets(p in cloud(60), q in cloud(60)) {
        for f in [rcd_2d, rhd_2d, rcd_5d, rhd_5d] {
            prop_assert_eq!(f(&p, &p).unwrap(), 0.0);
            let (a, b) = (f(&p, &q).unwrap(), f(&q, &p).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        prop_assert!(rhd_2d(&p, &q).unwrap() >= rcd_2d(&p, &q).unwrap() / 2.0);
        prop_assert!(rhd_5d(&p, &q).unwrap() >= rcd_5d(&p, &q).unwrap() / 2.0);
        prop_assert!(rcd_5d(&p, &q).unwrap() >= rcd_2d(&p, &q).unwrap());
        prop_assert!(rhd_5d(&p, &q).unwrap() >= rhd_2d(&p, &q).unwrap());
    }

    #[test]
    fn score_targets_are_bounded_and_non_increasing(ds in prop::collection::vec(0.0..5.0f64, 1..20)) {
        let gt = [RadarPoint::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)];
        let mut sorted = ds.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gen: Vec<GeneratedPoint> = sorted.iter().map(|&d| GeneratedPoint::from_array([d, 0.0, 0.0, 0.0, 0.0, 0.5])).collect();
        let s = score_targets(&gen, Some(&gt), D_STD);
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn global_loss_vanishes_on_its_own_ground_truth(pts in prop::collection::vec(radar_point(), 1..40)) {
        let mut g = Graph::new();
        let rows: Vec<f64> = pts.iter().flat_map(|p| [p.x, p.y, p.rcs, p.vx, p.vy, 0.5]).collect();
        let points = g.leaf(Tensor::new(&[pts.len(), 6], rows).unwrap(), true);
        let vars = PpgVars { points: Some(points), active: Default::default(), ranges: vec![0..pts.len()] };
        let l = global_loss(&mut g, &vars, &pts).unwrap();
        prop_assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn every_in_grid_point_lands_in_exactly_one_pillar(pts in prop::collection::vec(radar_point(), 0..200)) {
        let grid = GridConfig::default();
        let b = assign_points(&PointCloud::new(pts.clone()), &grid);
        let inside = pts.iter().filter(|p| grid.contains(p.x, p.y)).count();
        prop_assert_eq!(b.num_points(), inside);
        for (idx, bucket) in &b.buckets {
            for p in bucket {
                prop_assert_eq!(grid.locate(p.x, p.y), Some(*idx));
            }
        }
    }

    #[test]
    fn regression_gradient_stays_on_occupied_pillars(
        pts in prop::collection::vec((0.0..16.0f64, -8.0..8.0f64, -10.0..30.0f64), 1..30),
        raw in prop::collection::vec(-1.0..1.0f64, 5 * 64),
    ) {
        let grid = small_grid();
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, r)| RadarPoint::new(x, y, 0.0, r, 1.0, -1.0)).collect());
        let target = build_target_image(&cloud, &grid).unwrap();
        let mut g = Graph::new();
        let attrs_raw = g.leaf(Tensor::new(&[5, 8, 8], raw).unwrap(), true);
        let p = g.constant(Tensor::full(&[1, 8, 8], 0.3));
        let bl = g.constant(Tensor::zeros(&[4, 8, 8]));
        let res = g.constant(Tensor::full(&[4, 8, 8], 0.5));
        let heads = OppHeads { p_occ: p, attrs_raw, bin_logits: bl, residuals: res };
        let cfg = OppConfig { bins: 4, ..OppConfig::default() };
        let loss = opp_loss(&mut g, &heads, &target, &grid, &cfg).unwrap();
        let grads = g.backward(loss.reg);
        let gr = grads.get(attrs_raw).unwrap();
        for cell in 0..64 {
            if !target.occupancy[cell] {
                for ch in 0..5 {
                    prop_assert_eq!(gr[ch * 64 + cell], 0.0);
                }
            }
        }
    }

    #[test]
    fn scene_files_round_trip_exactly(src in prop::collection::vec(radar_point(), 0..20), tgt in prop::collection::vec(radar_point(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let scenes = vec![ScenePair::new("a", src, tgt)];
        write_scene_file(&scenes, &path).unwrap();
        prop_assert_eq!(read_scene_file(&path).unwrap(), scenes);
    }

    #[test]
    fn points_files_round_trip_exactly(rows in prop::collection::vec((radar_point(), 0.0..=1.0f64), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let points = rows.iter().map(|(p, s)| GeneratedPoint::from_array([p.x, p.y, p.rcs, p.vx, p.vy, *s])).collect();
        let scenes = vec![SceneGeneration { scene_id: "a".into(), points }];
        write_points_file(&scenes, &path).unwrap();
        prop_assert_eq!(read_points_file(&path).unwrap(), scenes);
    }

    #[test]
    fn synthetic_scenes_are_reproducible(seed in 0u64..1000, index in 0u64..1000) {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        let grid = GridConfig::default();
        prop_assert_eq!(gen_scene(&spec, &grid, index), gen_scene(&spec, &grid, index));
        let quiet = SceneSpec::noiseless(seed);
        let s = gen_scene(&quiet, &grid, index);
        prop_assert_eq!(&s.source.points, &s.target.points);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_structure_holds_for_any_model(seed in 0u64..10_000, pts in prop::collection::vec(radar_point(), 1..60)) {
        let grid = small_grid();
        let cfg = ModelConfig { bins: 4, ppg_hidden: 8, active_threshold: 0.0, ..ModelConfig::default() };
        let model = PillarGen::new(grid, cfg, seed, true).unwrap();
        let source = PointCloud::new(pts);
        let gen = model.infer_with_threshold(&source, "s", 0.1).unwrap();
        let out = model.opp_output(&source).unwrap();
        let active = select_active(&out, 0.0);
        prop_assert_eq!(gen.pillars.len(), active.len());
        for (pg, a) in gen.pillars.iter().zip(&active.entries) {
            prop_assert_eq!(pg.points.len() as u64, a.count);
            let (cx, cy) = (a.attrs[0], a.attrs[1]);
            for p in &pg.points {
                prop_assert!((0.0..=1.0).contains(&p.score));
                prop_assert!((p.x - cx).abs() <= grid.pillar_dx && (p.y - cy).abs() <= grid.pillar_dy);
            }
        }
        prop_assert!(gen.points.iter().all(|p| p.score > 0.1));
    }

    #[test]
    fn checkpoints_round_trip_in_f32(seed in 0u64..10_000) {
        let model = PillarGen::new(small_grid(), ModelConfig::default(), seed, true).unwrap();
        let bytes = model.to_bytes();
        let back = PillarGen::from_checkpoint(&checkpoint::decode(&bytes).unwrap(), model.grid, model.config).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
