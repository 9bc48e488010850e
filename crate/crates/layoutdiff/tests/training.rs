mod common;

use candle_core::{DType, Tensor};
use common::*;
use layoutdiff::checkpoint;
use layoutdiff::config::{ConditionSwitches, ExperimentConfig};
use layoutdiff::model::Stage;
use layoutdiff::train::{assemble_batch, batch_loss, clip_global_norm, PreparedScene, Trainer};
use layoutdiff_core::diffusion::halving_lr;
use layoutdiff_core::CategoryTaxonomy;
use rand::Rng;

fn tax() -> CategoryTaxonomy {
    CategoryTaxonomy::desk()
}

fn param_bytes(t: &Trainer) -> Vec<(String, Vec<u8>)> {
    t.model
        .store
        .iter()
        .map(|(n, p)| {
            let v: Vec<f32> = p.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            (n.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect())
        })
        .collect()
}

#[test]
fn clg_loss_ignores_anchor_targets() {
    let data = prepared(4, 30);
    let m = model(Stage::Clg, ConditionSwitches::all(), DType::F32, 31);
    let refs: Vec<&PreparedScene> = data.iter().collect();
    let mut batch = assemble_batch(&m, &refs).unwrap();
    let schedule = ExperimentConfig::default().diffusion.schedule().unwrap();
    let mut r = rng(32);
    let ts: Vec<usize> = (0..4).map(|_| r.random_range(1..=1000)).collect();
    let eps: Vec<f64> = (0..batch.x0.len())
        .map(|_| r.random_range(-2.0..2.0))
        .collect();

    let grads_of = |batch: &layoutdiff::train::StageBatch| {
        let out = batch_loss(&m, &schedule, batch, &ts, &eps, 0.1, 50.0).unwrap();
        assert_eq!(out.anchor_mask_max, 0.0);
        let g = out.surrogate.backward().unwrap();
        let per: Vec<Vec<f32>> = m
            .store
            .trainable()
            .map(|(_, v)| match g.get(v.as_tensor()) {
                Some(t) => t.flatten_all().unwrap().to_vec1().unwrap(),
                None => vec![],
            })
            .collect();
        (out.components, per)
    };
    let (c1, g1) = grads_of(&batch);
    let targets = batch.anchor_targets.as_mut().unwrap();
    for v in targets.iter_mut() {
        *v = r.random_range(-50.0..50.0);
    }
    let (c2, g2) = grads_of(&batch);
    assert_eq!(c1, c2);
    assert_eq!(g1, g2);
    assert!(g1.iter().any(|g| g.iter().any(|&x| x != 0.0)));
}

#[test]
fn trainer_tracks_zero_anchor_mask() {
    let data = prepared(8, 33);
    let cfg = tiny_config();
    let mut t = Trainer::new(Stage::Clg, &cfg, &tax()).unwrap();
    t.run(&data, 4, None).unwrap();
    assert_eq!(t.anchor_mask_max, 0.0);
    assert_eq!(t.metrics.len(), 4);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let dev = candle_core::Device::Cpu;
    let mut grads = vec![
        Tensor::full(1e6f32, (10, 10), &dev).unwrap(),
        Tensor::full(-3e7f32, 7, &dev).unwrap(),
    ];
    let before = clip_global_norm(&mut grads, 10.0).unwrap();
    assert!(before > 1e7);
    let after: f64 = grads
        .iter()
        .map(|g| {
            g.to_dtype(DType::F64)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        })
        .sum::<f64>()
        .sqrt();
    assert!(after <= 10.0 + 1e-4, "{after}");
    // small gradients pass through untouched
    let mut small = vec![Tensor::full(0.1f32, 4, &dev).unwrap()];
    clip_global_norm(&mut small, 10.0).unwrap();
    assert_eq!(small[0].to_vec1::<f32>().unwrap(), vec![0.1; 4]);
}

#[test]
fn learning_rate_halves_every_interval() {
    assert_eq!(halving_lr(1e-4, 0, 10_000), 1e-4);
    assert_eq!(halving_lr(1e-4, 9_999, 10_000), 1e-4);
    assert_eq!(halving_lr(1e-4, 10_000, 10_000), 5e-5);
    assert_eq!(halving_lr(1e-4, 25_000, 10_000), 2.5e-5);
    assert_eq!(halving_lr(1e-4, 30_000, 10_000), 1.25e-5);

    let data = prepared(8, 34);
    let mut cfg = tiny_config();
    cfg.train.lr = 1e-3;
    cfg.train.lr_halve_epochs = 1;
    let mut t = Trainer::new(Stage::Slg, &cfg, &tax()).unwrap();
    // 8 scenes, batch 4: two steps per epoch
    t.run(&data, 5, None).unwrap();
    let lrs: Vec<f64> = t.metrics.iter().map(|m| m.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let data = prepared(8, 35);
    for stage in [Stage::Slg, Stage::Clg, Stage::Single] {
        let mut t = Trainer::new(stage, &tiny_config(), &tax()).unwrap();
        t.run(&data, 3, None).unwrap();
        let bytes = checkpoint::to_bytes(&t, &tax()).unwrap();
        let back = checkpoint::from_bytes(&bytes, &tax()).unwrap();
        assert_eq!(param_bytes(&back), param_bytes(&t));
        assert_eq!(checkpoint::to_bytes(&back, &tax()).unwrap(), bytes);
        let (header, _) = checkpoint::read_header(&bytes).unwrap();
        assert_eq!(header.config_hash, tiny_config().hash());
        assert_eq!(header.step, 3);
        assert_eq!(header.relations.len(), 7);
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = prepared(10, 36);
    let cfg = tiny_config();
    let mut straight = Trainer::new(Stage::Clg, &cfg, &tax()).unwrap();
    straight.run(&data, 6, None).unwrap();

    let mut first = Trainer::new(Stage::Clg, &cfg, &tax()).unwrap();
    first.run(&data, 3, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clg.ckpt");
    checkpoint::save(&path, &first, &tax()).unwrap();
    drop(first);
    let mut resumed = checkpoint::load(&path, &tax()).unwrap();
    resumed.run(&data, 6, None).unwrap();

    assert_eq!(param_bytes(&resumed), param_bytes(&straight));
    assert_eq!(resumed.metrics.last(), straight.metrics.last());
    assert_eq!(resumed.cursor, straight.cursor);
}

#[test]
fn checkpoint_rejects_another_taxonomy() {
    let data = prepared(4, 37);
    let mut t = Trainer::new(Stage::Slg, &tiny_config(), &tax()).unwrap();
    t.run(&data, 1, None).unwrap();
    let bytes = checkpoint::to_bytes(&t, &tax()).unwrap();
    let mut primary: Vec<&str> = layoutdiff_core::taxonomy::DEFAULT_PRIMARY.to_vec();
    primary.swap(0, 1);
    let other =
        CategoryTaxonomy::new(&primary, &layoutdiff_core::taxonomy::DEFAULT_SECONDARY).unwrap();
    let err = checkpoint::from_bytes(&bytes, &other)
        .err()
        .expect("mismatch must fail");
    assert!(err.to_string().contains("taxonomy"), "{err}");
    assert!(checkpoint::from_bytes(b"not a checkpoint at all", &tax()).is_err());
    assert!(checkpoint::from_bytes(&bytes[..30], &tax()).is_err());
}

#[test]
fn unconditional_training_stays_finite() {
    let data = prepared(8, 38);
    let mut cfg = tiny_config();
    cfg.slg = ConditionSwitches::none();
    cfg.single = ConditionSwitches::none();
    for stage in [Stage::Slg, Stage::Single] {
        let mut t = Trainer::new(stage, &cfg, &tax()).unwrap();
        t.run(&data, 4, None).unwrap();
        assert!(t.metrics.iter().all(|m| m.total.is_finite()));
        assert!(t.model.lsg().is_none() && t.model.room_encoder().is_none());
    }
}

#[test]
fn short_runs_halve_the_loss_in_most_seeds() {
    // 20 epochs over 200 scenes, batch 32
    let data = prepared(200, 39);
    for stage in [Stage::Slg, Stage::Clg] {
        let mut wins = 0;
        let mut report = Vec::new();
        for seed in 0..3 {
            let mut cfg = tiny_config();
            cfg.seed = seed;
            cfg.train.batch = 32;
            cfg.train.lr = 2e-3;
            cfg.train.iou_warmup_step = 1000;
            let mut t = Trainer::new(stage, &cfg, &tax()).unwrap();
            t.run(&data, 125, None).unwrap();
            let first = t.metrics[..10].iter().map(|m| m.total).sum::<f64>() / 10.0;
            let last = t.smoothed_loss(10);
            report.push((first, last));
            wins += (last <= 0.5 * first) as usize;
        }
        assert!(wins >= 2, "{stage:?}: {report:?}");
    }
}

#[test]
fn metrics_lines_are_json() {
    let data = prepared(4, 40);
    let mut cfg = tiny_config();
    cfg.train.log_every = 2;
    let mut t = Trainer::new(Stage::Slg, &cfg, &tax()).unwrap();
    let mut buf: Vec<u8> = Vec::new();
    t.run(&data, 4, Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let row: layoutdiff::train::MetricRow = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(row.step, 4);
}
