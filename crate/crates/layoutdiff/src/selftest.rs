//! Fast property checks across every module, run by `layoutdiff selftest`.
//! Each check is small enough that the whole suite finishes in seconds.

use candle_core::{DType, Device, Tensor};
use layoutdiff_core::diffusion::{strided_timesteps, DiffusionSchedule};
use layoutdiff_core::generator::{generate_indexed, worst_support_gap, RoomType};
use layoutdiff_core::geometry::box_iou;
use layoutdiff_core::iou::{pair_soft_iou, pair_soft_iou_grad, BoxParams, DEFAULT_SHARPNESS};
use layoutdiff_core::plausibility::{plausibility, PlausibilityThresholds};
use layoutdiff_core::raster::{rasterize, Plane, RasterOptions};
use layoutdiff_core::relations::{Relation, RelationThresholds};
use layoutdiff_core::{Caps, CategoryTaxonomy, ObjectRecord, Scene};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditions::GraphBatch;
use crate::config::{ConditionSwitches, ExperimentConfig};
use crate::eval::scene_distance;
use crate::model::{Stage, StageModel};
use crate::train::{condition_inputs, prepare_scenes, PreparedScene, Trainer};

pub type Check = fn() -> Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Named checks in run order.
pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("schedule_endpoints", schedule_endpoints),
        ("v_reconstruction", v_reconstruction),
        ("oracle_rollout", oracle_rollout),
        ("iou_reference_values", iou_reference_values),
        ("iou_gradient", iou_gradient),
        ("raster_square_count", raster_square_count),
        ("generated_scene_rules", generated_scene_rules),
        ("metric_identity", metric_identity),
        ("plausibility_stacked_pair", plausibility_stacked_pair),
        ("gamma_zero_tokens", gamma_zero_tokens),
        ("denoiser_equivariance", denoiser_equivariance),
        ("graph_edge_order_invariance", graph_edge_order_invariance),
        ("clg_anchor_immutability", clg_anchor_immutability),
        ("checkpoint_round_trip", checkpoint_round_trip),
    ]
}

/// Runs every check, logging each result. Returns the names that failed.
pub fn run() -> Vec<String> {
    let mut failed = Vec::new();
    for (name, check) in checks() {
        let t0 = std::time::Instant::now();
        match check() {
            Ok(()) => log::info!("selftest {name} ok ({:.2}s)", t0.elapsed().as_secs_f64()),
            Err(e) => {
                log::error!("selftest {name} FAILED: {e}");
                failed.push(name.to_string());
            }
        }
    }
    failed
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.model.d_h = 32;
    c.train.batch = 4;
    c
}

fn tiny_model(stage: Stage, seed: u64) -> Result<StageModel, String> {
    let c = tiny_config();
    StageModel::new(
        stage,
        c.corpus.caps(),
        ConditionSwitches::all(),
        &c.model,
        &CategoryTaxonomy::desk(),
        seed,
        DType::F32,
        &Device::Cpu,
    )
    .map_err(err)
}

fn tiny_data(n: usize, seed: u64) -> Result<Vec<PreparedScene>, String> {
    let tax = CategoryTaxonomy::desk();
    let c = tiny_config();
    let scenes = crate::pipeline::generate_corpus(n, seed, &RoomType::ALL, c.corpus.caps(), &tax)
        .map_err(err)?;
    prepare_scenes(&scenes, c.corpus.caps(), &tax, c.model.mask_resolution).map_err(err)
}

fn values(t: &Tensor) -> Result<Vec<f64>, String> {
    t.to_dtype(DType::F64)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1())
        .map_err(err)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64, String> {
    Ok(values(a)?
        .iter()
        .zip(values(b)?)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

fn schedule_endpoints() -> Result<(), String> {
    let s = DiffusionSchedule::default_linear();
    ensure(s.alpha_bar(1) == 0.9999, || {
        format!("alpha_bar(1) = {}", s.alpha_bar(1))
    })?;
    let last = s.alpha_bar(1000);
    ensure((3e-5..=5e-5).contains(&last), || {
        format!("alpha_bar(1000) = {last}")
    })?;
    ensure(
        (2..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)),
        || "alpha_bar not decreasing".into(),
    )
}

fn v_reconstruction() -> Result<(), String> {
    let s = DiffusionSchedule::default_linear();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let t = r.random_range(1..=1000);
        let x0: Vec<f64> = (0..4).map(|_| r.random_range(-1.5..1.5)).collect();
        let eps: Vec<f64> = (0..4).map(|_| r.sample(StandardNormal)).collect();
        let xt = s.forward_noise(&x0, t, &eps).map_err(err)?;
        let v = s.v_target(&x0, &eps, t).map_err(err)?;
        let (a, b) = s.split_v(&xt, &v, t).map_err(err)?;
        let worst = (0..4)
            .map(|k| (a[k] - x0[k]).abs().max((b[k] - eps[k]).abs()))
            .fold(0.0, f64::max);
        ensure(worst < 1e-6, || format!("t={t}: deviation {worst}"))?;
    }
    Ok(())
}

fn oracle_rollout() -> Result<(), String> {
    let s = DiffusionSchedule::default_linear();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x0: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut x: Vec<f64> = x0.iter().map(|_| r.sample(StandardNormal)).collect();
    let ts = strided_timesteps(1000, 1);
    for (i, &t) in ts.iter().enumerate() {
        let (a, sd) = s.coefficients(t);
        let v: Vec<f64> = x
            .iter()
            .zip(&x0)
            .map(|(&xt, &c)| a * (xt - a * c) / sd - sd * c)
            .collect();
        let noise: Vec<f64> = x0.iter().map(|_| r.sample(StandardNormal)).collect();
        x = s
            .reverse_jump(&x, &v, t, ts.get(i + 1).copied().unwrap_or(0), Some(&noise))
            .map_err(err)?;
    }
    let worst = x
        .iter()
        .zip(&x0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(worst < 1e-3, || format!("L-inf error {worst}"))
}

fn cube(x: f64) -> BoxParams {
    [x, 0.0, 0.0, 0.5, 0.5, 0.5, 1.0, 0.0]
}

fn iou_reference_values() -> Result<(), String> {
    let k = 1e4;
    let disjoint = pair_soft_iou(&cube(0.0), &cube(3.0), k);
    let same = pair_soft_iou(&cube(0.0), &cube(0.0), k);
    let third = pair_soft_iou(&cube(0.0), &cube(0.5), k);
    ensure(disjoint < 1e-9, || format!("disjoint {disjoint}"))?;
    ensure((same - 1.0).abs() < 1e-3, || format!("identical {same}"))?;
    ensure((third - 1.0 / 3.0).abs() < 1e-3, || {
        format!("offset {third}")
    })
}

fn iou_gradient() -> Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut checked = 0;
    while checked < 20 {
        let mut b = || -> BoxParams {
            let th: f64 = r.random_range(-3.1..3.1);
            [
                r.random_range(-0.2..0.2),
                r.random_range(-0.2..0.2),
                r.random_range(-0.2..0.2),
                r.random_range(0.1..0.5),
                r.random_range(0.1..0.5),
                r.random_range(0.1..0.5),
                th.cos(),
                th.sin(),
            ]
        };
        let (a, c) = (b(), b());
        let (_, ga, _) = pair_soft_iou_grad(&a, &c, DEFAULT_SHARPNESS);
        let mut diff = 0.0;
        let mut norm = 0.0;
        for p in 0..8 {
            let (mut up, mut down) = (a, a);
            up[p] += h;
            down[p] -= h;
            let fd = (pair_soft_iou(&up, &c, DEFAULT_SHARPNESS)
                - pair_soft_iou(&down, &c, DEFAULT_SHARPNESS))
                / (2.0 * h);
            diff += (fd - ga[p]).powi(2);
            norm += fd * fd;
        }
        if norm < 1e-12 {
            continue;
        }
        let rel = (diff / norm).sqrt();
        ensure(rel < 1e-4, || format!("relative error {rel}"))?;
        checked += 1;
    }
    Ok(())
}

fn raster_square_count() -> Result<(), String> {
    let a = ObjectRecord::new(0, [0.0, 0.0, 0.0], [0.5, 0.3, 0.5], 0.0);
    let b = ObjectRecord::new(
        0,
        [0.0, 0.0, 0.0],
        [0.5, 0.3, 0.5],
        std::f64::consts::FRAC_PI_2,
    );
    let ra = rasterize([&a], Plane::XZ, RasterOptions::default());
    let rb = rasterize([&b], Plane::XZ, RasterOptions::default());
    let n = ra.filled();
    ensure((31 * 31..=33 * 33).contains(&n), || format!("{n} pixels"))?;
    ensure(ra == rb, || "quarter turn changed the raster".into())?;
    ensure(
        rasterize(std::iter::empty(), Plane::XY, RasterOptions::default()).filled() == 0,
        || "empty scene raster is not empty".into(),
    )
}

fn generated_scene_rules() -> Result<(), String> {
    let tax = CategoryTaxonomy::desk();
    let th = RelationThresholds::default();
    for i in 0..20u64 {
        let s = generate_indexed(i, 5, &RoomType::ALL, Caps::new(12, 32), &tax)
            .map_err(err)?
            .scene;
        for a in 0..s.primary.len() {
            for b in a + 1..s.primary.len() {
                ensure(box_iou(&s.primary[a], &s.primary[b]) == 0.0, || {
                    format!("scene {i}: primaries overlap")
                })?;
            }
        }
        let gap = worst_support_gap(&s);
        ensure(gap <= 1e-3, || format!("scene {i}: support gap {gap}"))?;
        for e in &s.graph.edges {
            let rel = Relation::from_id(e.relation).ok_or("bad relation id")?;
            ensure(th.holds(rel, &s.primary[e.src], &s.primary[e.dst]), || {
                format!("scene {i}: edge {e:?} false")
            })?;
        }
        let again = generate_indexed(i, 5, &RoomType::ALL, Caps::new(12, 32), &tax)
            .map_err(err)?
            .scene;
        ensure(again == s, || format!("scene {i} is not reproducible"))?;
    }
    Ok(())
}

fn metric_identity() -> Result<(), String> {
    let tax = CategoryTaxonomy::desk();
    let scenes: Vec<Scene> = (0..20u64)
        .map(|i| generate_indexed(i, 6, &RoomType::ALL, Caps::new(12, 32), &tax).map(|g| g.scene))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let d = scene_distance(&scenes, &scenes, Plane::XZ, RasterOptions::default()).map_err(err)?;
    ensure(d.frechet == 0.0 && d.mmd == 0.0, || format!("{d:?}"))?;
    let report = plausibility(&scenes, &PlausibilityThresholds::default());
    ensure(
        report.overlap_rate == 0.0 && report.support_violation_rate == 0.0,
        || format!("{report:?}"),
    )
}

fn plausibility_stacked_pair() -> Result<(), String> {
    let tax = CategoryTaxonomy::desk();
    let mut s = generate_indexed(0, 7, &RoomType::ALL, Caps::new(12, 32), &tax)
        .map_err(err)?
        .scene;
    let o = ObjectRecord::new(
        0,
        [s.frame.center[0], 0.3, s.frame.center[2]],
        [0.4, 0.3, 0.4],
        0.0,
    );
    s.primary = vec![o, o];
    s.secondary.clear();
    let report = plausibility(&[s], &PlausibilityThresholds::default());
    ensure(report.overlap_rate == 1.0, || {
        format!("overlap rate {}", report.overlap_rate)
    })
}

fn gamma_zero_tokens() -> Result<(), String> {
    let m = tiny_model(Stage::Slg, 1)?;
    let zero = Tensor::zeros(1, DType::F32, &Device::Cpu).map_err(err)?;
    m.store
        .assign("backbone.tokens.gamma_pos", &zero)
        .map_err(err)?;
    let x = Tensor::randn(0f32, 1.0, (2, 12, m.dim()), &Device::Cpu).map_err(err)?;
    let tok = values(&m.tokens().forward(&x).map_err(err)?)?;
    let attr = values(&m.tokens().attributes(&x).map_err(err)?)?;
    ensure(tok == attr, || {
        "tokens differ from the attribute embedding".into()
    })
}

fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor, String> {
    let idx: Vec<u32> = perm.iter().map(|&p| p as u32).collect();
    let idx = Tensor::from_vec(idx, perm.len(), &Device::Cpu).map_err(err)?;
    x.index_select(&idx, 1).map_err(err)
}

fn denoiser_equivariance() -> Result<(), String> {
    let data = tiny_data(2, 8)?;
    let refs: Vec<&PreparedScene> = data.iter().collect();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for stage in [Stage::Slg, Stage::Clg, Stage::Single] {
        let m = tiny_model(stage, 10)?;
        let inputs = condition_inputs(&m, &refs).map_err(err)?;
        let cond = m.encode_conditions(2, &inputs).map_err(err)?;
        let (na, n) = stage.slots(m.caps);
        let x = Tensor::randn(0f32, 1.0, (2, n, m.dim()), &Device::Cpu).map_err(err)?;
        let anchors = if na > 0 {
            Some(Tensor::randn(0f32, 1.0, (2, na, m.dim()), &Device::Cpu).map_err(err)?)
        } else {
            None
        };
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let out = m
            .denoise(&x, &[5, 700], &cond, anchors.as_ref())
            .map_err(err)?;
        let moved = m
            .denoise(&permute(&x, &perm)?, &[5, 700], &cond, anchors.as_ref())
            .map_err(err)?;
        let d = max_abs_diff(&moved, &permute(&out, &perm)?)?;
        ensure(d < 1e-5, || format!("{}: deviation {d}", stage.name()))?;
    }
    Ok(())
}

fn graph_edge_order_invariance() -> Result<(), String> {
    let m = tiny_model(Stage::Slg, 11)?;
    let lsg = m.lsg().ok_or("no graph encoder")?;
    let data = tiny_data(4, 12)?;
    let g = data
        .iter()
        .map(|d| &d.graph)
        .max_by_key(|g| g.edges.len())
        .ok_or("no scenes")?;
    let base = lsg
        .forward(&GraphBatch::new(&[g], 8, 0, DType::F32, &Device::Cpu).map_err(err)?)
        .map_err(err)?;
    let mut shuffled = g.clone();
    shuffled.edges.shuffle(&mut ChaCha8Rng::seed_from_u64(13));
    let padded = GraphBatch::new(&[&shuffled], 8, g.edges.len() + 5, DType::F32, &Device::Cpu)
        .map_err(err)?;
    let out = lsg.forward(&padded).map_err(err)?;
    let d = max_abs_diff(&out.token, &base.token)?;
    ensure(d <= 1e-6, || format!("deviation {d}"))
}

fn clg_anchor_immutability() -> Result<(), String> {
    let data = tiny_data(2, 14)?;
    let refs: Vec<&PreparedScene> = data.iter().collect();
    let m = tiny_model(Stage::Clg, 15)?;
    let anchors: Vec<Vec<f64>> = data.iter().map(|s| s.primary.clone()).collect();
    let before: Vec<u64> = anchors.iter().flatten().map(|v| v.to_bits()).collect();
    let schedule = DiffusionSchedule::default_linear();
    let out =
        crate::sample::sample_values(&m, &schedule, &refs, Some(&anchors), 1, 200).map_err(err)?;
    let after: Vec<u64> = anchors.iter().flatten().map(|v| v.to_bits()).collect();
    ensure(before == after, || "anchor slots changed".into())?;
    ensure(out.iter().flatten().all(|v| v.is_finite()), || {
        "non-finite sample".into()
    })
}

fn checkpoint_round_trip() -> Result<(), String> {
    let tax = CategoryTaxonomy::desk();
    let data = tiny_data(8, 16)?;
    let mut t = Trainer::new(Stage::Clg, &tiny_config(), &tax).map_err(err)?;
    t.run(&data, 2, None).map_err(err)?;
    let bytes = crate::checkpoint::to_bytes(&t, &tax).map_err(err)?;
    let back = crate::checkpoint::from_bytes(&bytes, &tax).map_err(err)?;
    let again = crate::checkpoint::to_bytes(&back, &tax).map_err(err)?;
    ensure(again == bytes, || "re-serialized checkpoint differs".into())?;
    ensure(back.step == 2 && back.cursor == t.cursor, || {
        "training position lost".into()
    })
}
