//! Ancestral sampling for each stage, decoding and scene assembly.

use candle_core::{DType, Tensor};
use layoutdiff_core::diffusion::strided_timesteps;
use layoutdiff_core::relations::{extract_graph, RelationThresholds};
use layoutdiff_core::{
    decode_layout, denormalize_scene, encode_layout, split_scene, CategoryTaxonomy,
    DiffusionSchedule, LayoutTensor, ObjectRecord, Scene, Tier,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Stage, StageModel};
use crate::train::{condition_inputs, PreparedScene};

/// Scenes per forward pass while sampling.
const SAMPLE_CHUNK: usize = 64;

/// Runs the reverse chain for every conditioning scene and returns the final
/// clean estimate of the noisy slots, `[N * D]` per scene.
///
/// Scene `i` draws all of its noise from stream `i` of `seed`, so results do
/// not depend on how scenes are grouped into forward passes. `anchors` holds
/// `[N_L * D]` clean primary slots per scene and is never written.
pub fn sample_values(
    model: &StageModel,
    schedule: &DiffusionSchedule,
    scenes: &[&PreparedScene],
    anchors: Option<&[Vec<f64>]>,
    seed: u64,
    stride: usize,
) -> Result<Vec<Vec<f64>>> {
    let (n_anchor, n) = model.stage.slots(model.caps);
    let dim = model.dim();
    match (model.stage, anchors) {
        (Stage::Clg, Some(a))
            if a.len() == scenes.len() && a.iter().all(|x| x.len() == n_anchor * dim) => {}
        (Stage::Clg, _) => {
            return Err(Error::Shape(
                "CLG sampling needs one anchor layout per scene".into(),
            ))
        }
        (_, None) => {}
        (_, Some(_)) => {
            return Err(Error::Shape(format!(
                "{} stage takes no anchors",
                model.stage.name()
            )))
        }
    }
    let ts = strided_timesteps(schedule.steps(), stride);
    let mut out = Vec::with_capacity(scenes.len());
    for (c, chunk) in scenes.chunks(SAMPLE_CHUNK).enumerate() {
        let first = c * SAMPLE_CHUNK;
        let b = chunk.len();
        let mut rngs: Vec<ChaCha8Rng> = (0..b)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream((first + i) as u64);
                r
            })
            .collect();
        let mut x: Vec<Vec<f64>> = rngs
            .iter_mut()
            .map(|r| (0..n * dim).map(|_| StandardNormal.sample(r)).collect())
            .collect();
        let inputs = condition_inputs(model, chunk)?;
        let cond = model.encode_conditions(b, &inputs)?;
        let anchor_tensor = match anchors {
            Some(a) => {
                let flat: Vec<f64> = a[first..first + b].iter().flatten().copied().collect();
                Some(
                    Tensor::from_vec(flat, (b, n_anchor, dim), model.device())?
                        .to_dtype(model.dtype())?,
                )
            }
            None => None,
        };
        for (k, &t) in ts.iter().enumerate() {
            let prev = ts.get(k + 1).copied().unwrap_or(0);
            let flat: Vec<f64> = x.iter().flatten().copied().collect();
            let xt =
                Tensor::from_vec(flat, (b, n, dim), model.device())?.to_dtype(model.dtype())?;
            let v = model
                .denoise(&xt, &vec![t; b], &cond, anchor_tensor.as_ref())?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for i in 0..b {
                let noise: Option<Vec<f64>> = (prev > 0).then(|| {
                    (0..n * dim)
                        .map(|_| StandardNormal.sample(&mut rngs[i]))
                        .collect()
                });
                x[i] = schedule.reverse_jump(
                    &x[i],
                    &v[i * n * dim..(i + 1) * n * dim],
                    t,
                    prev,
                    noise.as_deref(),
                )?;
            }
        }
        out.extend(x);
    }
    Ok(out)
}

/// Decodes sampled values into objects; tiers are assigned by class.
pub fn decode_values(
    values: Vec<f64>,
    slots: usize,
    taxonomy: &CategoryTaxonomy,
) -> Result<(Vec<ObjectRecord>, Vec<ObjectRecord>)> {
    let layout = LayoutTensor::from_values(Tier::Primary, slots, taxonomy.num_classes(), values)?;
    let decoded = decode_layout(&layout);
    Ok(split_scene(&decoded.objects, taxonomy)?)
}

/// Primary slots for a CLG run from a set of primary objects, in the normalized frame.
pub fn anchor_values(
    primary: &[ObjectRecord],
    model: &StageModel,
    taxonomy: &CategoryTaxonomy,
) -> Result<Vec<f64>> {
    let mut kept = primary.to_vec();
    kept.truncate(model.caps.primary);
    Ok(encode_layout(&kept, Tier::Primary, model.caps, taxonomy)?.into_values())
}

/// A generated scene in world meters, reusing the condition scene's room,
/// prompt and frame. The graph is re-extracted from the generated primaries.
pub fn assemble_scene(
    condition: &PreparedScene,
    primary: Vec<ObjectRecord>,
    secondary: Vec<ObjectRecord>,
    source: &str,
) -> Result<Scene> {
    let graph = extract_graph(&primary, &RelationThresholds::default());
    let normalized = Scene {
        primary,
        secondary,
        graph,
        room_mask: condition.scene.room_mask.clone(),
        text: condition.scene.text.clone(),
        source: source.to_string(),
        frame: condition.scene.frame,
    };
    Ok(denormalize_scene(&normalized, condition.scene.frame)?)
}

/// Stage-one sampling: primary objects for each condition, normalized frame.
pub fn sample_slg(
    model: &StageModel,
    schedule: &DiffusionSchedule,
    conditions: &[&PreparedScene],
    seed: u64,
    stride: usize,
    taxonomy: &CategoryTaxonomy,
) -> Result<Vec<Vec<ObjectRecord>>> {
    if model.stage != Stage::Slg {
        return Err(Error::Shape(format!(
            "expected an slg model, got {}",
            model.stage.name()
        )));
    }
    let values = sample_values(model, schedule, conditions, None, seed, stride)?;
    values
        .into_iter()
        .map(|v| {
            let (p, _) = decode_values(v, model.caps.primary, taxonomy)?;
            Ok(p)
        })
        .collect()
}

/// Stage-two sampling around fixed primary layouts (normalized frame).
pub fn sample_clg(
    model: &StageModel,
    schedule: &DiffusionSchedule,
    conditions: &[&PreparedScene],
    primary: &[Vec<ObjectRecord>],
    seed: u64,
    stride: usize,
    taxonomy: &CategoryTaxonomy,
) -> Result<Vec<Vec<ObjectRecord>>> {
    if model.stage != Stage::Clg {
        return Err(Error::Shape(format!(
            "expected a clg model, got {}",
            model.stage.name()
        )));
    }
    let anchors: Vec<Vec<f64>> = primary
        .iter()
        .map(|p| anchor_values(p, model, taxonomy))
        .collect::<Result<_>>()?;
    let values = sample_values(model, schedule, conditions, Some(&anchors), seed, stride)?;
    values
        .into_iter()
        .map(|v| {
            let (_, s) = decode_values(v, model.caps.secondary, taxonomy)?;
            Ok(s)
        })
        .collect()
}

/// Single-stage sampling of both tiers at once.
pub fn sample_single(
    model: &StageModel,
    schedule: &DiffusionSchedule,
    conditions: &[&PreparedScene],
    seed: u64,
    stride: usize,
    taxonomy: &CategoryTaxonomy,
) -> Result<Vec<(Vec<ObjectRecord>, Vec<ObjectRecord>)>> {
    if model.stage != Stage::Single {
        return Err(Error::Shape(format!(
            "expected a single-stage model, got {}",
            model.stage.name()
        )));
    }
    let values = sample_values(model, schedule, conditions, None, seed, stride)?;
    let slots = model.caps.primary + model.caps.secondary;
    values
        .into_iter()
        .map(|v| decode_values(v, slots, taxonomy))
        .collect()
}

/// SLG then CLG, returning world-frame scenes.
pub fn sample_two_stage(
    slg: &StageModel,
    clg: &StageModel,
    schedule: &DiffusionSchedule,
    conditions: &[&PreparedScene],
    seed: u64,
    stride: usize,
    taxonomy: &CategoryTaxonomy,
) -> Result<Vec<Scene>> {
    let primary = sample_slg(slg, schedule, conditions, seed, stride, taxonomy)?;
    let secondary = sample_clg(
        clg,
        schedule,
        conditions,
        &primary,
        crate::substream(seed, "clg"),
        stride,
        taxonomy,
    )?;
    conditions
        .iter()
        .zip(primary.into_iter().zip(secondary))
        .map(|(c, (p, s))| assemble_scene(c, p, s, "generated/two-stage"))
        .collect()
}
